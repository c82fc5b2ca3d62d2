//! Thin parallelism layer.
//!
//! Every parallel stage in this crate is "owner computes": work is split into
//! disjoint output slabs up front and each worker writes only its own slab, so
//! results are bitwise independent of the worker count and of scheduling
//! order. On wasm32 the same call sites degrade to sequential loops.

#[cfg(not(target_arch = "wasm32"))]
mod imp {
    use rayon::prelude::*;

    pub struct Pool {
        inner: Option<rayon::ThreadPool>,
        threads: usize,
    }

    impl Pool {
        /// `threads == 0` selects the number of available cores.
        pub fn new(threads: usize) -> Pool {
            if threads == 0 {
                Pool {
                    inner: None,
                    threads: rayon::current_num_threads(),
                }
            } else {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .expect("failed to build thread pool");
                Pool {
                    inner: Some(pool),
                    threads,
                }
            }
        }

        pub fn threads(&self) -> usize {
            self.threads
        }

        pub fn run<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
            match &self.inner {
                Some(pool) => pool.install(f),
                None => f(),
            }
        }
    }

    /// Apply `f` to every work item, in parallel. Items are pre-built disjoint
    /// views, so any schedule yields the same result.
    pub fn for_each_item<W: Send>(items: Vec<W>, f: impl Fn(usize, W) + Sync + Send) {
        items
            .into_par_iter()
            .enumerate()
            .for_each(|(i, w)| f(i, w));
    }
}

#[cfg(target_arch = "wasm32")]
mod imp {
    pub struct Pool {
        threads: usize,
    }

    impl Pool {
        pub fn new(_threads: usize) -> Pool {
            Pool { threads: 1 }
        }

        pub fn threads(&self) -> usize {
            self.threads
        }

        pub fn run<R>(&self, f: impl FnOnce() -> R) -> R {
            f()
        }
    }

    pub fn for_each_item<W>(items: Vec<W>, f: impl Fn(usize, W)) {
        for (i, w) in items.into_iter().enumerate() {
            f(i, w);
        }
    }
}

pub(crate) use imp::{for_each_item, Pool};

/// Split a slice into mutable slabs of `slab_len` (the last may be shorter).
pub(crate) fn split_mut<T>(data: &mut [T], slab_len: usize) -> Vec<&mut [T]> {
    assert!(slab_len > 0);
    data.chunks_mut(slab_len).collect()
}
