//! Similarity values and regularization: the global correlation ratio, the
//! region-weighted SRWCR dissimilarity (two algebraically equivalent
//! evaluation routes), the RaPTOR patch baseline, bending energy of the
//! deformation, and the total cost.

use crate::bspline::FfdGrid;
use crate::error::{Error, Result};
use crate::histogram::{BinConfig, RegionalPdf, RegionalStats, EPS_P, EPS_SIGMA};
use crate::parallel::{for_each_item, split_mut, Pool};
use crate::volume::Volume3D;

/// Default penalty weight for mono-modal registration.
pub const W_P_MONO: f64 = 0.1;
/// Default penalty weight for multi-modal registration.
pub const W_P_MULTI: f64 = 30.0;

/// Which input plays the model image A, which plays the estimated image B,
/// and which input is warped.
///
/// The moving image (the one resampled through the transform) can act either
/// as the model or as the estimated image; independently, the caller's two
/// inputs can be swapped so the nominal fixed image is the one being warped.
/// That yields the four combinations explored by the synthetic benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Orientation {
    /// the warped image is the model image A (otherwise it is the estimate B)
    pub moving_is_model: bool,
    /// swap the roles of the two inputs before registering
    pub swap_inputs: bool,
}

impl Orientation {
    pub const MOVING_AS_MODEL: Orientation = Orientation {
        moving_is_model: true,
        swap_inputs: false,
    };
    pub const MOVING_AS_ESTIMATED: Orientation = Orientation {
        moving_is_model: false,
        swap_inputs: false,
    };
    pub const SWAPPED_MOVING_AS_MODEL: Orientation = Orientation {
        moving_is_model: true,
        swap_inputs: true,
    };
    pub const SWAPPED_MOVING_AS_ESTIMATED: Orientation = Orientation {
        moving_is_model: false,
        swap_inputs: true,
    };

    pub fn all_four() -> [Orientation; 4] {
        [
            Orientation::MOVING_AS_MODEL,
            Orientation::MOVING_AS_ESTIMATED,
            Orientation::SWAPPED_MOVING_AS_MODEL,
            Orientation::SWAPPED_MOVING_AS_ESTIMATED,
        ]
    }

    pub fn parse(s: &str) -> Result<Orientation> {
        match s {
            "moving-as-model" => Ok(Orientation::MOVING_AS_MODEL),
            "moving-as-estimated" => Ok(Orientation::MOVING_AS_ESTIMATED),
            "swapped-moving-as-model" => Ok(Orientation::SWAPPED_MOVING_AS_MODEL),
            "swapped-moving-as-estimated" => Ok(Orientation::SWAPPED_MOVING_AS_ESTIMATED),
            other => Err(Error::Config(format!(
                "unknown orientation `{other}` (expected moving-as-model, \
                 moving-as-estimated, swapped-moving-as-model or swapped-moving-as-estimated)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match (self.moving_is_model, self.swap_inputs) {
            (true, false) => "moving-as-model",
            (false, false) => "moving-as-estimated",
            (true, true) => "swapped-moving-as-model",
            (false, true) => "swapped-moving-as-estimated",
        }
    }
}

impl Default for Orientation {
    fn default() -> Self {
        Orientation::MOVING_AS_MODEL
    }
}

/// Total cost and its parts: `total = similarity + weight * penalty`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostBreakdown {
    pub similarity: f64,
    pub penalty: f64,
    pub weight: f64,
    pub total: f64,
}

impl CostBreakdown {
    pub fn compose(similarity: f64, penalty: f64, weight: f64) -> CostBreakdown {
        CostBreakdown {
            similarity,
            penalty,
            weight,
            total: similarity + weight * penalty,
        }
    }
}

/// Global correlation ratio CR(A,B) from a normalized joint table `p(a,b)`
/// (row-major in `a`, `bins x bins`). 1 means B is a perfect function of A.
pub fn correlation_ratio(joint: &[f64], cfg: BinConfig) -> Result<f64> {
    let nb = cfg.bins();
    assert_eq!(joint.len(), nb * nb, "joint table size");
    let total: f64 = joint.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "joint table not normalized (sum {total})"
        )));
    }
    let mut mu = 0.0;
    let mut e2 = 0.0;
    for a in 0..nb {
        for b in 0..nb {
            let p = joint[a * nb + b];
            mu += b as f64 * p;
            e2 += (b as f64) * (b as f64) * p;
        }
    }
    let sigma2 = e2 - mu * mu;
    if sigma2 < EPS_SIGMA {
        return Err(Error::Degenerate(
            "estimated image has (near-)zero variance".into(),
        ));
    }
    let mut cond = 0.0;
    for a in 0..nb {
        let row = &joint[a * nb..(a + 1) * nb];
        let pa: f64 = row.iter().sum();
        if pa < EPS_P {
            for (b, &p) in row.iter().enumerate() {
                cond += (b as f64) * (b as f64) * p;
            }
            continue;
        }
        let mua: f64 = row.iter().enumerate().map(|(b, &p)| b as f64 * p).sum::<f64>() / pa;
        for (b, &p) in row.iter().enumerate() {
            cond += (b as f64 - mua) * (b as f64 - mua) * p;
        }
    }
    Ok((1.0 - cond / sigma2).clamp(0.0, 1.0))
}

/// SRWCR dissimilarity: the region-probability-weighted mean of the local
/// `1 - CR` values, renormalized over retained regions so excluded
/// (degenerate) regions do not shrink the value. Lies in `[0, 1]`; 0 means
/// every region shows perfect functional dependence.
pub fn srwcr(pdf: &RegionalPdf, stats: &RegionalStats) -> Result<f64> {
    if stats.n_retained == 0 {
        return Err(Error::Degenerate("no retained regions".into()));
    }
    let mut acc = 0.0;
    for r in 0..pdf.n_regions() {
        if stats.retained[r] {
            acc += pdf.mass(r) * (1.0 - stats.cr[r]);
        }
    }
    Ok(acc / stats.retained_mass)
}

/// The same dissimilarity evaluated through the explicit triple sum over
/// `(r, a, b)` of `(b^2 - mu_r(a)^2) / sigma_r^2 * p(a,b,r)`; used to
/// cross-check the marginal route in tests and diagnostics.
pub fn srwcr_triple_sum(pdf: &RegionalPdf, stats: &RegionalStats) -> Result<f64> {
    if stats.n_retained == 0 {
        return Err(Error::Degenerate("no retained regions".into()));
    }
    let nb = pdf.n_bins();
    let mut acc = 0.0;
    for r in 0..pdf.n_regions() {
        if !stats.retained[r] {
            continue;
        }
        let block = pdf.joint_block(r);
        let inv_sigma2 = 1.0 / stats.sigma2[r];
        let mut local = 0.0;
        for a in 0..nb {
            let mu_a = stats.mu_a[r * nb + a];
            let row = &block[a * nb..(a + 1) * nb];
            for (b, &v) in row.iter().enumerate() {
                let bf = b as f64;
                local += (bf * bf - mu_a * mu_a) * v;
            }
        }
        acc += local * inv_sigma2;
    }
    Ok(acc / stats.retained_mass)
}

/// An axis-aligned cuboid of voxels, inclusive bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Patch {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl Patch {
    pub fn voxel_count(&self) -> usize {
        (self.hi[0] - self.lo[0] + 1)
            * (self.hi[1] - self.lo[1] + 1)
            * (self.hi[2] - self.lo[2] + 1)
    }
}

/// Deterministic default patch set for the RaPTOR baseline: the same lattice
/// cuboids that serve as SRWCR spatial bins (each node's support, clipped to
/// the domain).
pub fn lattice_patches(grid: &FfdGrid) -> Vec<Patch> {
    let tabs = grid.axis_tables();
    let (gx, gy, gz) = grid.node_dims();
    let mut out = Vec::with_capacity(gx * gy * gz);
    for rz in 0..gz {
        for ry in 0..gy {
            for rx in 0..gx {
                out.push(Patch {
                    lo: [tabs[0].lo[rx], tabs[1].lo[ry], tabs[2].lo[rz]],
                    hi: [tabs[0].hi[rx], tabs[1].hi[ry], tabs[2].hi[rz]],
                });
            }
        }
    }
    out
}

/// Seeded random cuboid patches of edge length `size`, fully inside `dims`.
pub fn random_patches(
    dims: (usize, usize, usize),
    count: usize,
    size: usize,
    seed: u64,
) -> Vec<Patch> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let d = [dims.0, dims.1, dims.2];
    (0..count)
        .map(|_| {
            let mut lo = [0usize; 3];
            let mut hi = [0usize; 3];
            for a in 0..3 {
                let max_lo = d[a].saturating_sub(size);
                let l = if max_lo == 0 { 0 } else { rng.gen_range(0..=max_lo) };
                lo[a] = l;
                hi[a] = (l + size - 1).min(d[a] - 1);
            }
            Patch { lo, hi }
        })
        .collect()
}

/// Per-patch statistics of the RaPTOR dissimilarity, kept for the gradient.
#[derive(Debug, Clone)]
pub(crate) struct RaptorPatchStats {
    /// 1/sigma_r^2 for retained patches, 0 for skipped ones
    pub inv_sigma2: Vec<f64>,
    /// patch mean of the estimated image
    pub mu: Vec<f64>,
    /// per-patch local value
    pub value: Vec<f64>,
    /// conditional mean of B per model bin, patch-major `r*bins + a`
    pub mu_a: Vec<f64>,
    /// patch voxel counts
    pub n: Vec<f64>,
    pub n_retained: usize,
}

impl RaptorPatchStats {
    pub fn empty(n_patches: usize, cfg: BinConfig) -> RaptorPatchStats {
        RaptorPatchStats {
            inv_sigma2: vec![0.0; n_patches],
            mu: vec![0.0; n_patches],
            value: vec![0.0; n_patches],
            mu_a: vec![0.0; n_patches * cfg.bins()],
            n: vec![0.0; n_patches],
            n_retained: 0,
        }
    }
}

/// Evaluate the RaPTOR statistics per patch (tent kernel on the model image,
/// frequency statistics on the estimate). Parallel over patches; each patch
/// owns its output slots.
pub(crate) fn raptor_patch_stats_into(
    st: &mut RaptorPatchStats,
    a_img: &Volume3D,
    b_img: &Volume3D,
    patches: &[Patch],
    cfg: BinConfig,
    pool: &Pool,
) -> Result<()> {
    if a_img.dims() != b_img.dims() {
        return Err(Error::DimMismatch(format!(
            "raptor inputs: {:?} vs {:?}",
            a_img.dims(),
            b_img.dims()
        )));
    }
    let dims = a_img.dims();
    for patch in patches {
        for a in 0..3 {
            if patch.hi[a] >= [dims.0, dims.1, dims.2][a] || patch.lo[a] > patch.hi[a] {
                return Err(Error::InvalidArgument(format!(
                    "patch {patch:?} outside domain {dims:?}"
                )));
            }
        }
    }
    let nb = cfg.bins();
    let l = cfg.l_max as f64;
    let (nx, ny, _) = dims;

    pool.run(|| {
        let items: Vec<_> = split_mut(&mut st.inv_sigma2, 1)
            .into_iter()
            .zip(split_mut(&mut st.mu, 1))
            .zip(split_mut(&mut st.value, 1))
            .zip(split_mut(&mut st.mu_a, nb))
            .zip(split_mut(&mut st.n, 1))
            .map(|((((isig, mu), value), mu_a), n)| (isig, mu, value, mu_a, n))
            .collect();
        for_each_item(items, |pi, (isig, mu_slot, value, mu_a, n_slot)| {
            let patch = &patches[pi];
            let n = patch.voxel_count() as f64;
            let mut sb = 0.0;
            let mut sb2 = 0.0;
            let mut p_bin = vec![0.0; nb];
            let mut s_bin = vec![0.0; nb];
            for z in patch.lo[2]..=patch.hi[2] {
                for y in patch.lo[1]..=patch.hi[1] {
                    let row = nx * (y + ny * z);
                    for x in patch.lo[0]..=patch.hi[0] {
                        let av = a_img.data()[row + x].clamp(0.0, l);
                        let bv = b_img.data()[row + x];
                        sb += bv;
                        sb2 += bv * bv;
                        let b0 = (av.floor() as usize).min(cfg.l_max - 1);
                        let w1 = av - b0 as f64;
                        let w0 = 1.0 - w1;
                        p_bin[b0] += w0;
                        s_bin[b0] += w0 * bv;
                        p_bin[b0 + 1] += w1;
                        s_bin[b0 + 1] += w1 * bv;
                    }
                }
            }
            let mu = sb / n;
            let sigma2 = sb2 / n - mu * mu;
            n_slot[0] = n;
            mu_slot[0] = mu;
            isig[0] = 0.0;
            value[0] = 0.0;
            mu_a.fill(0.0);
            if sigma2 < EPS_SIGMA {
                return; // degenerate patch, skipped
            }
            let mut cond = 0.0;
            for a in 0..nb {
                if p_bin[a] / n >= EPS_P {
                    let m = s_bin[a] / p_bin[a];
                    mu_a[a] = m;
                    cond += (p_bin[a] / n) * m * m;
                }
            }
            isig[0] = 1.0 / sigma2;
            value[0] = (sb2 / n - cond) / sigma2;
        });
    });

    st.n_retained = st.inv_sigma2.iter().filter(|&&v| v > 0.0).count();
    if st.n_retained == 0 {
        return Err(Error::Degenerate("all patches degenerate".into()));
    }
    Ok(())
}

pub(crate) fn raptor_patch_stats(
    a_img: &Volume3D,
    b_img: &Volume3D,
    patches: &[Patch],
    cfg: BinConfig,
) -> Result<RaptorPatchStats> {
    let mut st = RaptorPatchStats::empty(patches.len(), cfg);
    raptor_patch_stats_into(&mut st, a_img, b_img, patches, cfg, &Pool::new(0))?;
    Ok(st)
}

/// RaPTOR dissimilarity: frequency-count patch statistics with a tent kernel
/// on the model image, averaged over non-degenerate patches.
pub fn raptor(
    a_img: &Volume3D,
    b_img: &Volume3D,
    patches: &[Patch],
    cfg: BinConfig,
) -> Result<f64> {
    let st = raptor_patch_stats(a_img, b_img, patches, cfg)?;
    Ok(st.value.iter().sum::<f64>() / st.n_retained as f64)
}

/// The six second-derivative tensor terms of the bending energy:
/// per-axis derivative orders and multiplicity (mixed terms count twice).
const BENDING_TERMS: [([usize; 3], f64); 6] = [
    ([2, 0, 0], 1.0),
    ([0, 2, 0], 1.0),
    ([0, 0, 2], 1.0),
    ([1, 1, 0], 2.0),
    ([1, 0, 1], 2.0),
    ([0, 1, 1], 2.0),
];

/// Bending energy of the deformation: the mean over voxels of the summed
/// squared second partial derivatives of the transform, with an analytic
/// gradient per node.
///
/// The energy is a quadratic form in the node displacements whose voxel sums
/// factorize per axis, so it is evaluated exactly through banded per-axis
/// Gram matrices of basis-derivative products; no dense field is formed.
pub struct BendingOperator {
    node_dims: (usize, usize, usize),
    n_vox: f64,
    /// gram[axis][order]: banded `nodes x 7`, entry `i*7 + (j - i + 3)`
    gram: [[Vec<f64>; 3]; 3],
}

impl BendingOperator {
    pub fn new(grid: &FfdGrid) -> BendingOperator {
        let (nx, ny, nz) = grid.domain();
        let tabs = grid.axis_tables();
        let deltas = [grid.spacing().0, grid.spacing().1, grid.spacing().2];
        let node_dims = grid.node_dims();
        let g_axis = [node_dims.0, node_dims.1, node_dims.2];
        let n_axis = [nx, ny, nz];

        let mut gram: [[Vec<f64>; 3]; 3] = Default::default();
        for (axis, gram_axis) in gram.iter_mut().enumerate() {
            let g = g_axis[axis];
            let delta = deltas[axis];
            for (order, slot) in gram_axis.iter_mut().enumerate() {
                let mut m = vec![0.0; g * 7];
                let scale = 1.0 / delta.powi(order as i32);
                for v in 0..n_axis[axis] {
                    let base = tabs[axis].s0[v];
                    let t = v as f64 / delta - base as f64;
                    let mut row = [0.0f64; 4];
                    for (l, slot) in row.iter_mut().enumerate() {
                        *slot = scale
                            * match order {
                                0 => crate::bspline::basis(l, t),
                                1 => crate::bspline::basis_d1(l, t),
                                _ => crate::bspline::basis_d2(l, t),
                            };
                    }
                    for (li, &bi) in row.iter().enumerate() {
                        for (lj, &bj) in row.iter().enumerate() {
                            let i = base + li;
                            let off = lj as isize - li as isize + 3;
                            m[i * 7 + off as usize] += bi * bj;
                        }
                    }
                }
                *slot = m;
            }
        }
        BendingOperator {
            node_dims,
            n_vox: (nx * ny * nz) as f64,
            gram,
        }
    }

    /// Energy and per-node gradient for the grid's current displacements.
    pub fn energy_and_gradient(&self, grid: &FfdGrid, pool: &Pool) -> (f64, Vec<[f64; 3]>) {
        assert_eq!(grid.node_dims(), self.node_dims);
        let (gx, gy, gz) = self.node_dims;
        let disp = grid.displacements();
        let mut grad = vec![[0.0f64; 3]; disp.len()];
        let two_over_n = 2.0 / self.n_vox;

        pool.run(|| {
            let items = split_mut(&mut grad, gx);
            for_each_item(items, |row_idx, grow| {
                let sy = row_idx % gy;
                let sz = row_idx / gy;
                for (sx, gslot) in grow.iter_mut().enumerate() {
                    let mut acc = [0.0f64; 3];
                    let zlo = sz.saturating_sub(3);
                    let zhi = (sz + 3).min(gz - 1);
                    let ylo = sy.saturating_sub(3);
                    let yhi = (sy + 3).min(gy - 1);
                    let xlo = sx.saturating_sub(3);
                    let xhi = (sx + 3).min(gx - 1);
                    for jz in zlo..=zhi {
                        let oz = (jz as isize - sz as isize + 3) as usize;
                        for jy in ylo..=yhi {
                            let oy = (jy as isize - sy as isize + 3) as usize;
                            for jx in xlo..=xhi {
                                let ox = (jx as isize - sx as isize + 3) as usize;
                                let mut w = 0.0;
                                for (orders, mult) in BENDING_TERMS {
                                    w += mult
                                        * self.gram[0][orders[0]][sx * 7 + ox]
                                        * self.gram[1][orders[1]][sy * 7 + oy]
                                        * self.gram[2][orders[2]][sz * 7 + oz];
                                }
                                if w == 0.0 {
                                    continue;
                                }
                                let d = disp[jx + gx * (jy + gy * jz)];
                                acc[0] += w * d[0];
                                acc[1] += w * d[1];
                                acc[2] += w * d[2];
                            }
                        }
                    }
                    *gslot = [
                        two_over_n * acc[0],
                        two_over_n * acc[1],
                        two_over_n * acc[2],
                    ];
                }
            });
        });

        // the energy is quadratic: C_p = 0.5 * sum_s phi_s . grad_s
        let mut energy = 0.0;
        for (d, g) in disp.iter().zip(&grad) {
            energy += d[0] * g[0] + d[1] * g[1] + d[2] * g[2];
        }
        (0.5 * energy, grad)
    }
}

/// Bending energy and gradient of a grid over its own domain (one-shot
/// convenience; the registration engine caches the operator).
pub fn bending_energy(grid: &FfdGrid) -> (f64, Vec<[f64; 3]>) {
    let op = BendingOperator::new(grid);
    op.energy_and_gradient(grid, &Pool::new(0))
}

/// `C = D + w_p * C_p` with the bending energy computed from the grid.
pub fn total_cost(similarity: f64, grid: &FfdGrid, w_p: f64) -> CostBreakdown {
    assert!(w_p >= 0.0, "penalty weight must be non-negative");
    let (penalty, _) = bending_energy(grid);
    CostBreakdown::compose(similarity, penalty, w_p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bspline::SpatialWeightKind;
    use crate::histogram::{build_regional_pdf, parzen, regional_stats};
    use rand::Rng;

    fn seeded_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        use rand::SeedableRng;
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_int_volume(dims: (usize, usize, usize), l_max: usize, seed: u64) -> Volume3D {
        let mut rng = seeded_rng(seed);
        let data = (0..dims.0 * dims.1 * dims.2)
            .map(|_| rng.gen_range(0..=l_max) as f64)
            .collect();
        Volume3D::from_data(dims, (1.0, 1.0, 1.0), data).unwrap()
    }

    fn joint_of(a: &Volume3D, b: &Volume3D, cfg: BinConfig) -> Vec<f64> {
        let nb = cfg.bins();
        let mut j = vec![0.0; nb * nb];
        for (&av, &bv) in a.data().iter().zip(b.data()) {
            for ai in 0..nb {
                let ha = parzen(ai as f64 - av);
                if ha == 0.0 {
                    continue;
                }
                for bi in 0..nb {
                    let hb = parzen(bi as f64 - bv);
                    if hb != 0.0 {
                        j[ai * nb + bi] += ha * hb;
                    }
                }
            }
        }
        let n = a.len() as f64;
        for v in &mut j {
            *v /= n;
        }
        j
    }

    #[test]
    fn cr_perfect_dependence() {
        let cfg = BinConfig::default();
        let a = random_int_volume((8, 8, 8), 31, 1);
        let j = joint_of(&a, &a, cfg);
        assert!((correlation_ratio(&j, cfg).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cr_independent_product_joint() {
        let cfg = BinConfig::new(7);
        let nb = cfg.bins();
        // product of two arbitrary marginals => sigma^2(a) = sigma^2 for all a
        let pa: Vec<f64> = (0..nb).map(|a| (a + 1) as f64).collect();
        let pb: Vec<f64> = (0..nb).map(|b| (nb - b) as f64).collect();
        let za: f64 = pa.iter().sum();
        let zb: f64 = pb.iter().sum();
        let mut j = vec![0.0; nb * nb];
        for a in 0..nb {
            for b in 0..nb {
                j[a * nb + b] = (pa[a] / za) * (pb[b] / zb);
            }
        }
        assert!(correlation_ratio(&j, cfg).unwrap().abs() < 1e-12);
    }

    #[test]
    fn cr_matches_bruteforce_variance_decomposition() {
        let cfg = BinConfig::new(7);
        let a = random_int_volume((8, 8, 8), 7, 3);
        let b = random_int_volume((8, 8, 8), 7, 4);
        let j = joint_of(&a, &b, cfg);
        let nb = cfg.bins();
        // independent oracle on the same table
        let mut mu = 0.0;
        let mut e2 = 0.0;
        for ai in 0..nb {
            for bi in 0..nb {
                mu += bi as f64 * j[ai * nb + bi];
                e2 += (bi as f64) * (bi as f64) * j[ai * nb + bi];
            }
        }
        let sigma2 = e2 - mu * mu;
        let mut cond = 0.0;
        for ai in 0..nb {
            let pa: f64 = j[ai * nb..(ai + 1) * nb].iter().sum();
            if pa <= 0.0 {
                continue;
            }
            let mua: f64 = (0..nb).map(|bi| bi as f64 * j[ai * nb + bi]).sum::<f64>() / pa;
            cond += (0..nb)
                .map(|bi| (bi as f64 - mua) * (bi as f64 - mua) * j[ai * nb + bi])
                .sum::<f64>();
        }
        let expect = 1.0 - cond / sigma2;
        assert!((correlation_ratio(&j, cfg).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn cr_degenerate_estimated_image_errors() {
        let cfg = BinConfig::default();
        let a = random_int_volume((4, 4, 4), 31, 5);
        let b = Volume3D::new((4, 4, 4), (1.0, 1.0, 1.0), 7.0);
        let j = joint_of(&a, &b, cfg);
        assert!(matches!(
            correlation_ratio(&j, cfg),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn srwcr_zero_for_functional_mappings() {
        let dims = (12, 12, 12);
        let cfg = BinConfig::default();
        let a = random_int_volume(dims, 31, 7);
        let grid = FfdGrid::for_domain(dims, (4.0, 4.0, 4.0));
        for f in [|v: f64| v, |v: f64| 31.0 - v] {
            let mut b = a.clone();
            for v in b.data_mut() {
                *v = f(*v);
            }
            let pdf =
                build_regional_pdf(&a, &b, &grid, SpatialWeightKind::CubicBSpline, cfg).unwrap();
            let stats = regional_stats(&pdf, cfg);
            let d = srwcr(&pdf, &stats).unwrap();
            assert!(d.abs() < 1e-10, "got {d}");
        }
    }

    #[test]
    fn srwcr_near_one_for_independent_split() {
        // model image random over a few bins, estimate split half/half within
        // every region: conditional variance equals total variance, up to the
        // finite-sample bias of the per-bin conditional means
        let dims = (12, 12, 12);
        let cfg = BinConfig::new(3);
        let a = random_int_volume(dims, 3, 8);
        let mut b = Volume3D::new(dims, (1.0, 1.0, 1.0), 0.0);
        for (i, v) in b.data_mut().iter_mut().enumerate() {
            *v = if i % 2 == 0 { 0.0 } else { 3.0 };
        }
        let grid = FfdGrid::for_domain(dims, (4.0, 4.0, 4.0));
        let pdf = build_regional_pdf(&a, &b, &grid, SpatialWeightKind::CubicBSpline, cfg).unwrap();
        let stats = regional_stats(&pdf, cfg);
        let d = srwcr(&pdf, &stats).unwrap();
        assert!(d > 0.9, "got {d}");
        assert!(d <= 1.0 + 1e-12);
    }

    #[test]
    fn srwcr_triple_sum_agrees_with_marginal_route() {
        let dims = (10, 9, 8);
        let cfg = BinConfig::default();
        let mut rng = seeded_rng(11);
        let a = Volume3D::from_data(
            dims,
            (1.0, 1.0, 1.0),
            (0..dims.0 * dims.1 * dims.2)
                .map(|_| rng.gen_range(0.0..31.0))
                .collect(),
        )
        .unwrap();
        let b = Volume3D::from_data(
            dims,
            (1.0, 1.0, 1.0),
            (0..dims.0 * dims.1 * dims.2)
                .map(|_| rng.gen_range(0.0..31.0))
                .collect(),
        )
        .unwrap();
        for kind in [SpatialWeightKind::CubicBSpline, SpatialWeightKind::Boxcar] {
            let grid = FfdGrid::for_domain(dims, (4.0, 4.0, 4.0));
            let pdf = build_regional_pdf(&a, &b, &grid, kind, cfg).unwrap();
            let stats = regional_stats(&pdf, cfg);
            let d1 = srwcr(&pdf, &stats).unwrap();
            let d2 = srwcr_triple_sum(&pdf, &stats).unwrap();
            assert!((d1 - d2).abs() < 1e-10, "{kind:?}: {d1} vs {d2}");
            assert!((0.0..=1.0).contains(&d1));
        }
    }

    #[test]
    fn srwcr_invariant_to_bin_permutation_of_model_image() {
        // CR conditions on the partition induced by A, not its ordering
        let dims = (12, 12, 12);
        let cfg = BinConfig::new(9);
        let mut rng = seeded_rng(14);
        let vals = [0usize, 3, 6, 9];
        let a_data: Vec<f64> = (0..dims.0 * dims.1 * dims.2)
            .map(|_| vals[rng.gen_range(0..vals.len())] as f64)
            .collect();
        let b = Volume3D::from_data(
            dims,
            (1.0, 1.0, 1.0),
            (0..dims.0 * dims.1 * dims.2)
                .map(|_| rng.gen_range(0..=9) as f64)
                .collect(),
        )
        .unwrap();
        let a = Volume3D::from_data(dims, (1.0, 1.0, 1.0), a_data.clone()).unwrap();
        // permute the four used bins: 0 -> 9, 3 -> 0, 6 -> 3, 9 -> 6
        let perm = |v: f64| match v as usize {
            0 => 9.0,
            3 => 0.0,
            6 => 3.0,
            _ => 6.0,
        };
        let a_perm =
            Volume3D::from_data(dims, (1.0, 1.0, 1.0), a_data.iter().map(|&v| perm(v)).collect())
                .unwrap();
        let grid = FfdGrid::for_domain(dims, (4.0, 4.0, 4.0));
        let pdf1 = build_regional_pdf(&a, &b, &grid, SpatialWeightKind::CubicBSpline, cfg).unwrap();
        let d1 = srwcr(&pdf1, &regional_stats(&pdf1, cfg)).unwrap();
        let pdf2 =
            build_regional_pdf(&a_perm, &b, &grid, SpatialWeightKind::CubicBSpline, cfg).unwrap();
        let d2 = srwcr(&pdf2, &regional_stats(&pdf2, cfg)).unwrap();
        assert!((d1 - d2).abs() < 1e-12, "{d1} vs {d2}");
    }

    #[test]
    fn srwcr_is_asymmetric() {
        // B = (A-5)^2/2 on bins: functional A -> B but not B -> A
        let dims = (12, 12, 12);
        let mut rng = seeded_rng(13);
        let vals = [0.0f64, 2.0, 4.0];
        let a = Volume3D::from_data(
            dims,
            (1.0, 1.0, 1.0),
            (0..dims.0 * dims.1 * dims.2)
                .map(|_| {
                    let v: f64 = vals[rng.gen_range(0..vals.len())];
                    5.0 + if rng.gen_bool(0.5) { v } else { -v }
                })
                .collect(),
        )
        .unwrap();
        let b = Volume3D::from_data(
            dims,
            (1.0, 1.0, 1.0),
            a.data().iter().map(|v| (v - 5.0) * (v - 5.0) / 2.0).collect(),
        )
        .unwrap();
        let grid = FfdGrid::for_domain(dims, (4.0, 4.0, 4.0));
        let cfg10 = BinConfig::new(10);
        let pdf_ab =
            build_regional_pdf(&a, &b, &grid, SpatialWeightKind::CubicBSpline, cfg10).unwrap();
        let d_ab = srwcr(&pdf_ab, &regional_stats(&pdf_ab, cfg10)).unwrap();
        let pdf_ba =
            build_regional_pdf(&b, &a, &grid, SpatialWeightKind::CubicBSpline, cfg10).unwrap();
        let d_ba = srwcr(&pdf_ba, &regional_stats(&pdf_ba, cfg10)).unwrap();
        assert!(d_ab < 1e-10, "A->B functional, got {d_ab}");
        assert!(d_ba > 0.05, "B->A not functional, got {d_ba}");
    }

    #[test]
    fn srwcr_decreases_with_improving_functional_dependence() {
        // blend an independent estimate toward an exact function of the
        // model image; the dissimilarity must fall monotonically
        let dims = (12, 12, 12);
        let cfg = BinConfig::default();
        let a = random_int_volume(dims, 31, 15);
        let noise = random_int_volume(dims, 31, 16);
        let grid = FfdGrid::for_domain(dims, (4.0, 4.0, 4.0));
        let mut last = f64::INFINITY;
        for mix in [0.0, 0.35, 0.7, 1.0] {
            let b = Volume3D::from_data(
                dims,
                (1.0, 1.0, 1.0),
                a.data()
                    .iter()
                    .zip(noise.data())
                    .map(|(&av, &nv)| mix * av + (1.0 - mix) * nv)
                    .collect(),
            )
            .unwrap();
            let pdf =
                build_regional_pdf(&a, &b, &grid, SpatialWeightKind::CubicBSpline, cfg).unwrap();
            let d = srwcr(&pdf, &regional_stats(&pdf, cfg)).unwrap();
            assert!(d < last, "srwcr not decreasing: {d} after {last} at mix {mix}");
            last = d;
        }
        assert!(last < 1e-10, "exact dependence should reach ~0, got {last}");
    }

    #[test]
    fn raptor_zero_for_identical_integer_images() {
        let cfg = BinConfig::default();
        let a = random_int_volume((8, 8, 8), 31, 20);
        let patch = Patch {
            lo: [0, 0, 0],
            hi: [7, 7, 7],
        };
        let v = raptor(&a, &a.clone(), &[patch], cfg).unwrap();
        assert!(v.abs() < 1e-12, "got {v}");
    }

    #[test]
    fn raptor_matches_bruteforce_oracle() {
        let cfg = BinConfig::new(7);
        let dims = (8, 8, 8);
        let mut rng = seeded_rng(21);
        let a = Volume3D::from_data(
            dims,
            (1.0, 1.0, 1.0),
            (0..512).map(|_| rng.gen_range(0.0..7.0)).collect(),
        )
        .unwrap();
        let b = Volume3D::from_data(
            dims,
            (1.0, 1.0, 1.0),
            (0..512).map(|_| rng.gen_range(0.0..7.0)).collect(),
        )
        .unwrap();
        let patch = Patch {
            lo: [0, 0, 0],
            hi: [7, 7, 7],
        };
        let got = raptor(&a, &b, &[patch], cfg).unwrap();

        // brute force with explicit loops over bins and voxels
        let nb = cfg.bins();
        let n = 512.0;
        let tent_k = |t: f64| (1.0 - t.abs()).max(0.0);
        let mut p = vec![0.0; nb];
        let mut s = vec![0.0; nb];
        let mut sb = 0.0;
        let mut sb2 = 0.0;
        for (&av, &bv) in a.data().iter().zip(b.data()) {
            for (ai, slot) in p.iter_mut().enumerate() {
                let w = tent_k(ai as f64 - av);
                *slot += w;
                s[ai] += w * bv;
            }
            sb += bv;
            sb2 += bv * bv;
        }
        let mu = sb / n;
        let sigma2 = sb2 / n - mu * mu;
        let mut cond = 0.0;
        for ai in 0..nb {
            if p[ai] / n >= EPS_P {
                cond += (p[ai] / n) * (s[ai] / p[ai]) * (s[ai] / p[ai]);
            }
        }
        let expect = (sb2 / n - cond) / sigma2;
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn raptor_value_independent_of_patch_multiplicity() {
        let cfg = BinConfig::default();
        let a = random_int_volume((8, 8, 8), 31, 30);
        let b = random_int_volume((8, 8, 8), 31, 31);
        let patch = Patch {
            lo: [0, 0, 0],
            hi: [7, 7, 7],
        };
        let v1 = raptor(&a, &b, &[patch], cfg).unwrap();
        let v4 = raptor(&a, &b, &[patch; 4], cfg).unwrap();
        assert!((v1 - v4).abs() < 1e-12);
    }

    #[test]
    fn raptor_skips_degenerate_patches() {
        let cfg = BinConfig::default();
        let a = random_int_volume((8, 8, 8), 31, 32);
        let mut b = random_int_volume((8, 8, 8), 31, 33);
        for z in 0..4 {
            for y in 0..8 {
                for x in 0..8 {
                    b.set(x, y, z, 9.0);
                }
            }
        }
        let flat = Patch {
            lo: [0, 0, 0],
            hi: [7, 7, 3],
        };
        let live = Patch {
            lo: [0, 0, 4],
            hi: [7, 7, 7],
        };
        let both = raptor(&a, &b, &[flat, live], cfg).unwrap();
        let only_live = raptor(&a, &b, &[live], cfg).unwrap();
        assert!((both - only_live).abs() < 1e-12);
    }

    #[test]
    fn bending_zero_grid() {
        let grid = FfdGrid::for_domain((16, 16, 16), (4.0, 4.0, 4.0));
        let (e, g) = bending_energy(&grid);
        assert_eq!(e, 0.0);
        assert!(g.iter().all(|v| *v == [0.0; 3]));
    }

    #[test]
    fn bending_vanishes_on_affine_displacements() {
        let mut grid = FfdGrid::for_domain((16, 16, 16), (4.0, 4.0, 4.0));
        let (gx, gy, gz) = grid.node_dims();
        for iz in 0..gz {
            for iy in 0..gy {
                for ix in 0..gx {
                    let s = grid.node_index(ix, iy, iz);
                    let p = grid.node_position(s);
                    grid.displacements_mut()[s] = [
                        0.1 * p[0] - 0.05 * p[1] + 0.3,
                        0.02 * p[2] + 1.0,
                        -0.07 * p[0] + 0.01 * p[1] - 0.5,
                    ];
                }
            }
        }
        let (e, g) = bending_energy(&grid);
        assert!(e.abs() < 1e-18, "energy {e}");
        for v in &g {
            for c in v {
                assert!(c.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bending_matches_dense_voxel_sum() {
        use crate::bspline::{basis, basis_d1, basis_d2};
        let dims = (10, 9, 8);
        let mut grid = FfdGrid::for_domain(dims, (3.0, 3.0, 3.0));
        let mut rng = seeded_rng(40);
        for d in grid.displacements_mut() {
            for c in d.iter_mut() {
                *c = rng.gen_range(-2.0..2.0);
            }
        }
        let (e, _) = bending_energy(&grid);

        // dense oracle: evaluate the six second-derivative fields per voxel
        let (gx, gy, _gz) = grid.node_dims();
        let deltas = [3.0f64, 3.0, 3.0];
        let row = |axis: usize, v: usize, order: usize| -> (usize, [f64; 4]) {
            let t = v as f64 / deltas[axis];
            let base = t.floor() as usize;
            let eta = t - base as f64;
            let scale = 1.0 / deltas[axis].powi(order as i32);
            let mut r = [0.0f64; 4];
            for (l, slot) in r.iter_mut().enumerate() {
                *slot = scale
                    * match order {
                        0 => basis(l, eta),
                        1 => basis_d1(l, eta),
                        _ => basis_d2(l, eta),
                    };
            }
            (base, r)
        };
        let mut total = 0.0;
        for z in 0..dims.2 {
            for y in 0..dims.1 {
                for x in 0..dims.0 {
                    for (orders, mult) in BENDING_TERMS {
                        let (bx, rx) = row(0, x, orders[0]);
                        let (by, ry) = row(1, y, orders[1]);
                        let (bz, rz) = row(2, z, orders[2]);
                        let mut d2 = [0.0f64; 3];
                        for (lz, &wz) in rz.iter().enumerate() {
                            for (ly, &wy) in ry.iter().enumerate() {
                                for (lx, &wx) in rx.iter().enumerate() {
                                    let w = wx * wy * wz;
                                    let s = (bx + lx) + gx * ((by + ly) + gy * (bz + lz));
                                    let d = grid.displacements()[s];
                                    d2[0] += w * d[0];
                                    d2[1] += w * d[1];
                                    d2[2] += w * d[2];
                                }
                            }
                        }
                        total += mult * (d2[0] * d2[0] + d2[1] * d2[1] + d2[2] * d2[2]);
                    }
                }
            }
        }
        total /= (dims.0 * dims.1 * dims.2) as f64;
        assert!(
            (e - total).abs() < 1e-9 * total.max(1.0),
            "gram {e} vs dense {total}"
        );
    }

    #[test]
    fn bending_gradient_matches_finite_differences() {
        let dims = (12, 10, 8);
        let mut grid = FfdGrid::for_domain(dims, (4.0, 4.0, 4.0));
        let mut rng = seeded_rng(41);
        for d in grid.displacements_mut() {
            for c in d.iter_mut() {
                *c = rng.gen_range(-2.0..2.0);
            }
        }
        let (_, grad) = bending_energy(&grid);
        let h = 1e-4;
        for _ in 0..12 {
            let s = rng.gen_range(0..grid.node_count());
            let c = rng.gen_range(0..3);
            let mut gp = grid.clone();
            gp.displacements_mut()[s][c] += h;
            let mut gm = grid.clone();
            gm.displacements_mut()[s][c] -= h;
            let (ep, _) = bending_energy(&gp);
            let (em, _) = bending_energy(&gm);
            let fd = (ep - em) / (2.0 * h);
            let g = grad[s][c];
            let denom = fd.abs().max(1e-9);
            assert!(
                ((g - fd) / denom).abs() < 1e-6,
                "node {s} comp {c}: {g} vs {fd}"
            );
        }
    }

    #[test]
    fn total_cost_arithmetic() {
        let grid = FfdGrid::for_domain((8, 8, 8), (4.0, 4.0, 4.0));
        let c = total_cost(0.5, &grid, 30.0);
        assert_eq!(c.total, 0.5);
        let c2 = CostBreakdown::compose(0.2, 0.01, 30.0);
        assert!((c2.total - 0.5).abs() < 1e-15);
        let c3 = CostBreakdown::compose(0.7, 123.0, 0.0);
        assert_eq!(c3.total, 0.7);
    }

    #[test]
    fn lattice_patches_cover_domain() {
        let grid = FfdGrid::for_domain((16, 16, 16), (5.0, 5.0, 5.0));
        let patches = lattice_patches(&grid);
        assert_eq!(patches.len(), grid.node_count());
        for p in &patches {
            assert!(p.hi[0] < 16 && p.hi[1] < 16 && p.hi[2] < 16);
            assert!(p.voxel_count() > 0);
        }
    }
}
