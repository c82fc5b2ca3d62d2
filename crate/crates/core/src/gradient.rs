//! Analytic gradient of the SRWCR dissimilarity with respect to the
//! control-node displacements.
//!
//! The derivative factors through the chain rule: a per-voxel table of the
//! dissimilarity's sensitivity to the moving image's intensity, the spatial
//! gradient of the moving image at the warped position, and the transform
//! Jacobian of each node. The per-voxel sensitivity differs between the two
//! orientations (warped image acting as the estimate B or as the model A);
//! both restrict their sums to the 64 supporting regions of a voxel and the
//! at most two active Parzen bins per intensity channel.
//!
//! For the renormalized dissimilarity over retained regions the per-voxel
//! sensitivity of the estimated-moving orientation is
//!
//! ```text
//! dD/dB(x) = (1/M*) sum_{r in R*, r supp x} w(r,x)/sigma_r^2
//!            * sum_a h(a - A(x)) sum_b [ (1-CR_r)(b^2 - 2 b mu_r)
//!                                        + 2 b mu_r(a) - b^2 ] h'(b - B(x))
//! ```
//!
//! with `M*` the retained mass; the model-moving orientation swaps the roles
//! of the kernels:
//!
//! ```text
//! dD/dA(x) = (1/M*) sum_{r in R*, r supp x} w(r,x)/sigma_r^2
//!            * sum_a h'(a - A(x)) mu_r(a) (2 sum_b b h(b - B(x)) - mu_r(a))
//! ```
//!
//! Both signs are pinned by finite-difference tests against the dissimilarity
//! itself.

use crate::bspline::{AxisTable, FfdGrid, SpatialWeightKind};
use crate::error::{Error, Result};
use crate::histogram::{BinCache, BinConfig, RegionalPdf, RegionalStats};
use crate::parallel::{for_each_item, split_mut, Pool};
use crate::volume::Volume3D;

/// Per-voxel derivative tables: the dissimilarity's sensitivity to the
/// moving image's intensity at each fixed-grid voxel, and the moving image's
/// spatial gradient at the warped position (intensity per voxel).
#[derive(Debug, Clone, Default)]
pub struct VoxelDerivTables {
    pub d_dmoving: Vec<f64>,
    pub grad_moving: Vec<[f64; 3]>,
}

/// Parameter-space gradient: one 3-vector per control node.
pub type ParamGradient = Vec<[f64; 3]>;

fn check_inputs(
    pdf: &RegionalPdf,
    stats: &RegionalStats,
    a_img: &Volume3D,
    b_img: &Volume3D,
    grid: &FfdGrid,
) -> Result<()> {
    if a_img.dims() != b_img.dims() || a_img.dims() != grid.domain() {
        return Err(Error::DimMismatch(format!(
            "gradient inputs: images {:?}/{:?}, grid domain {:?}",
            a_img.dims(),
            b_img.dims(),
            grid.domain()
        )));
    }
    if pdf.n_regions() != grid.node_count() || stats.retained.len() != pdf.n_regions() {
        return Err(Error::DimMismatch(
            "pdf/stats region count does not match the grid".into(),
        ));
    }
    Ok(())
}

/// Sensitivity of the dissimilarity to the estimated image's intensities
/// (orientation: the moving image plays B). Voxels supported only by
/// non-retained regions get exactly zero.
pub fn d_similarity_d_estimated(
    pdf: &RegionalPdf,
    stats: &RegionalStats,
    a_img: &Volume3D,
    b_img: &Volume3D,
    grid: &FfdGrid,
    kind: SpatialWeightKind,
    cfg: BinConfig,
) -> Result<Vec<f64>> {
    check_inputs(pdf, stats, a_img, b_img, grid)?;
    let model = BinCache::from_volume(a_img, cfg)?;
    let moving = BinCache::from_volume(b_img, cfg)?;
    let tabs = grid.axis_tables();
    let mut out = vec![0.0; a_img.len()];
    voxel_deriv_kernel(
        &mut out,
        stats,
        grid,
        &tabs,
        kind,
        &model,
        &moving,
        false,
        &Pool::new(0),
    );
    Ok(out)
}

/// Sensitivity of the dissimilarity to the model image's intensities
/// (orientation: the moving image plays A).
pub fn d_similarity_d_model(
    pdf: &RegionalPdf,
    stats: &RegionalStats,
    a_img: &Volume3D,
    b_img: &Volume3D,
    grid: &FfdGrid,
    kind: SpatialWeightKind,
    cfg: BinConfig,
) -> Result<Vec<f64>> {
    check_inputs(pdf, stats, a_img, b_img, grid)?;
    let model = BinCache::from_volume(a_img, cfg)?;
    let estimated = BinCache::from_volume(b_img, cfg)?;
    let tabs = grid.axis_tables();
    let mut out = vec![0.0; a_img.len()];
    voxel_deriv_kernel(
        &mut out,
        stats,
        grid,
        &tabs,
        kind,
        &model,
        &estimated,
        true,
        &Pool::new(0),
    );
    Ok(out)
}

/// Shared per-voxel kernel. `model_cache` always belongs to the model image
/// A, `other_cache` to the estimated image B. With `moving_is_model` the
/// derivative kernel lands on A's bins, otherwise on B's bins.
#[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
pub(crate) fn voxel_deriv_kernel(
    out: &mut [f64],
    stats: &RegionalStats,
    grid: &FfdGrid,
    tabs: &[AxisTable; 3],
    kind: SpatialWeightKind,
    model_cache: &BinCache,
    other_cache: &BinCache,
    moving_is_model: bool,
    pool: &Pool,
) {
    let (nx, ny, _nz) = grid.domain();
    let (gx, gy, _gz) = grid.node_dims();
    let nb = stats.mu_a.len() / stats.retained.len();
    let inv_mass = 1.0 / stats.retained_mass;

    let wx = tabs[0].weights(kind);
    let wy = tabs[1].weights(kind);
    let wz = tabs[2].weights(kind);

    pool.run(|| {
        let slabs = split_mut(out, nx * ny);
        for_each_item(slabs, |z, slab| {
            let bz = tabs[2].s0[z];
            let rz = wz[z];
            for y in 0..ny {
                let by = tabs[1].s0[y];
                let ry = wy[y];
                let row = nx * y;
                for x in 0..nx {
                    let i = row + x; // voxel index within this z-plane
                    let gi = i + nx * ny * z;
                    let bx = tabs[0].s0[x];
                    let rx = wx[x];

                    let mut acc = 0.0;
                    if moving_is_model {
                        // derivative kernel on the model bins
                        let a0 = model_cache.bin0[gi] as usize;
                        let da0 = model_cache.d0[gi];
                        let da1 = model_cache.d1[gi];
                        if da0 != 0.0 || da1 != 0.0 {
                            let b0 = other_cache.bin0[gi] as usize;
                            let s1b = other_cache.h0[gi] * b0 as f64
                                + other_cache.h1[gi] * (b0 as f64 + 1.0);
                            for (lz, &wkz) in rz.iter().enumerate() {
                                if wkz == 0.0 {
                                    continue;
                                }
                                for (ly, &wky) in ry.iter().enumerate() {
                                    let wyz = wkz * wky;
                                    if wyz == 0.0 {
                                        continue;
                                    }
                                    let rrow = gx * ((by + ly) + gy * (bz + lz)) + bx;
                                    for (lx, &wkx) in rx.iter().enumerate() {
                                        let w = wyz * wkx;
                                        if w == 0.0 {
                                            continue;
                                        }
                                        let r = rrow + lx;
                                        if !stats.retained[r] {
                                            continue;
                                        }
                                        let mu_a0 = stats.mu_a[r * nb + a0];
                                        let mu_a1 = stats.mu_a[r * nb + a0 + 1];
                                        let term = da0 * mu_a0 * (2.0 * s1b - mu_a0)
                                            + da1 * mu_a1 * (2.0 * s1b - mu_a1);
                                        acc += w * term / stats.sigma2[r];
                                    }
                                }
                            }
                        }
                    } else {
                        // derivative kernel on the estimated bins
                        let db0 = other_cache.d0[gi];
                        let db1 = other_cache.d1[gi];
                        if db0 != 0.0 || db1 != 0.0 {
                            let b0 = other_cache.bin0[gi] as usize;
                            let b0f = b0 as f64;
                            let b1f = b0f + 1.0;
                            let s1d = db0 * b0f + db1 * b1f;
                            let s2d = db0 * b0f * b0f + db1 * b1f * b1f;
                            let a0 = model_cache.bin0[gi] as usize;
                            let ha0 = model_cache.h0[gi];
                            let ha1 = model_cache.h1[gi];
                            for (lz, &wkz) in rz.iter().enumerate() {
                                if wkz == 0.0 {
                                    continue;
                                }
                                for (ly, &wky) in ry.iter().enumerate() {
                                    let wyz = wkz * wky;
                                    if wyz == 0.0 {
                                        continue;
                                    }
                                    let rrow = gx * ((by + ly) + gy * (bz + lz)) + bx;
                                    for (lx, &wkx) in rx.iter().enumerate() {
                                        let w = wyz * wkx;
                                        if w == 0.0 {
                                            continue;
                                        }
                                        let r = rrow + lx;
                                        if !stats.retained[r] {
                                            continue;
                                        }
                                        let cr = stats.cr[r];
                                        let q = ha0 * stats.mu_a[r * nb + a0]
                                            + ha1 * stats.mu_a[r * nb + a0 + 1];
                                        let term = 2.0 * (q - (1.0 - cr) * stats.mu[r]) * s1d
                                            - cr * s2d;
                                        acc += w * term / stats.sigma2[r];
                                    }
                                }
                            }
                        }
                    }
                    slab[i] = acc * inv_mass;
                }
            }
        });
    });
}

/// Assemble the parameter-space gradient through the chain rule:
/// `g_s = sum_{x in V(s)} d_dmoving(x) * grad_moving(x) * J(x, s)`, plus an
/// optional weighted penalty gradient.
///
/// The triple sum factorizes per axis, so the gather runs as three separable
/// contractions (x, then y, then z), each parallel over disjoint output
/// slabs.
pub fn assemble_param_gradient(
    tables: &VoxelDerivTables,
    grid: &FfdGrid,
    penalty: Option<(&[[f64; 3]], f64)>,
) -> ParamGradient {
    let tabs = grid.axis_tables();
    let mut scratch = AssembleScratch::default();
    let mut out = vec![[0.0; 3]; grid.node_count()];
    assemble_into(
        &mut out,
        tables,
        grid,
        &tabs,
        penalty,
        &mut scratch,
        &Pool::new(0),
    );
    out
}

#[derive(Debug, Clone, Default)]
pub(crate) struct AssembleScratch {
    c1: Vec<[f64; 3]>,
    c2: Vec<[f64; 3]>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn assemble_into(
    out: &mut [[f64; 3]],
    tables: &VoxelDerivTables,
    grid: &FfdGrid,
    tabs: &[AxisTable; 3],
    penalty: Option<(&[[f64; 3]], f64)>,
    scratch: &mut AssembleScratch,
    pool: &Pool,
) {
    let (nx, ny, nz) = grid.domain();
    let (gx, gy, gz) = grid.node_dims();
    assert_eq!(out.len(), gx * gy * gz);
    assert_eq!(tables.d_dmoving.len(), nx * ny * nz);
    assert_eq!(tables.grad_moving.len(), nx * ny * nz);

    scratch.c1.clear();
    scratch.c1.resize(gx * ny * nz, [0.0; 3]);
    scratch.c2.clear();
    scratch.c2.resize(gx * gy * nz, [0.0; 3]);

    // contract x: c1[gx, y, z] = sum_x w_x * t(x) * grad_moving(x)
    pool.run(|| {
        let slabs = split_mut(&mut scratch.c1, gx * ny);
        for_each_item(slabs, |z, slab| {
            slab.fill([0.0; 3]);
            for y in 0..ny {
                let vrow = nx * (y + ny * z);
                let orow = gx * y;
                for x in 0..nx {
                    let t = tables.d_dmoving[vrow + x];
                    if t == 0.0 {
                        continue;
                    }
                    let gm = tables.grad_moving[vrow + x];
                    let v = [t * gm[0], t * gm[1], t * gm[2]];
                    let base = tabs[0].s0[x];
                    let w = tabs[0].w[x];
                    for (l, &wk) in w.iter().enumerate() {
                        let slot = &mut slab[orow + base + l];
                        slot[0] += wk * v[0];
                        slot[1] += wk * v[1];
                        slot[2] += wk * v[2];
                    }
                }
            }
        });
    });

    // contract y: c2[gx, gy, z] = sum_y w_y * c1[gx, y, z]
    pool.run(|| {
        let slabs = split_mut(&mut scratch.c2, gx * gy);
        for_each_item(slabs, |z, slab| {
            slab.fill([0.0; 3]);
            for y in 0..ny {
                let base = tabs[1].s0[y];
                let w = tabs[1].w[y];
                let irow = gx * (y + ny * z);
                for (l, &wk) in w.iter().enumerate() {
                    if wk == 0.0 {
                        continue;
                    }
                    let orow = gx * (base + l);
                    for ix in 0..gx {
                        let v = scratch.c1[irow + ix];
                        let slot = &mut slab[orow + ix];
                        slot[0] += wk * v[0];
                        slot[1] += wk * v[1];
                        slot[2] += wk * v[2];
                    }
                }
            }
        });
    });

    // contract z: g[gx, gy, gz] = sum_z w_z * c2[gx, gy, z]
    let c2 = &scratch.c2;
    pool.run(|| {
        let planes = split_mut(out, gx * gy);
        for_each_item(planes, |iz, plane| {
            plane.fill([0.0; 3]);
            for z in tabs[2].lo[iz]..=tabs[2].hi[iz] {
                let wk = tabs[2].w[z][iz - tabs[2].s0[z]];
                if wk == 0.0 {
                    continue;
                }
                let irow = gx * gy * z;
                for j in 0..gx * gy {
                    let v = c2[irow + j];
                    plane[j][0] += wk * v[0];
                    plane[j][1] += wk * v[1];
                    plane[j][2] += wk * v[2];
                }
            }
        });
    });

    if let Some((pgrad, w_p)) = penalty {
        assert_eq!(pgrad.len(), out.len());
        for (o, p) in out.iter_mut().zip(pgrad) {
            o[0] += w_p * p[0];
            o[1] += w_p * p[1];
            o[2] += w_p * p[2];
        }
    }
}
