//! Parzen-window soft binning, the three-channel joint PDF p(a,b,r) over
//! intensity pairs and spatial regions, and the per-region statistics tables
//! (variances, conditional means, local correlation ratios).
//!
//! The joint PDF accumulates, for every voxel, the spatial weight of each of
//! its 64 supporting regions times the Parzen weights of the (at most) two
//! intensity bins per image, and normalizes by the actual accumulated mass.
//! Accumulation is parallel over regions: every region owns its own block, so
//! the summation order is fixed and results are independent of the worker
//! count.

use crate::bspline::{AxisTable, FfdGrid, SpatialWeightKind};
use crate::error::{Error, Result};
use crate::parallel::{for_each_item, split_mut, Pool};
use crate::volume::Volume3D;

/// Mass floor below which a region (or a conditional intensity bin) is
/// treated as empty; the statistics divide by these masses.
pub const EPS_P: f64 = 1e-12;
/// Variance floor below which a region's estimated image is degenerate.
pub const EPS_SIGMA: f64 = 1e-8;

/// Intensity binning configuration: `l_max` is the maximal intensity bin, so
/// there are `l_max + 1` bins per image channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinConfig {
    pub l_max: usize,
}

impl Default for BinConfig {
    fn default() -> Self {
        BinConfig { l_max: 31 }
    }
}

impl BinConfig {
    pub fn new(l_max: usize) -> BinConfig {
        assert!(l_max >= 1, "l_max must be at least 1");
        BinConfig { l_max }
    }

    pub fn bins(&self) -> usize {
        self.l_max + 1
    }
}

/// Second-order Parzen window. Piecewise quadratic, support `|t| < 1`,
/// partition of unity over integer shifts.
#[inline]
pub fn parzen(t: f64) -> f64 {
    let a = t.abs();
    if a < 0.5 {
        -1.8 * a * a - 0.1 * a + 1.0
    } else if a < 1.0 {
        1.8 * a * a - 3.7 * a + 1.9
    } else {
        0.0
    }
}

/// Derivative of [`parzen`]. The kernel has kinks at `t = 0` and `|t| = 1`;
/// there the symmetric convention `0` is used so no direction is favored.
#[inline]
pub fn parzen_deriv(t: f64) -> f64 {
    let a = t.abs();
    let da = if a == 0.0 {
        return 0.0;
    } else if a < 0.5 {
        -3.6 * a - 0.1
    } else if a < 1.0 {
        3.6 * a - 3.7
    } else {
        return 0.0;
    };
    if t > 0.0 {
        da
    } else {
        -da
    }
}

/// Per-voxel soft-binning cache for one image: the lower of the two active
/// bins, both Parzen weights and both Parzen-derivative values.
#[derive(Debug, Clone, Default)]
pub(crate) struct BinCache {
    pub bin0: Vec<u32>,
    pub h0: Vec<f64>,
    pub h1: Vec<f64>,
    pub d0: Vec<f64>,
    pub d1: Vec<f64>,
}

impl BinCache {
    pub fn with_capacity(n: usize) -> BinCache {
        BinCache {
            bin0: Vec::with_capacity(n),
            h0: Vec::with_capacity(n),
            h1: Vec::with_capacity(n),
            d0: Vec::with_capacity(n),
            d1: Vec::with_capacity(n),
        }
    }

    /// Rebuild from image values; values must lie in `[0, l_max]` up to a
    /// rounding tolerance.
    pub fn fill(&mut self, values: &[f64], cfg: BinConfig) -> Result<()> {
        let l = cfg.l_max as f64;
        self.bin0.clear();
        self.h0.clear();
        self.h1.clear();
        self.d0.clear();
        self.d1.clear();
        for &raw in values {
            if !(-1e-6..=l + 1e-6).contains(&raw) {
                return Err(Error::NotNormalized {
                    value: raw,
                    l_max: cfg.l_max,
                });
            }
            let v = raw.clamp(0.0, l);
            // clamp the base bin so (bin0, bin0+1) are always valid indices;
            // the Parzen weights vanish on the out-of-support side
            let b0 = (v.floor() as usize).min(cfg.l_max - 1);
            let t0 = b0 as f64 - v;
            let t1 = t0 + 1.0;
            self.bin0.push(b0 as u32);
            self.h0.push(parzen(t0));
            self.h1.push(parzen(t1));
            self.d0.push(parzen_deriv(t0));
            self.d1.push(parzen_deriv(t1));
        }
        Ok(())
    }

    pub fn from_volume(v: &Volume3D, cfg: BinConfig) -> Result<BinCache> {
        let mut c = BinCache::with_capacity(v.len());
        c.fill(v.data(), cfg)?;
        Ok(c)
    }
}

/// Regional joint intensity histogram: for every spatial bin `r` the
/// unnormalized joint mass table over `(a, b)` intensity bins, the region
/// mass, and the global normalizer `Z`.
#[derive(Debug, Clone)]
pub struct RegionalPdf {
    n_regions: usize,
    n_bins: usize,
    joint: Vec<f64>,
    mass: Vec<f64>,
    z: f64,
}

impl RegionalPdf {
    pub fn empty(n_regions: usize, cfg: BinConfig) -> RegionalPdf {
        let n_bins = cfg.bins();
        RegionalPdf {
            n_regions,
            n_bins,
            joint: vec![0.0; n_regions * n_bins * n_bins],
            mass: vec![0.0; n_regions],
            z: 0.0,
        }
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    /// Global normalizer: total accumulated mass over all regions.
    pub fn z(&self) -> f64 {
        self.z
    }

    /// Unnormalized mass of region `r`.
    pub fn mass(&self, r: usize) -> f64 {
        self.mass[r]
    }

    /// `p(r)`: probability of region `r`.
    pub fn p_region(&self, r: usize) -> f64 {
        self.mass[r] / self.z
    }

    /// Unnormalized joint block of region `r`, row-major in `a`.
    pub fn joint_block(&self, r: usize) -> &[f64] {
        let b2 = self.n_bins * self.n_bins;
        &self.joint[r * b2..(r + 1) * b2]
    }

    /// `p_r(a, b)`: joint probability within region `r`.
    pub fn p_joint(&self, r: usize, a: usize, b: usize) -> f64 {
        self.joint_block(r)[a * self.n_bins + b] / self.mass[r]
    }

    /// `p(a, b, r)`: the full three-channel density.
    pub fn p_full(&self, r: usize, a: usize, b: usize) -> f64 {
        self.joint_block(r)[a * self.n_bins + b] / self.z
    }

    /// Debug dump as a scalar volume of dims `(bins, bins, regions)` holding
    /// `p(a, b, r)` with `b` along x and `a` along y.
    pub fn to_debug_volume(&self) -> Volume3D {
        let dims = (self.n_bins, self.n_bins, self.n_regions);
        let mut v = Volume3D::new(dims, (1.0, 1.0, 1.0), 0.0);
        for r in 0..self.n_regions {
            let block = self.joint_block(r);
            for a in 0..self.n_bins {
                for b in 0..self.n_bins {
                    v.set(b, a, r, block[a * self.n_bins + b] / self.z);
                }
            }
        }
        v
    }
}

/// Build the regional joint PDF of two normalized images over the regions of
/// `grid` (one region per control node).
///
/// `b_img` is the already-warped estimate. Errors on dim mismatches and on
/// intensities outside `[0, l_max]`.
pub fn build_regional_pdf(
    a_img: &Volume3D,
    b_img: &Volume3D,
    grid: &FfdGrid,
    kind: SpatialWeightKind,
    cfg: BinConfig,
) -> Result<RegionalPdf> {
    if a_img.dims() != b_img.dims() {
        return Err(Error::DimMismatch(format!(
            "joint pdf inputs: {:?} vs {:?}",
            a_img.dims(),
            b_img.dims()
        )));
    }
    if a_img.dims() != grid.domain() {
        return Err(Error::DimMismatch(format!(
            "grid domain {:?} vs image {:?}",
            grid.domain(),
            a_img.dims()
        )));
    }
    let a_cache = BinCache::from_volume(a_img, cfg)?;
    let b_cache = BinCache::from_volume(b_img, cfg)?;
    let tabs = grid.axis_tables();
    let mut pdf = RegionalPdf::empty(grid.node_count(), cfg);
    let pool = Pool::new(0);
    build_pdf_into(&mut pdf, grid, &tabs, kind, &a_cache, &b_cache, &pool);
    Ok(pdf)
}

/// Accumulate the joint PDF into pre-allocated storage. Parallel over
/// regions; each region owns its block so results are worker-count
/// independent.
pub(crate) fn build_pdf_into(
    pdf: &mut RegionalPdf,
    grid: &FfdGrid,
    tabs: &[AxisTable; 3],
    kind: SpatialWeightKind,
    a_cache: &BinCache,
    b_cache: &BinCache,
    pool: &Pool,
) {
    let (nx, ny, _nz) = grid.domain();
    let (gx, gy, _gz) = grid.node_dims();
    let nb = pdf.n_bins;
    let b2 = nb * nb;

    let wx = tabs[0].weights(kind);
    let wy = tabs[1].weights(kind);
    let wz = tabs[2].weights(kind);

    let joint = &mut pdf.joint;
    let mass = &mut pdf.mass;
    pool.run(|| {
        let blocks = split_mut(joint, b2);
        let masses = split_mut(mass, 1);
        let items: Vec<(&mut [f64], &mut [f64])> = blocks.into_iter().zip(masses).collect();
        for_each_item(items, |r, (block, m)| {
            block.fill(0.0);
            let rx = r % gx;
            let ry = (r / gx) % gy;
            let rz = r / (gx * gy);
            for z in tabs[2].lo[rz]..=tabs[2].hi[rz] {
                let wkz = wz[z][rz - tabs[2].s0[z]];
                if wkz == 0.0 {
                    continue;
                }
                for y in tabs[1].lo[ry]..=tabs[1].hi[ry] {
                    let wkyz = wkz * wy[y][ry - tabs[1].s0[y]];
                    if wkyz == 0.0 {
                        continue;
                    }
                    let row = nx * (y + ny * z);
                    for x in tabs[0].lo[rx]..=tabs[0].hi[rx] {
                        let w = wkyz * wx[x][rx - tabs[0].s0[x]];
                        if w == 0.0 {
                            continue;
                        }
                        let i = row + x;
                        let a0 = a_cache.bin0[i] as usize;
                        let b0 = b_cache.bin0[i] as usize;
                        let wa0 = w * a_cache.h0[i];
                        let wa1 = w * a_cache.h1[i];
                        let hb0 = b_cache.h0[i];
                        let hb1 = b_cache.h1[i];
                        let base = a0 * nb + b0;
                        block[base] += wa0 * hb0;
                        block[base + 1] += wa0 * hb1;
                        block[base + nb] += wa1 * hb0;
                        block[base + nb + 1] += wa1 * hb1;
                    }
                }
            }
            m[0] = block.iter().sum();
        });
    });
    pdf.z = pdf.mass.iter().sum();
}

/// Per-region statistics tables consumed by the metric value and gradient:
/// variance and mean of the estimated image, conditional means per model
/// bin, the local correlation ratio, and retention flags for degenerate
/// regions.
#[derive(Debug, Clone)]
pub struct RegionalStats {
    pub retained: Vec<bool>,
    pub sigma2: Vec<f64>,
    pub mu: Vec<f64>,
    pub cr: Vec<f64>,
    /// conditional mean of `b` given model bin `a`, region-major `r*bins + a`;
    /// zero where the conditional mass is below [`EPS_P`]
    pub mu_a: Vec<f64>,
    /// normalized `p_r(a)`, region-major
    pub p_a: Vec<f64>,
    /// total unnormalized mass of retained regions
    pub retained_mass: f64,
    pub n_retained: usize,
}

impl RegionalStats {
    pub fn empty(n_regions: usize, cfg: BinConfig) -> RegionalStats {
        let nb = cfg.bins();
        RegionalStats {
            retained: vec![false; n_regions],
            sigma2: vec![0.0; n_regions],
            mu: vec![0.0; n_regions],
            cr: vec![0.0; n_regions],
            mu_a: vec![0.0; n_regions * nb],
            p_a: vec![0.0; n_regions * nb],
            retained_mass: 0.0,
            n_retained: 0,
        }
    }
}

/// Derive the per-region statistics from a regional PDF.
///
/// Regions with mass below [`EPS_P`] or estimated-image variance below
/// [`EPS_SIGMA`] are flagged not-retained and excluded from the metric and
/// its gradient. Conditional bins with mass below [`EPS_P`] contribute their
/// raw second moment but use a zero conditional mean, which keeps the
/// marginal and triple-sum evaluation paths consistent.
pub fn regional_stats(pdf: &RegionalPdf, cfg: BinConfig) -> RegionalStats {
    let mut stats = RegionalStats::empty(pdf.n_regions(), cfg);
    regional_stats_into(&mut stats, pdf);
    stats
}

pub(crate) fn regional_stats_into(stats: &mut RegionalStats, pdf: &RegionalPdf) {
    let nb = pdf.n_bins;
    stats.retained_mass = 0.0;
    stats.n_retained = 0;
    for r in 0..pdf.n_regions {
        let m = pdf.mass[r];
        stats.retained[r] = false;
        stats.cr[r] = 0.0;
        stats.sigma2[r] = 0.0;
        stats.mu[r] = 0.0;
        stats.mu_a[r * nb..(r + 1) * nb].fill(0.0);
        stats.p_a[r * nb..(r + 1) * nb].fill(0.0);
        if m <= 0.0 || m / pdf.z < EPS_P {
            continue;
        }
        let block = pdf.joint_block(r);
        // marginal moments of the estimated image
        let mut e1 = 0.0;
        let mut e2 = 0.0;
        for a in 0..nb {
            let row = &block[a * nb..(a + 1) * nb];
            for (b, &v) in row.iter().enumerate() {
                let p = v / m;
                let bf = b as f64;
                e1 += bf * p;
                e2 += bf * bf * p;
            }
        }
        let mu = e1;
        let sigma2 = e2 - mu * mu;
        stats.mu[r] = mu;
        stats.sigma2[r] = sigma2;
        if sigma2 < EPS_SIGMA {
            continue;
        }
        // conditional moments per model bin
        let mut cond = 0.0; // sum over a of p(a) times conditional variance
        for a in 0..nb {
            let row = &block[a * nb..(a + 1) * nb];
            let mut p = 0.0;
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for (b, &v) in row.iter().enumerate() {
                let q = v / m;
                let bf = b as f64;
                p += q;
                s1 += bf * q;
                s2 += bf * bf * q;
            }
            stats.p_a[r * nb + a] = p;
            if p >= EPS_P {
                let mu_a = s1 / p;
                stats.mu_a[r * nb + a] = mu_a;
                cond += s2 - s1 * mu_a;
            } else {
                cond += s2;
            }
        }
        let cr = (1.0 - cond / sigma2).clamp(0.0, 1.0);
        stats.cr[r] = cr;
        stats.retained[r] = true;
        stats.retained_mass += m;
        stats.n_retained += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bspline::spatial_weight;
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

    fn random_volume(dims: (usize, usize, usize), l_max: usize, seed: u64) -> Volume3D {
        let mut rng = seeded_rng(seed);
        let data = (0..dims.0 * dims.1 * dims.2)
            .map(|_| rng.gen_range(0.0..l_max as f64))
            .collect();
        Volume3D::from_data(dims, (1.0, 1.0, 1.0), data).unwrap()
    }

    /// Brute-force dense accumulation of the three-channel PDF.
    fn dense_oracle(
        a: &Volume3D,
        b: &Volume3D,
        grid: &FfdGrid,
        kind: SpatialWeightKind,
        cfg: BinConfig,
    ) -> (Vec<f64>, Vec<f64>, f64) {
        let nb = cfg.bins();
        let nr = grid.node_count();
        let mut joint = vec![0.0; nr * nb * nb];
        let (nx, ny, nz) = a.dims();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let p = [x as f64, y as f64, z as f64];
                    let av = a.at(x, y, z);
                    let bv = b.at(x, y, z);
                    for r in 0..nr {
                        let w = spatial_weight(kind, grid, r, p);
                        if w == 0.0 {
                            continue;
                        }
                        for ai in 0..nb {
                            let ha = parzen(ai as f64 - av);
                            if ha == 0.0 {
                                continue;
                            }
                            for bi in 0..nb {
                                let hb = parzen(bi as f64 - bv);
                                if hb == 0.0 {
                                    continue;
                                }
                                joint[r * nb * nb + ai * nb + bi] += w * ha * hb;
                            }
                        }
                    }
                }
            }
        }
        let mass: Vec<f64> = (0..nr)
            .map(|r| joint[r * nb * nb..(r + 1) * nb * nb].iter().sum())
            .collect();
        let z: f64 = mass.iter().sum();
        (joint, mass, z)
    }

    #[test]
    fn parzen_values() {
        assert_eq!(parzen(0.0), 1.0);
        assert!((parzen(0.5) - 0.5).abs() < 1e-15);
        // continuity: both branches give the same value at 0.5
        let lo: f64 = -1.8 * 0.25 - 0.05 + 1.0;
        let hi: f64 = 1.8 * 0.25 - 3.7 * 0.5 + 1.9;
        assert!((lo - 0.5).abs() < 1e-15);
        assert!((hi - 0.5).abs() < 1e-15);
        assert_eq!(parzen(1.2), 0.0);
        assert_eq!(parzen(-1.2), 0.0);
    }

    #[test]
    fn parzen_partition_of_unity() {
        let cfg = BinConfig::default();
        for k in 0..=310 {
            let v = k as f64 * 0.1;
            let s: f64 = (0..=cfg.l_max).map(|a| parzen(a as f64 - v)).sum();
            assert!((s - 1.0).abs() < 1e-12, "PoU at {v}: {s}");
        }
    }

    #[test]
    fn parzen_deriv_values() {
        assert_eq!(parzen_deriv(0.0), 0.0);
        assert!((parzen_deriv(0.25) + 1.0).abs() < 1e-15);
        assert!((parzen_deriv(0.75) + 1.0).abs() < 1e-15);
        assert_eq!(parzen_deriv(1.0), 0.0);
        // odd symmetry
        assert!((parzen_deriv(-0.25) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn parzen_deriv_matches_finite_differences() {
        let h = 1e-7;
        for k in -40..=40 {
            let t = k as f64 * 0.025 + 0.0125; // stays off the kink points
            let fd = (parzen(t + h) - parzen(t - h)) / (2.0 * h);
            assert!(
                (parzen_deriv(t) - fd).abs() < 1e-6,
                "at {t}: {} vs {fd}",
                parzen_deriv(t)
            );
        }
    }

    #[test]
    fn constant_images_give_delta_histogram() {
        let dims = (8, 8, 8);
        let a = Volume3D::new(dims, (1.0, 1.0, 1.0), 0.0);
        let b = Volume3D::new(dims, (1.0, 1.0, 1.0), 0.0);
        let grid = FfdGrid::for_domain(dims, (4.0, 4.0, 4.0));
        let cfg = BinConfig::default();
        let pdf = build_regional_pdf(&a, &b, &grid, SpatialWeightKind::CubicBSpline, cfg).unwrap();
        for r in 0..pdf.n_regions() {
            if pdf.mass(r) / pdf.z() < EPS_P {
                continue;
            }
            assert!((pdf.p_joint(r, 0, 0) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sparse_accumulation_matches_dense_oracle() {
        let dims = (8, 8, 8);
        let cfg = BinConfig::new(7);
        let a = random_volume(dims, 7, 100);
        let b = random_volume(dims, 7, 101);
        for kind in [SpatialWeightKind::CubicBSpline, SpatialWeightKind::Boxcar] {
            let grid = FfdGrid::for_domain(dims, (4.0, 4.0, 4.0));
            let pdf = build_regional_pdf(&a, &b, &grid, kind, cfg).unwrap();
            let (joint, mass, z) = dense_oracle(&a, &b, &grid, kind, cfg);
            assert!((pdf.z() - z).abs() < 1e-9 * z.max(1.0));
            for r in 0..pdf.n_regions() {
                assert!((pdf.mass(r) - mass[r]).abs() < 1e-12 * mass[r].max(1.0));
                let nb = cfg.bins();
                for a_i in 0..nb {
                    for b_i in 0..nb {
                        let got = pdf.joint_block(r)[a_i * nb + b_i];
                        let want = joint[r * nb * nb + a_i * nb + b_i];
                        assert!(
                            (got - want).abs() < 1e-12,
                            "{kind:?} r={r} a={a_i} b={b_i}: {got} vs {want}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn boxcar_region_covering_domain_equals_plain_joint_histogram() {
        let dims = (8, 8, 8);
        let cfg = BinConfig::new(7);
        let a = random_int_volume(dims, 7, 40);
        let b = random_int_volume(dims, 7, 41);
        let grid = FfdGrid::for_domain(dims, (8.0, 8.0, 8.0));
        let pdf = build_regional_pdf(&a, &b, &grid, SpatialWeightKind::Boxcar, cfg).unwrap();
        // node (2,2,2) sits at (8,8,8); its open 32-wide boxcar covers 8^3
        let r = grid.node_index(2, 2, 2);
        let nb = cfg.bins();
        let mut hist = vec![0.0; nb * nb];
        for (&av, &bv) in a.data().iter().zip(b.data()) {
            hist[(av as usize) * nb + bv as usize] += 1.0;
        }
        let n = a.len() as f64;
        for ai in 0..nb {
            for bi in 0..nb {
                assert!(
                    (pdf.p_joint(r, ai, bi) - hist[ai * nb + bi] / n).abs() < 1e-12,
                    "a={ai} b={bi}"
                );
            }
        }
    }

    #[test]
    fn bspline_weights_make_z_the_voxel_count() {
        let dims = (10, 9, 8);
        let cfg = BinConfig::default();
        let a = random_volume(dims, 31, 7);
        let b = random_volume(dims, 31, 8);
        let grid = FfdGrid::for_domain(dims, (3.0, 3.0, 3.0));
        let pdf = build_regional_pdf(&a, &b, &grid, SpatialWeightKind::CubicBSpline, cfg).unwrap();
        let n = (dims.0 * dims.1 * dims.2) as f64;
        assert!((pdf.z() - n).abs() < 1e-9 * n, "Z = {} vs {n}", pdf.z());
    }

    #[test]
    fn pdf_normalization_invariants() {
        let dims = (9, 8, 7);
        let cfg = BinConfig::default();
        let a = random_volume(dims, 31, 55);
        let b = random_volume(dims, 31, 56);
        let grid = FfdGrid::for_domain(dims, (4.0, 4.0, 4.0));
        let pdf = build_regional_pdf(&a, &b, &grid, SpatialWeightKind::CubicBSpline, cfg).unwrap();
        let nb = cfg.bins();
        let mut total = 0.0;
        for r in 0..pdf.n_regions() {
            let block = pdf.joint_block(r);
            assert!(block.iter().all(|&v| v >= 0.0));
            let s: f64 = block.iter().sum();
            total += s / pdf.z();
            if pdf.mass(r) / pdf.z() >= EPS_P {
                let norm: f64 = (0..nb)
                    .flat_map(|ai| (0..nb).map(move |bi| (ai, bi)))
                    .map(|(ai, bi)| pdf.p_joint(r, ai, bi))
                    .sum();
                assert!((norm - 1.0).abs() < 1e-9);
            }
        }
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn functional_dependence_gives_cr_one() {
        let dims = (8, 8, 8);
        let cfg = BinConfig::default();
        let a = random_int_volume(dims, 31, 9);
        let mut b = a.clone();
        for v in b.data_mut() {
            *v = 31.0 - *v; // strictly monotone relabeling
        }
        let grid = FfdGrid::for_domain(dims, (4.0, 4.0, 4.0));
        let pdf = build_regional_pdf(&a, &b, &grid, SpatialWeightKind::CubicBSpline, cfg).unwrap();
        let stats = regional_stats(&pdf, cfg);
        for r in 0..pdf.n_regions() {
            if stats.retained[r] {
                assert!(
                    (stats.cr[r] - 1.0).abs() < 1e-12,
                    "region {r}: cr {}",
                    stats.cr[r]
                );
            }
        }
    }

    #[test]
    fn constant_model_image_gives_cr_zero() {
        let dims = (8, 8, 8);
        let cfg = BinConfig::default();
        let a = Volume3D::new(dims, (1.0, 1.0, 1.0), 0.0);
        let mut b = Volume3D::new(dims, (1.0, 1.0, 1.0), 0.0);
        for (i, v) in b.data_mut().iter_mut().enumerate() {
            *v = if i % 2 == 0 { 0.0 } else { 31.0 };
        }
        let grid = FfdGrid::for_domain(dims, (4.0, 4.0, 4.0));
        let pdf = build_regional_pdf(&a, &b, &grid, SpatialWeightKind::CubicBSpline, cfg).unwrap();
        let stats = regional_stats(&pdf, cfg);
        let mut checked = 0;
        for r in 0..pdf.n_regions() {
            if stats.retained[r] {
                assert!(stats.cr[r].abs() < 1e-12, "region {r}: cr {}", stats.cr[r]);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn stats_match_direct_variance_decomposition() {
        let dims = (8, 8, 8);
        let cfg = BinConfig::new(7);
        let a = random_volume(dims, 7, 70);
        let b = random_volume(dims, 7, 71);
        let grid = FfdGrid::for_domain(dims, (4.0, 4.0, 4.0));
        let pdf = build_regional_pdf(&a, &b, &grid, SpatialWeightKind::CubicBSpline, cfg).unwrap();
        let stats = regional_stats(&pdf, cfg);
        let nb = cfg.bins();
        for r in 0..pdf.n_regions() {
            if !stats.retained[r] {
                continue;
            }
            // direct decomposition on the normalized joint table of region r
            let mut sigma2 = 0.0;
            let mut mu = 0.0;
            for bi in 0..nb {
                let pb: f64 = (0..nb).map(|ai| pdf.p_joint(r, ai, bi)).sum();
                mu += bi as f64 * pb;
                sigma2 += (bi as f64) * (bi as f64) * pb;
            }
            sigma2 -= mu * mu;
            let mut cond = 0.0;
            for ai in 0..nb {
                let pa: f64 = (0..nb).map(|bi| pdf.p_joint(r, ai, bi)).sum();
                if pa < EPS_P {
                    for bi in 0..nb {
                        cond += (bi as f64) * (bi as f64) * pdf.p_joint(r, ai, bi);
                    }
                    continue;
                }
                let mu_a: f64 =
                    (0..nb).map(|bi| bi as f64 * pdf.p_joint(r, ai, bi)).sum::<f64>() / pa;
                let s2: f64 = (0..nb)
                    .map(|bi| (bi as f64 - mu_a) * (bi as f64 - mu_a) * pdf.p_joint(r, ai, bi))
                    .sum();
                cond += s2;
            }
            let cr = 1.0 - cond / sigma2;
            assert!((stats.sigma2[r] - sigma2).abs() < 1e-12);
            assert!((stats.mu[r] - mu).abs() < 1e-12);
            assert!((stats.cr[r] - cr).abs() < 1e-12, "r={r}");
            assert!((0.0..=1.0).contains(&stats.cr[r]));
        }
    }

    #[test]
    fn bin_cache_rejects_out_of_range() {
        let cfg = BinConfig::default();
        let v = Volume3D::from_data((2, 1, 1), (1.0, 1.0, 1.0), vec![0.0, 32.5]).unwrap();
        assert!(matches!(
            BinCache::from_volume(&v, cfg),
            Err(Error::NotNormalized { .. })
        ));
    }
}
