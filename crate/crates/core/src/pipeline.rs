//! Coarse-to-fine registration driver: pyramids, per-level grids and
//! optimization, dense-field accumulation across levels, and backward
//! warping utilities.

use crate::bspline::{self, DisplacementField, FfdGrid, SpatialWeightKind};
use crate::engine::{Engine, EvalPlan, MetricKind};
use crate::error::{Error, Result};
use crate::histogram::BinConfig;
use crate::metric::{CostBreakdown, Orientation, W_P_MONO};
use crate::optimizer::{self, LbfgsConfig, Termination};
use crate::volume::Volume3D;

/// Registration settings. `grid_spacing` is the node spacing in voxels of
/// each level's own resolution, so the finest-level default of 5 voxels
/// corresponds to effective spacings of 20/10/5 finest-level voxels across a
/// three-level run.
#[derive(Debug, Clone)]
pub struct RegistrationConfig {
    pub levels: usize,
    pub grid_spacing: (f64, f64, f64),
    pub bins: BinConfig,
    pub penalty_weight: f64,
    pub orientation: Orientation,
    pub weight_kind: SpatialWeightKind,
    pub metric: MetricKind,
    pub optimizer: LbfgsConfig,
    /// max iterations for coarse, medium and fine levels
    pub max_iter: [usize; 3],
    pub threads: usize,
    pub deterministic: bool,
    pub intensity_window: Option<(f64, f64)>,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            levels: 3,
            grid_spacing: (5.0, 5.0, 5.0),
            bins: BinConfig::default(),
            penalty_weight: W_P_MONO,
            orientation: Orientation::default(),
            weight_kind: SpatialWeightKind::CubicBSpline,
            metric: MetricKind::Srwcr,
            optimizer: LbfgsConfig::default(),
            max_iter: [200, 200, 120],
            threads: 0,
            deterministic: true,
            intensity_window: None,
        }
    }
}

impl RegistrationConfig {
    /// Iteration budget per level: the last entry always belongs to the
    /// finest level, extra coarse levels reuse the first entry.
    pub fn level_max_iter(&self, level: usize) -> usize {
        let l = self.levels;
        if l <= 3 {
            self.max_iter[level + 3 - l]
        } else {
            let idx = (level + 3).saturating_sub(l).min(2);
            self.max_iter[idx]
        }
    }

    /// Parse the ASCII `key = value` config format.
    pub fn parse(text: &str) -> Result<RegistrationConfig> {
        let mut cfg = RegistrationConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("malformed config line `{line}`")));
            };
            let key = key.trim();
            let value = value.trim();
            let bad = || Error::Config(format!("bad value `{value}` for key `{key}`"));
            match key {
                "levels" => {
                    cfg.levels = value.parse().map_err(|_| bad())?;
                    if cfg.levels < 1 {
                        return Err(bad());
                    }
                }
                "grid_spacing" => {
                    let v: Vec<f64> = value
                        .split_whitespace()
                        .map(|t| t.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad())?;
                    cfg.grid_spacing = match v.as_slice() {
                        [d] => (*d, *d, *d),
                        [a, b, c] => (*a, *b, *c),
                        _ => return Err(bad()),
                    };
                    if cfg.grid_spacing.0 < 2.0
                        || cfg.grid_spacing.1 < 2.0
                        || cfg.grid_spacing.2 < 2.0
                    {
                        return Err(Error::Config(
                            "grid_spacing must be at least 2 voxels".into(),
                        ));
                    }
                }
                "bins" => cfg.bins = BinConfig::new(value.parse().map_err(|_| bad())?),
                "penalty_weight" => {
                    cfg.penalty_weight = value.parse().map_err(|_| bad())?;
                    if cfg.penalty_weight < 0.0 {
                        return Err(bad());
                    }
                }
                "orientation" => cfg.orientation = Orientation::parse(value)?,
                "weight_kind" => cfg.weight_kind = SpatialWeightKind::parse(value)?,
                "metric" => cfg.metric = MetricKind::parse(value)?,
                "threads" => cfg.threads = value.parse().map_err(|_| bad())?,
                "deterministic" => {
                    cfg.deterministic = match value {
                        "on" | "true" | "1" => true,
                        "off" | "false" | "0" => false,
                        _ => return Err(bad()),
                    }
                }
                "max_iter_l0" => cfg.max_iter[0] = value.parse().map_err(|_| bad())?,
                "max_iter_l1" => cfg.max_iter[1] = value.parse().map_err(|_| bad())?,
                "max_iter_l2" => cfg.max_iter[2] = value.parse().map_err(|_| bad())?,
                "intensity_window" => {
                    let v: Vec<f64> = value
                        .split_whitespace()
                        .map(|t| t.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad())?;
                    match v.as_slice() {
                        [lo, hi] if lo < hi => cfg.intensity_window = Some((*lo, *hi)),
                        _ => return Err(bad()),
                    }
                }
                _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
            }
        }
        Ok(cfg)
    }
}

/// Per-level trace of an accepted-iteration cost history.
#[derive(Debug, Clone)]
pub struct LevelTrace {
    pub dims: (usize, usize, usize),
    pub costs: Vec<f64>,
    pub final_cost: CostBreakdown,
    pub iterations: usize,
    pub termination: Termination,
}

/// Outcome of a registration run.
#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// dense field on the fixed image's grid at full resolution, mapping
    /// fixed-grid coordinates into the moving image (in finest-level voxels)
    pub field: DisplacementField,
    /// moving input warped by the final field
    pub warped: Volume3D,
    pub levels: Vec<LevelTrace>,
}

/// Backward-warp a volume: `out(x) = v(x + f(x))` with trilinear sampling.
pub fn warp_with_field(v: &Volume3D, f: &DisplacementField) -> Result<Volume3D> {
    if v.dims() != f.dims() {
        return Err(Error::DimMismatch(format!(
            "warp: volume {:?} vs field {:?}",
            v.dims(),
            f.dims()
        )));
    }
    let (nx, ny, nz) = v.dims();
    let mut out = v.clone();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let u = f.at(x, y, z);
                let p = [x as f64 + u[0], y as f64 + u[1], z as f64 + u[2]];
                out.set(x, y, z, v.trilinear_sample(p));
            }
        }
    }
    Ok(out)
}

/// Map landmark points through a displacement field: `p -> p + f(p)` with
/// trilinear (clamped) interpolation of the field.
pub fn transform_landmarks(points: &[[f64; 3]], f: &DisplacementField) -> Vec<[f64; 3]> {
    points
        .iter()
        .map(|p| {
            let u = f.sample(*p);
            [p[0] + u[0], p[1] + u[1], p[2] + u[2]]
        })
        .collect()
}

/// Register `moving` onto `fixed` with a coarse-to-fine free-form
/// deformation driven by the configured metric.
///
/// At each level a fresh identity grid is optimized on the accumulated
/// pre-warped moving image; the level's dense field is then composed into
/// the accumulator and the original (not the re-interpolated) moving image
/// is re-warped for the next level.
pub fn register(
    fixed: &Volume3D,
    moving: &Volume3D,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult> {
    let (fixed, moving) = if cfg.orientation.swap_inputs {
        (moving, fixed)
    } else {
        (fixed, moving)
    };

    let (lo_f, hi_f) = fixed.min_max();
    let (lo_m, hi_m) = moving.min_max();
    if hi_f <= lo_f || hi_m <= lo_m {
        return Err(Error::Degenerate("constant input image".into()));
    }

    let f_norm = fixed.normalize_intensity(cfg.bins.l_max, cfg.intensity_window);
    let m_norm = moving.normalize_intensity(cfg.bins.l_max, cfg.intensity_window);

    // pyramids, coarsest first
    let mut f_pyr = vec![f_norm];
    let mut m_pyr = vec![m_norm];
    for _ in 1..cfg.levels {
        let f = f_pyr.last().unwrap().gaussian_downsample()?;
        let m = m_pyr.last().unwrap().gaussian_downsample()?;
        f_pyr.push(f);
        m_pyr.push(m);
    }
    f_pyr.reverse();
    m_pyr.reverse();

    {
        let (cx, cy, cz) = f_pyr[0].dims();
        if cx.min(cy).min(cz) < 16 {
            return Err(Error::DimTooSmall(format!(
                "coarsest level {:?} needs at least 16 voxels per axis",
                f_pyr[0].dims()
            )));
        }
    }

    let mut accum = DisplacementField::zero(f_pyr[0].dims());
    let mut traces = Vec::with_capacity(cfg.levels);

    for level in 0..cfg.levels {
        let dims = f_pyr[level].dims();
        if level > 0 {
            accum = bspline::upsample_double(&accum, dims);
        }
        let pre_warped = warp_with_field(&m_pyr[level], &accum)?;

        let grid = FfdGrid::for_domain(dims, cfg.grid_spacing);
        let plan = EvalPlan {
            orientation: cfg.orientation,
            weight_kind: cfg.weight_kind,
            bins: cfg.bins,
            threads: cfg.threads,
            deterministic: cfg.deterministic,
            metric: cfg.metric,
        };
        let mut engine = Engine::new(
            plan,
            f_pyr[level].clone(),
            pre_warped,
            grid.clone(),
            cfg.penalty_weight,
        )?;

        let last_cost = std::cell::Cell::new(CostBreakdown::compose(0.0, 0.0, 0.0));
        let objective = |params: &[f64]| {
            let eval = engine.evaluate(params)?;
            last_cost.set(eval.cost);
            Ok((eval.cost.total, eval.gradient))
        };
        let lcfg = LbfgsConfig {
            max_iter: cfg.level_max_iter(level),
            ..cfg.optimizer.clone()
        };
        let mut observer = |info: &optimizer::IterationInfo| {
            let parts = last_cost.get();
            log::info!(
                "level {level} iter {:3}  cost {:.6e}  similarity {:.6e}  penalty {:.6e}  |g| {:.3e}  step {:.3e}",
                info.iteration,
                info.cost,
                parts.similarity,
                parts.penalty,
                info.gradient_norm,
                info.step_length,
            );
        };
        let result = optimizer::minimize(
            objective,
            &vec![0.0; 3 * grid.node_count()],
            &lcfg,
            Some(&mut observer),
        )?;

        let mut solved = grid.clone();
        solved.set_params(&result.x);
        let level_field = bspline::densify(&solved);
        accum = bspline::compose(&accum, &level_field)?;

        let final_cost = engine.evaluate_value(&result.x)?;
        traces.push(LevelTrace {
            dims,
            costs: result.cost_trace,
            final_cost,
            iterations: result.iterations,
            termination: result.termination,
        });
        log::info!(
            "level {level} done: {} after {} iterations, cost {:.6e}",
            result.termination.name(),
            result.iterations,
            result.cost
        );
    }

    let warped = warp_with_field(moving, &accum)?;
    Ok(RegistrationResult {
        field: accum,
        warped,
        levels: traces,
    })
}
