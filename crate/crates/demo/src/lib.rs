//! Browser demo built with wasm-bindgen: generate a synthetic warped pair,
//! watch the registration recover the hidden deformation step by step, and
//! invert the recovered field. The page in `www/` drives three operations:
//! pair generation, incremental registration, and field inversion.
//!
//! Everything here is plain data in and out (RGBA slices, scalar metrics);
//! the JavaScript side only draws.

use srwcr_core::bspline::{self, DisplacementField, FfdGrid};
use srwcr_core::engine::{Engine, EvalPlan};
use srwcr_core::eval::{generate_synthetic, rmse_displacement, PatternKind, SynthParams};
use srwcr_core::optimizer::{minimize, LbfgsConfig};
use srwcr_core::pipeline::warp_with_field;
use srwcr_core::volume::Volume3D;
use wasm_bindgen::prelude::*;

const L_MAX: f64 = 31.0;

/// Map one z-slice of a volume to grayscale RGBA (values `[0, 31]`).
fn slice_rgba(v: &Volume3D, z: usize) -> Vec<u8> {
    let (nx, ny, _) = v.dims();
    let mut out = Vec::with_capacity(nx * ny * 4);
    for y in 0..ny {
        for x in 0..nx {
            let g = (v.at(x, y, z) / L_MAX * 255.0).clamp(0.0, 255.0) as u8;
            out.extend_from_slice(&[g, g, g, 255]);
        }
    }
    out
}

/// Signed-difference slice: blue = negative, red = positive.
fn diff_rgba(a: &Volume3D, b: &Volume3D, z: usize) -> Vec<u8> {
    let (nx, ny, _) = a.dims();
    let mut out = Vec::with_capacity(nx * ny * 4);
    for y in 0..ny {
        for x in 0..nx {
            let d = (a.at(x, y, z) - b.at(x, y, z)) / L_MAX;
            let pos = (d.max(0.0) * 4.0 * 255.0).min(255.0) as u8;
            let neg = ((-d).max(0.0) * 4.0 * 255.0).min(255.0) as u8;
            out.extend_from_slice(&[pos, 24, neg, 255]);
        }
    }
    out
}

/// Field-magnitude slice with a dark-to-yellow ramp; `scale` is the value
/// mapped to full brightness.
fn field_rgba(f: &DisplacementField, z: usize, scale: f64) -> Vec<u8> {
    let (nx, ny, _) = f.dims();
    let mut out = Vec::with_capacity(nx * ny * 4);
    for y in 0..ny {
        for x in 0..nx {
            let u = f.at(x, y, z);
            let m = ((u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt() / scale).min(1.0);
            let r = (m * 255.0) as u8;
            let g = (m * m * 230.0) as u8;
            out.extend_from_slice(&[r, g, 32, 255]);
        }
    }
    out
}

/// One interactive registration session over a generated synthetic pair.
///
/// Registration runs as two stages (half resolution, then full resolution)
/// so the binary pattern picks up a gradient from the smoothed coarse level;
/// each [`DemoSession::step`] call advances a few optimizer iterations.
#[wasm_bindgen]
pub struct DemoSession {
    dims: (usize, usize, usize),
    pair_original: Volume3D,
    pair_warped: Volume3D,
    ground_truth: DisplacementField,
    initial_rmse: f64,

    // stage machinery
    coarse_fixed: Volume3D,
    coarse_moving: Volume3D,
    stage: u32,
    iterations: usize,
    params: Vec<f64>,
    grid: FfdGrid,
    accum: DisplacementField,
    engine: Option<Box<Engine>>,
    cost: f64,
    current_rmse: f64,
    warped_now: Volume3D,
    recovered: DisplacementField,
}

impl DemoSession {
    fn make_engine(&mut self) {
        let (fixed, moving, dims) = if self.stage == 0 {
            (
                self.coarse_fixed.clone(),
                self.coarse_moving.clone(),
                self.coarse_fixed.dims(),
            )
        } else {
            (self.pair_warped.clone(), self.pair_original.clone(), self.dims)
        };
        let pre = warp_with_field(&moving, &self.accum).expect("dims match");
        let grid = FfdGrid::for_domain(dims, (5.0, 5.0, 5.0));
        self.params = vec![0.0; 3 * grid.node_count()];
        self.engine = Some(Box::new(
            Engine::new(EvalPlan::default(), fixed, pre, grid.clone(), 0.1).expect("engine"),
        ));
        self.grid = grid;
    }

    fn refresh_outputs(&mut self) {
        let mut solved = self.grid.clone();
        solved.set_params(&self.params);
        let level_field = bspline::densify(&solved);
        let mut total = bspline::compose(&self.accum, &level_field).expect("dims match");
        if self.stage == 0 {
            total = bspline::upsample_double(&total, self.dims);
        }
        self.current_rmse = rmse_displacement(&total, &self.ground_truth).unwrap_or(f64::NAN);
        self.warped_now = warp_with_field(&self.pair_original, &total).expect("dims match");
        self.recovered = total;
    }
}

#[wasm_bindgen]
impl DemoSession {
    /// Generate a new synthetic pair. `size` is the cube edge (32-64 is
    /// comfortable in a browser), `amplitude` the hidden warp strength in
    /// voxels.
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, amplitude: f64, seed: u64) -> Result<DemoSession, JsValue> {
        let size = size.clamp(32, 96);
        let dims = (size, size, size);
        let pair = generate_synthetic(&SynthParams {
            dims,
            amplitude,
            warp_spacing: 16.0,
            period: 16,
            pattern: PatternKind::Checkerboard,
            seed,
            ..SynthParams::default()
        })
        .map_err(|e| JsValue::from_str(&e.to_string()))?;
        let zero = DisplacementField::zero(dims);
        let initial_rmse = rmse_displacement(&zero, &pair.ground_truth)
            .map_err(|e| JsValue::from_str(&e.to_string()))?;
        let coarse_fixed = pair
            .warped
            .gaussian_downsample()
            .map_err(|e| JsValue::from_str(&e.to_string()))?;
        let coarse_moving = pair
            .original
            .gaussian_downsample()
            .map_err(|e| JsValue::from_str(&e.to_string()))?;
        let mut s = DemoSession {
            dims,
            warped_now: pair.original.clone(),
            recovered: DisplacementField::zero(dims),
            pair_original: pair.original,
            pair_warped: pair.warped,
            ground_truth: pair.ground_truth,
            initial_rmse,
            coarse_fixed,
            coarse_moving,
            stage: 0,
            iterations: 0,
            params: Vec::new(),
            grid: FfdGrid::for_domain(dims, (5.0, 5.0, 5.0)),
            accum: DisplacementField::zero(dims),
            engine: None,
            cost: f64::NAN,
            current_rmse: initial_rmse,
        };
        s.accum = DisplacementField::zero(s.coarse_fixed.dims());
        s.make_engine();
        Ok(s)
    }

    /// Advance up to `iters` optimizer iterations; returns the number
    /// actually taken (0 once both stages have used their budgets).
    pub fn step(&mut self, iters: usize) -> Result<usize, JsValue> {
        let budget = [40usize, 80][self.stage.min(1) as usize];
        let remaining = budget.saturating_sub(self.iterations);
        if remaining == 0 {
            if self.stage == 0 {
                // finish the coarse stage: fold its field into the
                // accumulator at full resolution and restart on full res
                let mut solved = self.grid.clone();
                solved.set_params(&self.params);
                let coarse_total = bspline::compose(&self.accum, &bspline::densify(&solved))
                    .map_err(|e| JsValue::from_str(&e.to_string()))?;
                self.accum = bspline::upsample_double(&coarse_total, self.dims);
                self.stage = 1;
                self.iterations = 0;
                self.make_engine();
                return self.step(iters);
            }
            return Ok(0);
        }
        let cfg = LbfgsConfig {
            max_iter: iters.min(remaining).max(1),
            ..LbfgsConfig::default()
        };
        let result = {
            let engine = self.engine.as_mut().expect("engine");
            let objective = |p: &[f64]| {
                let e = engine.evaluate(p)?;
                Ok((e.cost.total, e.gradient))
            };
            minimize(objective, &self.params, &cfg, None)
                .map_err(|e| JsValue::from_str(&e.to_string()))?
        };
        let taken = result.iterations;
        self.params = result.x;
        self.cost = result.cost;
        self.iterations += taken.max(1);
        self.refresh_outputs();
        Ok(taken)
    }

    /// Invert the currently recovered field and return the mean residual of
    /// composing the inverse with it, in voxels.
    pub fn invert_residual(&self) -> f64 {
        let inv = bspline::invert_field(&self.recovered, 1.0);
        match bspline::compose(&inv, &self.recovered) {
            Ok(r) => r.mean_norm(),
            Err(_) => f64::NAN,
        }
    }

    pub fn size(&self) -> usize {
        self.dims.0
    }

    pub fn initial_rmse(&self) -> f64 {
        self.initial_rmse
    }

    pub fn current_rmse(&self) -> f64 {
        self.current_rmse
    }

    pub fn cost(&self) -> f64 {
        self.cost
    }

    pub fn stage(&self) -> u32 {
        self.stage
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// RGBA slice (4 * size^2 bytes) at depth `z`.
    /// `which`: 0 = original, 1 = warped target, 2 = current registration,
    /// 3 = difference to the target, 4 = recovered field magnitude,
    /// 5 = hidden (ground-truth) field magnitude.
    pub fn slice(&self, which: u32, z: usize) -> Vec<u8> {
        let z = z.min(self.dims.2 - 1);
        match which {
            0 => slice_rgba(&self.pair_original, z),
            1 => slice_rgba(&self.pair_warped, z),
            2 => slice_rgba(&self.warped_now, z),
            3 => diff_rgba(&self.pair_warped, &self.warped_now, z),
            4 => field_rgba(&self.recovered, z, 8.0),
            _ => field_rgba(&self.ground_truth, z, 8.0),
        }
    }
}
