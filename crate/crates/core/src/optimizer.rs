//! Limited-memory BFGS minimization with a strong-Wolfe backtracking line
//! search and a trailing-window stability stop.

use crate::error::{Error, Result};
use std::collections::VecDeque;

/// Optimizer settings. The stability stop triggers once the relative spread
/// of the cost over the trailing `stability_window` iterations falls below
/// `stability_rel_tol`.
#[derive(Debug, Clone)]
pub struct LbfgsConfig {
    /// number of stored curvature pairs
    pub history_size: usize,
    pub max_iter: usize,
    pub wolfe_c1: f64,
    pub wolfe_c2: f64,
    pub stability_window: usize,
    pub stability_rel_tol: f64,
    pub max_line_search_steps: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            history_size: 5,
            max_iter: 200,
            wolfe_c1: 1e-4,
            wolfe_c2: 0.9,
            stability_window: 20,
            stability_rel_tol: 1e-5,
            max_line_search_steps: 20,
        }
    }
}

/// Why the optimizer stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    MaxIterations,
    /// cost stable over the trailing window
    Stable,
    /// the line search could not make progress; best iterate returned
    LineSearchFailed,
    /// gradient numerically zero at the current iterate
    StationaryPoint,
}

impl Termination {
    pub fn name(&self) -> &'static str {
        match self {
            Termination::MaxIterations => "max-iterations",
            Termination::Stable => "stable",
            Termination::LineSearchFailed => "line-search-failed",
            Termination::StationaryPoint => "stationary-point",
        }
    }
}

/// Snapshot passed to the per-iteration observer.
#[derive(Debug, Clone, Copy)]
pub struct IterationInfo {
    pub iteration: usize,
    pub cost: f64,
    pub gradient_norm: f64,
    pub step_length: f64,
}

/// Minimization outcome.
#[derive(Debug, Clone)]
pub struct MinimizeResult {
    pub x: Vec<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub cost_trace: Vec<f64>,
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimize `objective` starting from `x0` with L-BFGS.
///
/// The objective must be deterministic and return finite cost and gradient;
/// non-finite values abort with an error. Accepted steps satisfy the strong
/// Wolfe conditions, so every accepted step strictly decreases the cost, and
/// curvature pairs with non-positive `y.s` are discarded to keep the implicit
/// Hessian approximation positive definite.
pub fn minimize<F>(
    mut objective: F,
    x0: &[f64],
    cfg: &LbfgsConfig,
    mut observer: Option<&mut dyn FnMut(&IterationInfo)>,
) -> Result<MinimizeResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    assert!(cfg.history_size >= 1);
    assert!(0.0 < cfg.wolfe_c1 && cfg.wolfe_c1 < cfg.wolfe_c2 && cfg.wolfe_c2 < 1.0);

    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut f, mut g) = objective(&x)?;
    check_finite(f, &g)?;
    let mut pairs: VecDeque<Pair> = VecDeque::with_capacity(cfg.history_size);
    let mut trace = vec![f];
    let mut gamma = 1.0;

    for iter in 0..cfg.max_iter {
        let gnorm = norm(&g);
        if gnorm < 1e-15 * (1.0 + f.abs()) {
            return Ok(MinimizeResult {
                x,
                cost: f,
                iterations: iter,
                termination: Termination::StationaryPoint,
                cost_trace: trace,
            });
        }

        // two-loop recursion for d = -H g
        let mut d = g.clone();
        let mut alphas = Vec::with_capacity(pairs.len());
        for p in pairs.iter().rev() {
            let a = p.rho * dot(&p.s, &d);
            for (di, yi) in d.iter_mut().zip(&p.y) {
                *di -= a * yi;
            }
            alphas.push(a);
        }
        for di in d.iter_mut() {
            *di *= gamma;
        }
        for (p, &a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = p.rho * dot(&p.y, &d);
            for (di, si) in d.iter_mut().zip(&p.s) {
                *di += (a - b) * si;
            }
        }
        for di in d.iter_mut() {
            *di = -*di;
        }

        let mut dg = dot(&d, &g);
        if dg >= 0.0 {
            // not a descent direction (stale curvature); fall back to steepest
            d = g.iter().map(|v| -v).collect();
            dg = -gnorm * gnorm;
            pairs.clear();
            gamma = 1.0;
        }

        // first iteration: scale the step to unit gradient length
        let alpha0 = if pairs.is_empty() && iter == 0 {
            (1.0 / gnorm).min(1.0e10)
        } else {
            1.0
        };

        match line_search(&mut objective, &x, f, &d, dg, alpha0, cfg)? {
            Some(ls) if ls.f < f => {
                let step: Vec<f64> = d.iter().map(|v| v * ls.alpha).collect();
                let y: Vec<f64> = ls.g.iter().zip(&g).map(|(a, b)| a - b).collect();
                let ys = dot(&y, &step);
                if ys > 1e-10 * norm(&y) * norm(&step) {
                    let rho = 1.0 / ys;
                    gamma = ys / dot(&y, &y);
                    if pairs.len() == cfg.history_size {
                        pairs.pop_front();
                    }
                    pairs.push_back(Pair { s: step.clone(), y, rho });
                }
                for (xi, si) in x.iter_mut().zip(&step) {
                    *xi += si;
                }
                f = ls.f;
                g = ls.g;
                trace.push(f);
                if let Some(obs) = observer.as_deref_mut() {
                    obs(&IterationInfo {
                        iteration: iter + 1,
                        cost: f,
                        gradient_norm: norm(&g),
                        step_length: ls.alpha,
                    });
                }
                if stable(&trace, cfg) {
                    return Ok(MinimizeResult {
                        x,
                        cost: f,
                        iterations: iter + 1,
                        termination: Termination::Stable,
                        cost_trace: trace,
                    });
                }
            }
            // no strict progress (or no acceptable step at all)
            _ => {
                return Ok(MinimizeResult {
                    x,
                    cost: f,
                    iterations: iter,
                    termination: Termination::LineSearchFailed,
                    cost_trace: trace,
                });
            }
        }
        let _ = n;
    }

    Ok(MinimizeResult {
        x,
        cost: f,
        iterations: cfg.max_iter,
        termination: Termination::MaxIterations,
        cost_trace: trace,
    })
}

fn check_finite(f: f64, g: &[f64]) -> Result<()> {
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Optimization(
            "objective returned non-finite cost or gradient".into(),
        ));
    }
    Ok(())
}

struct LineSearchHit {
    alpha: f64,
    f: f64,
    g: Vec<f64>,
}

/// Strong-Wolfe line search: expand/backtrack to bracket an acceptable step,
/// then bisect (zoom) until both conditions hold or the step budget runs out.
fn line_search<F>(
    objective: &mut F,
    x: &[f64],
    f0: f64,
    d: &[f64],
    dg0: f64,
    alpha0: f64,
    cfg: &LbfgsConfig,
) -> Result<Option<LineSearchHit>>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let c1 = cfg.wolfe_c1;
    let c2 = cfg.wolfe_c2;
    let mut probe = |alpha: f64| -> Result<(f64, Vec<f64>, f64)> {
        let xt: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + alpha * di).collect();
        let (f, g) = objective(&xt)?;
        check_finite(f, &g)?;
        let dg = dot(&g, d);
        Ok((f, g, dg))
    };

    let mut alpha_prev = 0.0;
    let mut f_prev = f0;
    let mut dg_prev = dg0;
    let mut alpha = alpha0;
    let mut lo: Option<(f64, f64, f64)> = None; // (alpha, f, dg)
    let mut hi: Option<(f64, f64, f64)> = None;

    for i in 0..cfg.max_line_search_steps {
        let (f, g, dg) = probe(alpha)?;
        if f > f0 + c1 * alpha * dg0 || (i > 0 && f >= f_prev) {
            lo = Some((alpha_prev, f_prev, dg_prev));
            hi = Some((alpha, f, dg));
            break;
        }
        if dg.abs() <= -c2 * dg0 {
            return Ok(Some(LineSearchHit { alpha, f, g }));
        }
        if dg >= 0.0 {
            lo = Some((alpha, f, dg));
            hi = Some((alpha_prev, f_prev, dg_prev));
            break;
        }
        alpha_prev = alpha;
        f_prev = f;
        dg_prev = dg;
        alpha *= 2.0;
    }

    let (Some(mut lo), Some(mut hi)) = (lo, hi) else {
        return Ok(None);
    };

    for _ in 0..cfg.max_line_search_steps {
        let alpha = 0.5 * (lo.0 + hi.0);
        if (hi.0 - lo.0).abs() < 1e-16 * (1.0 + lo.0.abs()) {
            break;
        }
        let (f, g, dg) = probe(alpha)?;
        if f > f0 + c1 * alpha * dg0 || f >= lo.1 {
            hi = (alpha, f, dg);
        } else {
            if dg.abs() <= -c2 * dg0 {
                return Ok(Some(LineSearchHit { alpha, f, g }));
            }
            if dg * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
            }
            lo = (alpha, f, dg);
        }
    }

    // accept the best sufficient-decrease point found, if any
    if lo.0 > 0.0 && lo.1 < f0 {
        let (f, g, _) = probe(lo.0)?;
        return Ok(Some(LineSearchHit { alpha: lo.0, f, g }));
    }
    Ok(None)
}

fn stable(trace: &[f64], cfg: &LbfgsConfig) -> bool {
    if trace.len() < cfg.stability_window {
        return false;
    }
    let tail = &trace[trace.len() - cfg.stability_window..];
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in tail {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let best = trace.iter().cloned().fold(f64::INFINITY, f64::min);
    (hi - lo) / best.abs().max(1e-12) < cfg.stability_rel_tol
}
