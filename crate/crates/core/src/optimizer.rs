//! Nonlinear conjugate gradient minimizer.
//!
//! Polak-Ribiere directions with a restart to steepest descent, and a line
//! search that extrapolates with cubic fits, then interpolates (quadratic when
//! the far bracket point increased the energy, cubic otherwise) until the
//! strong Wolfe-Powell conditions hold. The control flow follows the classic
//! `minimize.m` conjugate gradient routine.

use crate::error::{Error, Result};
use crate::grid::{dot, ScalarGrid};

/// Interpolated points are kept at least this fraction of the bracket away
/// from its ends.
const INTERPOLATION_MARGIN: f64 = 0.1;
/// Upper bound on the growth of the initial step between line searches.
const MAX_STEP_RATIO: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct NcgConfig {
    pub max_line_searches: usize,
    /// Sufficient-decrease constant.
    pub wolfe_c1: f64,
    /// Curvature constant.
    pub wolfe_c2: f64,
    pub max_evals_per_search: usize,
    /// Stop once the gradient norm falls below this fraction of the initial
    /// gradient norm (or below the value itself when that norm is under 1).
    pub grad_tol: f64,
    /// Cap on extrapolation, as a multiple of the current step.
    pub max_extrapolation: f64,
    pub restart_on_nonnegative_beta: bool,
}

impl Default for NcgConfig {
    fn default() -> Self {
        Self {
            max_line_searches: 1000,
            wolfe_c1: 0.01,
            wolfe_c2: 0.5,
            max_evals_per_search: 20,
            grad_tol: 1e-9,
            max_extrapolation: 10.0,
            restart_on_nonnegative_beta: true,
        }
    }
}

impl NcgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.wolfe_c1 && self.wolfe_c1 < self.wolfe_c2 && self.wolfe_c2 < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "Wolfe constants need 0 < c1 < c2 < 1, got c1={} c2={}",
                self.wolfe_c1, self.wolfe_c2
            )));
        }
        if self.max_line_searches == 0 || self.max_evals_per_search == 0 {
            return Err(Error::InvalidConfig("line-search budgets must be positive".into()));
        }
        if !(self.grad_tol >= 0.0) || !(self.max_extrapolation > 1.0) {
            return Err(Error::InvalidConfig(
                "grad_tol must be >= 0 and max_extrapolation > 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Budget,
    GradientTolerance,
    LineSearchFailure,
}

/// One accepted line-search step: `x_next = x + step * direction`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: f64,
    pub energy_before: f64,
    pub energy_after: f64,
    /// Directional derivative at the start of the search.
    pub slope_before: f64,
    /// Directional derivative at the accepted point.
    pub slope_after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveTrace {
    /// Energy at the start followed by the energy after every accepted step.
    pub energies: Vec<f64>,
    pub steps: Vec<StepRecord>,
    pub line_searches_used: usize,
    pub evaluations: usize,
    pub terminated_by: Termination,
}

impl SolveTrace {
    pub fn initial_energy(&self) -> f64 {
        self.energies[0]
    }

    pub fn final_energy(&self) -> f64 {
        *self.energies.last().expect("trace has an initial energy")
    }
}

/// Something that can report its value and gradient at a point.
pub trait Objective {
    fn value_and_gradient(&mut self, x: &[f64]) -> (f64, Vec<f64>);
}

impl<F> Objective for F
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    fn value_and_gradient(&mut self, x: &[f64]) -> (f64, Vec<f64>) {
        self(x)
    }
}

fn axpy(x: &[f64], t: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(a, b)| a + t * b).collect()
}

fn is_bad(f: f64, g: &[f64]) -> bool {
    !f.is_finite() || g.iter().any(|v| !v.is_finite())
}

/// Minimizes `objective` starting from `x0`.
///
/// Returns the best point found. Fails only when the very first line search
/// cannot make progress from `x0`; a zero initial gradient is convergence.
pub fn minimize<O: Objective>(x0: &[f64], objective: &mut O, cfg: &NcgConfig) -> Result<(Vec<f64>, SolveTrace)> {
    cfg.validate()?;
    let (c1, c2) = (cfg.wolfe_c1, cfg.wolfe_c2);
    let mut x = x0.to_vec();
    let (mut f0, mut df0) = objective.value_and_gradient(&x);
    let mut evaluations = 1;
    if is_bad(f0, &df0) {
        return Err(Error::InvalidConfig("objective is not finite at the starting point".into()));
    }
    let mut trace = SolveTrace {
        energies: vec![f0],
        steps: Vec::new(),
        line_searches_used: 0,
        evaluations,
        terminated_by: Termination::Budget,
    };
    let g0_norm = dot(&df0, &df0).sqrt();
    let tolerance = cfg.grad_tol * g0_norm.max(1.0);
    if g0_norm <= tolerance {
        trace.terminated_by = Termination::GradientTolerance;
        return Ok((x, trace));
    }

    let mut s: Vec<f64> = df0.iter().map(|v| -v).collect();
    let mut d0 = -dot(&s, &s);
    let mut x3 = 1.0 / (1.0 + g0_norm);
    let mut ls_failed = false;

    while trace.line_searches_used < cfg.max_line_searches {
        trace.line_searches_used += 1;
        // best point seen during this search, used if the search fails
        let (mut best_x, mut best_f, mut best_df) = (x.clone(), f0, df0.clone());
        let mut budget = cfg.max_evals_per_search;

        let (mut x2, mut f2, mut d2);
        let (mut f3, mut df3, mut d3);
        let (mut x4, mut f4, mut d4) = (0.0, 0.0, 0.0);
        let mut have_upper = false;

        // extrapolation
        loop {
            x2 = 0.0;
            f2 = f0;
            d2 = d0;
            f3 = f0;
            df3 = df0.clone();
            let mut success = false;
            while !success && budget > 0 {
                budget -= 1;
                let (f, df) = objective.value_and_gradient(&axpy(&x, x3, &s));
                evaluations += 1;
                if is_bad(f, &df) {
                    x3 = 0.5 * (x2 + x3);
                } else {
                    f3 = f;
                    df3 = df;
                    success = true;
                }
            }
            if f3 < best_f {
                best_x = axpy(&x, x3, &s);
                best_f = f3;
                best_df = df3.clone();
            }
            d3 = dot(&df3, &s);
            if d3 > c2 * d0 || f3 > f0 + x3 * c1 * d0 || budget == 0 {
                break;
            }
            let (x1, f1, d1) = (x2, f2, d2);
            x2 = x3;
            f2 = f3;
            d2 = d3;
            // cubic extrapolation
            let a = 6.0 * (f1 - f2) + 3.0 * (d2 + d1) * (x2 - x1);
            let b = 3.0 * (f2 - f1) - (2.0 * d1 + d2) * (x2 - x1);
            let disc = b * b - a * d1 * (x2 - x1);
            let cand = x1 - d1 * (x2 - x1).powi(2) / (b + disc.sqrt());
            x3 = if !cand.is_finite() || disc < 0.0 || cand < 0.0 || cand > x2 * cfg.max_extrapolation {
                x2 * cfg.max_extrapolation
            } else if cand < x2 + INTERPOLATION_MARGIN * (x2 - x1) {
                x2 + INTERPOLATION_MARGIN * (x2 - x1)
            } else {
                cand
            };
        }

        // interpolation
        while (d3.abs() > -c2 * d0 || f3 > f0 + x3 * c1 * d0) && budget > 0 {
            if d3 > 0.0 || f3 > f0 + x3 * c1 * d0 {
                x4 = x3;
                f4 = f3;
                d4 = d3;
                have_upper = true;
            } else {
                x2 = x3;
                f2 = f3;
                d2 = d3;
            }
            debug_assert!(have_upper);
            let cand = if f4 > f0 {
                // quadratic fit through (x2, f2, d2) and f4
                x2 - (0.5 * d2 * (x4 - x2).powi(2)) / (f4 - f2 - d2 * (x4 - x2))
            } else {
                let a = 6.0 * (f2 - f4) / (x4 - x2) + 3.0 * (d4 + d2);
                let b = 3.0 * (f4 - f2) - (2.0 * d2 + d4) * (x4 - x2);
                let disc = b * b - a * d2 * (x4 - x2).powi(2);
                if disc < 0.0 {
                    f64::NAN
                } else {
                    x2 + (disc.sqrt() - b) / a
                }
            };
            let cand = if cand.is_finite() { cand } else { 0.5 * (x2 + x4) };
            x3 = cand
                .min(x4 - INTERPOLATION_MARGIN * (x4 - x2))
                .max(x2 + INTERPOLATION_MARGIN * (x4 - x2));
            let (f, df) = objective.value_and_gradient(&axpy(&x, x3, &s));
            evaluations += 1;
            budget -= 1;
            if is_bad(f, &df) {
                // treat as an energy increase so the bracket shrinks
                f3 = f64::INFINITY;
                d3 = f64::INFINITY;
                continue;
            }
            f3 = f;
            df3 = df;
            if f3 < best_f {
                best_x = axpy(&x, x3, &s);
                best_f = f3;
                best_df = df3.clone();
            }
            d3 = dot(&df3, &s);
        }

        if d3.abs() <= -c2 * d0 && f3 <= f0 + x3 * c1 * d0 && f3 < f0 {
            // accepted
            x = axpy(&x, x3, &s);
            trace.steps.push(StepRecord {
                step: x3,
                energy_before: f0,
                energy_after: f3,
                slope_before: d0,
                slope_after: d3,
            });
            f0 = f3;
            trace.energies.push(f0);
            let gg_new = dot(&df3, &df3);
            let beta = (gg_new - dot(&df0, &df3)) / dot(&df0, &df0);
            let beta = if cfg.restart_on_nonnegative_beta { beta.max(0.0) } else { beta };
            s = s.iter().zip(&df3).map(|(si, gi)| beta * si - gi).collect();
            df0 = df3;
            let d_prev = d0;
            d0 = dot(&df0, &s);
            if d0 >= 0.0 {
                s = df0.iter().map(|v| -v).collect();
                d0 = -dot(&s, &s);
            }
            x3 *= MAX_STEP_RATIO.min(d_prev / (d0 - f64::MIN_POSITIVE));
            ls_failed = false;
            if gg_new.sqrt() <= tolerance {
                trace.terminated_by = Termination::GradientTolerance;
                break;
            }
        } else {
            // restore the best point and retry once along steepest descent
            let improved = best_f < f0;
            if improved {
                let before = f0;
                x = best_x;
                f0 = best_f;
                df0 = best_df;
                trace.energies.push(f0);
                trace.steps.push(StepRecord {
                    step: f64::NAN,
                    energy_before: before,
                    energy_after: f0,
                    slope_before: d0,
                    slope_after: f64::NAN,
                });
            }
            if ls_failed || trace.line_searches_used >= cfg.max_line_searches {
                trace.terminated_by = Termination::LineSearchFailure;
                break;
            }
            s = df0.iter().map(|v| -v).collect();
            d0 = -dot(&s, &s);
            x3 = 1.0 / (1.0 - d0);
            ls_failed = true;
        }
    }

    trace.evaluations = evaluations;
    if trace.terminated_by == Termination::LineSearchFailure && trace.energies.len() == 1 {
        return Err(Error::LineSearchFailed { level: None });
    }
    Ok((x, trace))
}

/// [`minimize`] over the samples of a grid.
pub fn minimize_grid<O: Objective>(x0: &ScalarGrid, objective: &mut O, cfg: &NcgConfig) -> Result<(ScalarGrid, SolveTrace)> {
    let (x, trace) = minimize(x0.data(), objective, cfg)?;
    Ok((ScalarGrid::new(x0.height(), x0.width(), x)?, trace))
}
