//! Limited-memory BFGS with backtracking Armijo line search.
//!
//! Objectives may be nonsmooth when the caller supplies a subgradient
//! (the ℓ1 terms use `sign(0) = 0`). In that regime the curvature pairs are
//! only approximate, so the solver falls back to steepest descent whenever
//! the quasi-Newton direction stops being a descent direction, and reports
//! [`Termination::LineSearchFailed`] when even that fails.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub history_size: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            gradient_tolerance: 1e-8,
            history_size: 10,
        }
    }
}

impl SolverOptions {
    pub fn with_max_iterations(mut self, max_iterations: usize) -> Self {
        self.max_iterations = max_iterations;
        self
    }

    pub fn with_gradient_tolerance(mut self, tol: f64) -> Self {
        self.gradient_tolerance = tol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if !(self.gradient_tolerance > 0.0) {
            return Err(Error::Config("gradient_tolerance must be positive".into()));
        }
        if !(3..=50).contains(&self.history_size) {
            return Err(Error::Config(format!(
                "history_size {} outside [3, 50]",
                self.history_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Converged,
    MaxIterations,
    /// No step satisfying the sufficient-decrease condition was found, even
    /// along steepest descent. The best iterate is returned.
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient_inf_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

impl Minimum {
    pub fn is_degraded(&self) -> bool {
        self.termination == Termination::LineSearchFailed
    }
}

/// Objective oracle: writes the (sub)gradient into `grad` and returns the
/// value. `+∞` marks a point outside the objective's numeric range and makes
/// the line search shrink the step; NaN is an error.
pub trait Objective {
    fn evaluate(&mut self, x: &[f64], grad: &mut [f64]) -> f64;
}

impl<F> Objective for F
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    fn evaluate(&mut self, x: &[f64], grad: &mut [f64]) -> f64 {
        self(x, grad)
    }
}

struct CurvaturePair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn check_nan(value: f64, grad: &[f64], x: &[f64]) -> Result<()> {
    let bad_grad = value.is_finite() && grad.iter().any(|g| !g.is_finite());
    if value.is_nan() || bad_grad {
        return Err(Error::Numeric(format!(
            "objective returned NaN at iterate {x:?}"
        )));
    }
    Ok(())
}

/// Two-loop recursion: returns `-H g`.
fn search_direction(history: &VecDeque<CurvaturePair>, grad: &[f64]) -> Vec<f64> {
    let mut q: Vec<f64> = grad.iter().map(|g| -g).collect();
    let mut alphas = Vec::with_capacity(history.len());
    for pair in history.iter().rev() {
        let a = pair.rho * dot(&pair.s, &q);
        for (qi, yi) in q.iter_mut().zip(&pair.y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some(last) = history.back() {
        let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
        q.iter_mut().for_each(|qi| *qi *= gamma);
    }
    for (pair, a) in history.iter().zip(alphas.iter().rev()) {
        let b = pair.rho * dot(&pair.y, &q);
        for (qi, si) in q.iter_mut().zip(&pair.s) {
            *qi += (a - b) * si;
        }
    }
    q
}

fn l1_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v.abs()).sum()
}

/// Minimal-norm subgradient of `f + λ‖x‖₁` given `∇f`.
fn pseudo_gradient(x: &[f64], grad: &[f64], lambda: f64, out: &mut [f64]) {
    for ((p, &xi), &gi) in out.iter_mut().zip(x).zip(grad) {
        *p = if xi > 0.0 {
            gi + lambda
        } else if xi < 0.0 {
            gi - lambda
        } else if gi + lambda < 0.0 {
            gi + lambda
        } else if gi - lambda > 0.0 {
            gi - lambda
        } else {
            0.0
        };
    }
}

/// Plain L-BFGS. The objective may be nonsmooth if it returns a subgradient.
pub fn lbfgs_minimize<O: Objective>(
    objective: &mut O,
    x0: Vec<f64>,
    opts: &SolverOptions,
) -> Result<Minimum> {
    minimize(objective, x0, None, opts)
}

/// Orthant-wise L-BFGS for `f(x) + λ‖x‖₁`, where `objective` supplies the
/// smooth part `f` only.
///
/// Steps are projected onto the orthant of the current iterate (or of the
/// negative pseudo-gradient for zero coordinates), so coordinates reach
/// exactly zero instead of oscillating around it. The reported value and
/// gradient norm include the ℓ1 term.
pub fn lbfgs_minimize_l1<O: Objective>(
    objective: &mut O,
    x0: Vec<f64>,
    lambda: f64,
    opts: &SolverOptions,
) -> Result<Minimum> {
    minimize(objective, x0, Some(lambda), opts)
}

fn minimize<O: Objective>(
    objective: &mut O,
    x0: Vec<f64>,
    l1: Option<f64>,
    opts: &SolverOptions,
) -> Result<Minimum> {
    opts.validate()?;
    if let Some(lambda) = l1 {
        if !(lambda >= 0.0) {
            return Err(Error::Config(format!(
                "l1 weight must be nonnegative, got {lambda}"
            )));
        }
    }
    let lambda = l1.unwrap_or(0.0);
    let n = x0.len();
    let mut x = x0;
    let mut grad = vec![0.0; n];
    let smooth = objective.evaluate(&x, &mut grad);
    let mut evaluations = 1;
    check_nan(smooth, &grad, &x)?;
    if !smooth.is_finite() {
        return Err(Error::NumericRange(
            "objective is not finite at the starting point".into(),
        ));
    }
    let mut value = smooth + lambda * l1_norm(&x);
    // Steepest-descent direction reference: the gradient itself, or the
    // pseudo-gradient under an ℓ1 term.
    let mut pg = grad.clone();
    if l1.is_some() {
        pseudo_gradient(&x, &grad, lambda, &mut pg);
    }

    let mut history: VecDeque<CurvaturePair> = VecDeque::with_capacity(opts.history_size);
    let mut trial = vec![0.0; n];
    let mut trial_grad = vec![0.0; n];
    let mut orthant = vec![0.0; n];

    for iteration in 0..opts.max_iterations {
        let gnorm = inf_norm(&pg);
        if gnorm <= opts.gradient_tolerance {
            return Ok(Minimum {
                x,
                value,
                gradient_inf_norm: gnorm,
                iterations: iteration,
                evaluations,
                termination: Termination::Converged,
            });
        }
        if l1.is_some() {
            for ((o, &xi), &p) in orthant.iter_mut().zip(&x).zip(&pg) {
                *o = if xi != 0.0 {
                    xi.signum()
                } else if p != 0.0 {
                    -p.signum()
                } else {
                    0.0
                };
            }
        }

        let mut accepted = false;
        let mut accepted_value = value;
        // At most two attempts: quasi-Newton direction, then steepest descent.
        for _attempt in 0..2 {
            let mut direction = search_direction(&history, &pg);
            if l1.is_some() {
                for (d, &p) in direction.iter_mut().zip(&pg) {
                    if *d * p >= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let slope = dot(&direction, &pg);
            if !(slope < 0.0) || !slope.is_finite() {
                history.clear();
                direction = pg.iter().map(|p| -p).collect();
            }
            let mut step = if history.is_empty() {
                (1.0 / gnorm).min(1.0)
            } else {
                1.0
            };
            for _ in 0..MAX_BACKTRACKS {
                for ((t, xi), di) in trial.iter_mut().zip(&x).zip(&direction) {
                    *t = xi + step * di;
                }
                if l1.is_some() {
                    for (t, &o) in trial.iter_mut().zip(&orthant) {
                        if *t * o <= 0.0 {
                            *t = 0.0;
                        }
                    }
                }
                let trial_smooth = objective.evaluate(&trial, &mut trial_grad);
                evaluations += 1;
                check_nan(trial_smooth, &trial_grad, &trial)?;
                let trial_value = trial_smooth + lambda * l1_norm(&trial);
                let decrease: f64 = pg
                    .iter()
                    .zip(trial.iter().zip(&x))
                    .map(|(p, (t, xi))| p * (t - xi))
                    .sum();
                if trial_value.is_finite() && trial_value <= value + ARMIJO_C1 * decrease {
                    accepted = true;
                    accepted_value = trial_value;
                    break;
                }
                step *= 0.5;
            }
            if accepted || history.is_empty() {
                break;
            }
            history.clear();
        }

        if !accepted {
            return Ok(Minimum {
                x,
                value,
                gradient_inf_norm: gnorm,
                iterations: iteration,
                evaluations,
                termination: Termination::LineSearchFailed,
            });
        }

        let s: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = trial_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > f64::EPSILON * dot(&y, &y) && sy > 0.0 {
            if history.len() == opts.history_size {
                history.pop_front();
            }
            history.push_back(CurvaturePair {
                s,
                y,
                rho: 1.0 / sy,
            });
        }
        std::mem::swap(&mut x, &mut trial);
        std::mem::swap(&mut grad, &mut trial_grad);
        value = accepted_value;
        if l1.is_some() {
            pseudo_gradient(&x, &grad, lambda, &mut pg);
        } else {
            pg.copy_from_slice(&grad);
        }
    }

    let gnorm = inf_norm(&pg);
    Ok(Minimum {
        x,
        value,
        gradient_inf_norm: gnorm,
        iterations: opts.max_iterations,
        evaluations,
        termination: if gnorm <= opts.gradient_tolerance {
            Termination::Converged
        } else {
            Termination::MaxIterations
        },
    })
}
