//! Damped Newton ascent for the penalized mode `x* = argmax f`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PrecisionPair;
use crate::linalg::{cholesky_jitter, symmetrize, Matrix, Vector};
use crate::model::{evaluate, gradient, hessian_traced, DerivMethod, Objective, PenalizedObjective};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub initial_damping: f64,
    pub armijo_c: f64,
    pub step_shrink: f64,
    /// Use the Gauss–Newton surrogate as the Newton matrix when available.
    pub gauss_newton: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { max_iterations: 200, gradient_tolerance: 1e-9, initial_damping: 1e-3, armijo_c: 1e-4, step_shrink: 0.5, gauss_newton: false }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iterations > 0
            && self.gradient_tolerance > 0.0
            && self.initial_damping > 0.0
            && self.armijo_c > 0.0
            && self.step_shrink > 0.0
            && self.step_shrink < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("solver options must be positive with step_shrink in (0, 1)".into()))
        }
    }
}

/// Outcome of an unconstrained ascent.
#[derive(Debug, Clone)]
pub struct AscentResult<T: Real> {
    pub x: Vector<T>,
    pub value: T,
    pub grad_norm: T,
    pub iterations: usize,
    pub converged: bool,
    /// `f` at every accepted iterate, starting with `x_init`.
    pub trace: Vec<T>,
}

/// Mode and curvature split at the mode.
#[derive(Debug, Clone)]
pub struct MapResult<T: Real> {
    pub x_star: Vector<T>,
    pub value: T,
    /// `D_G² = −∇²f(x*)`.
    pub neg_hessian: Matrix<T>,
    /// `D² = D_G² − G²`.
    pub likelihood_neg_hessian: Matrix<T>,
    pub grad_norm: T,
    pub iterations: usize,
    pub converged: bool,
    pub hessian_method: DerivMethod,
    pub trace: Vec<T>,
}

impl<T: Real> MapResult<T> {
    pub fn pair(&self) -> Result<PrecisionPair<T>> {
        PrecisionPair::new(self.likelihood_neg_hessian.clone(), self.neg_hessian.clone())
    }

    pub fn require_converged(&self) -> Result<()> {
        if self.converged {
            Ok(())
        } else {
            Err(Error::NotConverged { iterations: self.iterations, grad_norm: self.grad_norm.as_f64() })
        }
    }
}

fn newton_matrix<T: Real>(f: &(impl Objective<T> + ?Sized), x: &Vector<T>, gauss_newton: bool) -> Result<Matrix<T>> {
    if gauss_newton {
        if let Some(c) = f.gauss_newton_curvature(x) {
            return Ok(symmetrize(&c));
        }
    }
    Ok(-hessian_traced(f, x)?.value)
}

/// Damped Newton ascent with Armijo backtracking.
///
/// Solves `(−∇²f + μI) s = ∇f`; `μ` shrinks by 0.3 after an accepted step and
/// grows tenfold after a rejected one.
pub fn maximize<T: Real>(f: &(impl Objective<T> + ?Sized), x_init: &Vector<T>, opts: &SolverOptions) -> Result<AscentResult<T>> {
    opts.validate()?;
    let tol = T::lit(opts.gradient_tolerance);
    let mut x = x_init.clone();
    let mut fx = evaluate(f, &x)?;
    let mut g = gradient(f, &x)?;
    let mut mu = T::lit(opts.initial_damping);
    let mu_cap = T::lit(1e14);
    let mut trace = vec![fx];
    let mut iterations = 0;
    let p = x.len();
    while iterations < opts.max_iterations {
        if g.norm() <= tol {
            return Ok(AscentResult { grad_norm: g.norm(), x, value: fx, iterations, converged: true, trace });
        }
        iterations += 1;
        let h = newton_matrix(f, &x, opts.gauss_newton)?;
        let mut accepted = false;
        while mu <= mu_cap {
            let mut a = h.clone();
            for i in 0..p {
                a[(i, i)] += mu;
            }
            let Some(ch) = a.clone().cholesky() else {
                mu *= T::lit(10.0);
                continue;
            };
            let s = ch.solve(&g);
            let slope = g.dot(&s);
            let mut t = T::one();
            for _ in 0..40 {
                let xn = &x + &s * t;
                if let Ok(fnew) = evaluate(f, &xn) {
                    let armijo = fnew >= fx + T::lit(opts.armijo_c) * t * slope;
                    // near the optimum f stops resolving progress; fall back
                    // on the gradient norm
                    let flat = fnew >= fx - T::lit(1e-14) * (T::one() + fx.abs());
                    let gn = if armijo {
                        None
                    } else if flat {
                        gradient(f, &xn).ok()
                    } else {
                        None
                    };
                    let gradient_ok = gn.as_ref().is_some_and(|gn| gn.norm() < g.norm());
                    if armijo || gradient_ok {
                        let gn = match gn {
                            Some(v) => v,
                            None => gradient(f, &xn)?,
                        };
                        x = xn;
                        fx = fnew.max(fx);
                        g = gn;
                        accepted = true;
                        break;
                    }
                }
                t *= T::lit(opts.step_shrink);
            }
            if accepted {
                mu = (mu * T::lit(0.3)).max(T::lit(1e-12));
                break;
            }
            mu *= T::lit(10.0);
        }
        if !accepted {
            break;
        }
        trace.push(fx);
    }
    let converged = g.norm() <= tol;
    Ok(AscentResult { grad_norm: g.norm(), x, value: fx, iterations, converged, trace })
}

/// Mode of the penalized objective together with the curvature split
/// `D_G² = −∇²f(x*)`, `D² = D_G² − G²`.
pub fn find_map<T: Real, L: Objective<T>>(f: &PenalizedObjective<T, L>, x_init: &Vector<T>, opts: &SolverOptions) -> Result<MapResult<T>> {
    let run = maximize(f, x_init, opts)?;
    let h = hessian_traced(f, &run.x)?;
    let neg_hessian = symmetrize(&(-h.value));
    if run.converged && cholesky_jitter(&neg_hessian).is_err() {
        return Err(Error::IndefiniteAtOptimum);
    }
    let likelihood_neg_hessian = &neg_hessian - &f.penalty_precision;
    Ok(MapResult {
        x_star: run.x,
        value: run.value,
        neg_hessian,
        likelihood_neg_hessian,
        grad_norm: run.grad_norm,
        iterations: run.iterations,
        converged: run.converged,
        hessian_method: h.method,
        trace: run.trace,
    })
}
