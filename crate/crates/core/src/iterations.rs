//! Gradient-free maximization by iterated importance-weighted posterior means
//! under a Gaussian prior whose precision grows geometrically.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_jitter, log_sum_exp, op_norm_sym, pairwise_sum, Matrix, Vector};
use crate::model::Objective;
use crate::rng::{derive_seed, normal_block};

/// Ellipsoid `{‖Q(x − center)‖ ≤ radius}`; draws outside are skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipsoid {
    pub center: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub radius: f64,
}

impl Ellipsoid {
    pub fn contains(&self, x: &Vector<f64>) -> bool {
        let p = self.center.len();
        let d: Vec<f64> = (0..p).map(|j| x[j] - self.center[j]).collect();
        let n2: f64 = self.q.iter().map(|row| row.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>().powi(2)).sum();
        n2.sqrt() <= self.radius * (1.0 + 1e-12)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IterationConfig {
    pub x0: Vec<f64>,
    /// `G₀²`, row-major rows.
    pub g0_squared: Vec<Vec<f64>>,
    /// Optional `S₀` with `S₀S₀ᵀ = G₀^{-2}`; draws are `x_k + a^{-k/2} S₀ z`.
    /// Defaults to the inverse transpose Cholesky factor of `G₀²`.
    pub prior_factor: Option<Vec<Vec<f64>>>,
    pub precision_factor: f64,
    pub samples_per_step: usize,
    pub max_steps: usize,
    pub step_tolerance: f64,
    pub seed: u64,
    pub restrict_to: Option<Ellipsoid>,
    /// Pairs every draw `z` with `−z`.
    pub antithetic: bool,
    /// `G_{k+1}² = a·Σ̂_k^{-1}` from the weighted draws instead of `a·G_k²`.
    pub covariance_feedback: bool,
}

impl Default for IterationConfig {
    fn default() -> Self {
        Self {
            x0: Vec::new(),
            g0_squared: Vec::new(),
            prior_factor: None,
            precision_factor: 1.5,
            samples_per_step: 512,
            max_steps: 100,
            step_tolerance: 1e-6,
            seed: 0,
            restrict_to: None,
            antithetic: true,
            covariance_feedback: false,
        }
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], p: usize, what: &str) -> Result<Matrix<f64>> {
    if rows.len() != p || rows.iter().any(|r| r.len() != p) {
        return Err(Error::Config(format!("{what} must be a {p}x{p} matrix")));
    }
    Ok(Matrix::from_fn(p, p, |i, j| rows[i][j]))
}

pub fn matrix_rows(m: &Matrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl IterationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.precision_factor > 1.0) {
            return Err(Error::Config("precision_factor must exceed 1".into()));
        }
        if self.samples_per_step < 2 {
            return Err(Error::Config("samples_per_step must be at least 2".into()));
        }
        if self.x0.is_empty() {
            return Err(Error::Config("x0 must be non-empty".into()));
        }
        rows_to_matrix(&self.g0_squared, self.x0.len(), "g0_squared")?;
        Ok(())
    }
}

/// Statistics of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub k: usize,
    /// Iterate after the step.
    pub x: Vec<f64>,
    /// Delta-method standard error of each coordinate of `x`.
    pub x_stderr: Vec<f64>,
    /// `ln` of the factor multiplying `G₀²`.
    pub log_precision_scale: f64,
    /// `(Σw)²/Σw²`.
    pub ess: f64,
    pub max_log_weight: f64,
    pub accepted_draws: usize,
    pub rejected_draws: usize,
    pub degenerate: bool,
    pub retried: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub steps: Vec<StepStats>,
    pub converged: bool,
    pub precision_capped: bool,
    pub final_x: Vec<f64>,
    /// Iterate with the largest objective value.
    pub best_x: Vec<f64>,
    pub best_value: f64,
}

impl IterationTrace {
    /// One row per step: `k,log_precision_scale,ess,max_log_weight,
    /// accepted_draws,rejected_draws,degenerate,x_0,…`.
    pub fn to_csv(&self) -> String {
        let p = self.final_x.len();
        let mut s = String::from("k,log_precision_scale,ess,max_log_weight,accepted_draws,rejected_draws,degenerate");
        for j in 0..p {
            s.push_str(&format!(",x_{j}"));
        }
        s.push('\n');
        for st in &self.steps {
            s.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e},{},{},{}",
                st.k, st.log_precision_scale, st.ess, st.max_log_weight, st.accepted_draws, st.rejected_draws, st.degenerate
            ));
            for v in &st.x {
                s.push_str(&format!(",{v:.16e}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Result of [`step`] before bookkeeping.
pub struct StepOutput {
    pub x_next: Vector<f64>,
    pub x_stderr: Vector<f64>,
    pub ess: f64,
    pub max_log_weight: f64,
    pub accepted: usize,
    pub rejected: usize,
    /// Weighted covariance of the accepted draws.
    pub covariance: Matrix<f64>,
}

/// One importance-weighted mean: `M` draws `x_k + S z`, weights `e^{ℓ(x)}`.
/// `factor` is `S` with `SSᵀ = G_k^{-2}`.
pub fn step(
    ell: &(impl Objective<f64> + ?Sized),
    x_k: &Vector<f64>,
    factor: &Matrix<f64>,
    m: usize,
    seed: u64,
    restrict: Option<&Ellipsoid>,
    antithetic: bool,
) -> Result<StepOutput> {
    if m < 2 {
        return Err(Error::PreconditionViolated("at least two draws per step".into()));
    }
    let p = x_k.len();
    let base = if antithetic { m.div_ceil(2) } else { m };
    let z = normal_block(seed, "iterations/draws", base, p);
    let group = if antithetic { 2 } else { 1 };
    // (group index, point, log-weight) for accepted draws
    let evals: Vec<Option<(usize, Vector<f64>, f64)>> = (0..base * group)
        .into_par_iter()
        .map(|j| {
            let b = j / group;
            let sign = if j % group == 0 { 1.0 } else { -1.0 };
            let zj = Vector::from_row_slice(&z[b * p..(b + 1) * p]) * sign;
            let x = x_k + factor * zj;
            if restrict.is_some_and(|r| !r.contains(&x)) {
                return None;
            }
            Some((b, x.clone(), ell.value(&x)))
        })
        .collect();
    let total = evals.len();
    let acc: Vec<&(usize, Vector<f64>, f64)> = evals.iter().flatten().collect();
    if acc.is_empty() {
        return Err(Error::AllDrawsRejected);
    }
    if let Some(bad) = acc.iter().find(|e| e.2.is_nan() || e.2 == f64::INFINITY) {
        return Err(Error::Domain { point: bad.1.iter().copied().collect() });
    }
    let logs: Vec<f64> = acc.iter().map(|e| e.2).collect();
    let lz = log_sum_exp(&logs);
    if !lz.is_finite() {
        return Err(Error::DegenerateWeights(0.0));
    }
    let w: Vec<f64> = logs.iter().map(|l| (l - lz).exp()).collect();
    let ess = 1.0 / pairwise_sum(&w.iter().map(|v| v * v).collect::<Vec<_>>());
    let max_log_weight = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut mean = Vector::zeros(p);
    for j in 0..p {
        let t: Vec<f64> = acc.iter().zip(&w).map(|(e, wi)| wi * e.1[j]).collect();
        mean[j] = pairwise_sum(&t);
    }
    // delta-method variance with antithetic pairs as units
    let mut se = Vector::zeros(p);
    let mut cov = Matrix::zeros(p, p);
    for j in 0..p {
        let mut unit = vec![0.0; base];
        for (e, wi) in acc.iter().zip(&w) {
            unit[e.0] += wi * (e.1[j] - mean[j]);
        }
        se[j] = pairwise_sum(&unit.iter().map(|v| v * v).collect::<Vec<_>>()).sqrt();
    }
    for (e, wi) in acc.iter().zip(&w) {
        let d = &e.1 - &mean;
        cov += &d * d.transpose() * *wi;
    }
    Ok(StepOutput { x_next: mean, x_stderr: se, ess, max_log_weight, accepted: acc.len(), rejected: total - acc.len(), covariance: cov })
}

const PRECISION_CAP: f64 = 1e12;

const FLAT_ESS: f64 = 0.9;

/// Iterates [`step`] with `G_{k+1}² = a G_k²` until
/// `‖x_{k+1} − x_k‖ ≤ tol·(1 + ‖x_k‖)` with near-uniform weights, or
/// `max_steps`.
pub fn run(ell: &(impl Objective<f64> + ?Sized), config: &IterationConfig) -> Result<IterationTrace> {
    config.validate()?;
    let p = config.x0.len();
    if ell.dim() != p {
        return Err(Error::DimensionMismatch { expected: ell.dim(), got: p });
    }
    let g0 = rows_to_matrix(&config.g0_squared, p, "g0_squared")?;
    let s0 = match &config.prior_factor {
        Some(rows) => rows_to_matrix(rows, p, "prior_factor")?,
        None => {
            let (ch, _) = cholesky_jitter(&g0)?;
            ch.l().transpose().try_inverse().ok_or(Error::SingularPrecision)?
        }
    };
    let a = config.precision_factor;
    let mut x = Vector::from_vec(config.x0.clone());
    let mut factor = s0;
    let mut g_norm = op_norm_sym(&g0);
    let mut log_scale = 0.0;
    let mut capped = false;
    let mut steps = Vec::new();
    let mut converged = false;
    let mut best = (ell.value(&x), x.clone());
    for k in 0..config.max_steps {
        let seed = derive_seed(config.seed, "iterations/step", k as u64);
        let mut m = config.samples_per_step;
        let mut out = step(ell, &x, &factor, m, seed, config.restrict_to.as_ref(), config.antithetic)?;
        let mut retried = false;
        if out.ess < 0.01 * m as f64 {
            m *= 2;
            out = step(ell, &x, &factor, m, derive_seed(seed, "iterations/retry", 1), config.restrict_to.as_ref(), config.antithetic)?;
            retried = true;
        }
        let moved = (&out.x_next - &x).norm();
        let tol = config.step_tolerance * (1.0 + x.norm());
        x = out.x_next.clone();
        let val = ell.value(&x);
        if val > best.0 {
            best = (val, x.clone());
        }
        steps.push(StepStats {
            k,
            x: x.iter().copied().collect(),
            x_stderr: out.x_stderr.iter().copied().collect(),
            log_precision_scale: log_scale,
            ess: out.ess,
            max_log_weight: out.max_log_weight,
            accepted_draws: out.accepted,
            rejected_draws: out.rejected,
            degenerate: out.ess < 1.0 + 1e-9,
            retried,
        });
        // a small move only counts once the weights are nearly flat, i.e. the
        // prior is narrower than ℓ and the mean map is a local contraction
        if moved <= tol && out.ess >= FLAT_ESS * m as f64 {
            converged = true;
            break;
        }
        if g_norm * a > PRECISION_CAP {
            capped = true;
            continue;
        }
        if config.covariance_feedback {
            match cholesky_jitter(&out.covariance) {
                Ok((ch, _)) => {
                    factor = ch.l() / a.sqrt();
                    g_norm = op_norm_sym(&ch.inverse()) * a;
                }
                Err(_) => {
                    factor /= a.sqrt();
                    g_norm *= a;
                }
            }
        } else {
            factor /= a.sqrt();
            g_norm *= a;
        }
        log_scale += a.ln();
    }
    Ok(IterationTrace {
        steps,
        converged,
        precision_capped: capped,
        final_x: x.iter().copied().collect(),
        best_x: best.1.iter().copied().collect(),
        best_value: best.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FnObjective;

    #[test]
    fn flat_objective_gives_sample_mean() {
        let ell = FnObjective::new(2, |_x: &Vector<f64>| 0.0);
        let x = Vector::from_vec(vec![1.0, -1.0]);
        let out = step(&ell, &x, &Matrix::identity(2, 2), 1000, 3, None, false).unwrap();
        assert!((&out.x_next - &x).amax() < 4.0 / 1000f64.sqrt());
        assert!((out.ess - 1000.0).abs() < 1e-6);
        let anti = step(&ell, &x, &Matrix::identity(2, 2), 1000, 3, None, true).unwrap();
        assert!((&anti.x_next - &x).amax() < 1e-12);
    }

    #[test]
    fn rejection_accounting() {
        let ell = FnObjective::new(1, |x: &Vector<f64>| -x[0] * x[0]);
        let r = Ellipsoid { center: vec![0.0], q: vec![vec![1.0]], radius: 0.5 };
        let out = step(&ell, &Vector::zeros(1), &Matrix::identity(1, 1), 400, 1, Some(&r), false).unwrap();
        assert_eq!(out.accepted + out.rejected, 400);
        assert!(out.rejected > 0);
        let far = Ellipsoid { center: vec![100.0], q: vec![vec![1.0]], radius: 0.5 };
        assert!(matches!(step(&ell, &Vector::zeros(1), &Matrix::identity(1, 1), 50, 1, Some(&far), false), Err(Error::AllDrawsRejected)));
    }

    #[test]
    fn config_validation() {
        let mut c = IterationConfig { x0: vec![0.0], g0_squared: vec![vec![1.0]], ..Default::default() };
        assert!(c.validate().is_ok());
        c.precision_factor = 1.0;
        assert!(c.validate().is_err());
    }
}
