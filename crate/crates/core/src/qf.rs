//! Monte Carlo falsification of the Gaussian quadratic-form tools.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{det_contiguity_bounds, gaussian_ball_radius, gaussian_norm_even_moment, PrecisionPair};
use crate::linalg::{pairwise_sum, Matrix};
use crate::rng::{derive_seed, normal_block, uniform_block};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QfTrial {
    pub index: usize,
    pub dim: usize,
    pub x: f64,
    pub radius: f64,
    pub tail_frequency: f64,
    pub tail_stderr: f64,
    pub tail_bound: f64,
    pub tail_holds: bool,
    pub moment4_mc: f64,
    pub moment4_stderr: f64,
    pub moment4_exact: f64,
    pub moment6_mc: f64,
    pub moment6_stderr: f64,
    pub moment6_exact: f64,
    pub moments_hold: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetTrial {
    pub index: usize,
    pub omega: f64,
    pub plus_exact: f64,
    pub plus_bound: f64,
    pub minus_exact: f64,
    pub minus_bound: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QfReport {
    pub trials_per_config: usize,
    pub seed: u64,
    pub configs: Vec<QfTrial>,
    pub determinant: Vec<DetTrial>,
    pub all_hold: bool,
}

fn random_factor(seed: u64, tag: &str, index: usize, p: usize) -> Matrix<f64> {
    let z = normal_block(derive_seed(seed, tag, index as u64), tag, p, p);
    Matrix::from_row_slice(p, p, &z) / (p as f64).sqrt()
}

fn mean_and_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = pairwise_sum(v) / n;
    let sq: Vec<f64> = v.iter().map(|x| (x - m) * (x - m)).collect();
    let var = pairwise_sum(&sq) / (n - 1.0).max(1.0);
    (m, (var / n).sqrt())
}

/// `configs` random `(B, x)` pairs with `trials` draws each, plus
/// `det_pairs` determinant checks with `ω ∈ (0, 1/3]`.
pub fn qf_check(configs: usize, trials: usize, det_pairs: usize, seed: u64) -> Result<QfReport> {
    let xs = [1.0, 2.0, 4.0];
    let mut out = Vec::with_capacity(configs);
    for c in 0..configs {
        let p = 1 + c % 6;
        let x = xs[c % 3];
        let t = random_factor(seed, "qf/factor", c, p);
        let b = &t * t.transpose();
        let radius = gaussian_ball_radius(&b, x);
        let z = normal_block(derive_seed(seed, "qf/draws", c as u64), "qf/draws", trials, p);
        let norms2: Vec<f64> = (0..trials)
            .into_par_iter()
            .map(|i| {
                let zi = crate::linalg::Vector::from_row_slice(&z[i * p..(i + 1) * p]);
                (&t * zi).norm_squared()
            })
            .collect();
        let tail: Vec<f64> = norms2.iter().map(|&r2| if r2.sqrt() > radius { 1.0 } else { 0.0 }).collect();
        let (freq, freq_se) = mean_and_stderr(&tail);
        let m4: Vec<f64> = norms2.iter().map(|r2| r2 * r2).collect();
        let m6: Vec<f64> = norms2.iter().map(|r2| r2 * r2 * r2).collect();
        let (m4, m4_se) = mean_and_stderr(&m4);
        let (m6, m6_se) = mean_and_stderr(&m6);
        let e4 = gaussian_norm_even_moment(&b, 4)?;
        let e6 = gaussian_norm_even_moment(&b, 6)?;
        let bound = (-x).exp();
        out.push(QfTrial {
            index: c,
            dim: p,
            x,
            radius,
            tail_frequency: freq,
            tail_stderr: freq_se,
            tail_bound: bound,
            tail_holds: freq <= bound + 4.0 * freq_se,
            moment4_mc: m4,
            moment4_stderr: m4_se,
            moment4_exact: e4,
            moment6_mc: m6,
            moment6_stderr: m6_se,
            moment6_exact: e6,
            moments_hold: (m4 - e4).abs() <= 4.0 * m4_se && (m6 - e6).abs() <= 4.0 * m6_se,
        });
    }
    let omegas = uniform_block(seed, "qf/omega", det_pairs, 1);
    let mut det = Vec::with_capacity(det_pairs);
    for k in 0..det_pairs {
        let p = 1 + k % 5;
        let a = random_factor(seed, "qf/det-d", k, p);
        let g = random_factor(seed, "qf/det-g", k, p);
        let pair = PrecisionPair::from_penalty(&a * a.transpose(), &(&g * g.transpose() + Matrix::identity(p, p) * 1e-3))?;
        // ω ∈ (0, 1/3]
        let omega = (1.0 - omegas[k]) / 3.0;
        let d = det_contiguity_bounds(omega, &pair)?;
        det.push(DetTrial {
            index: k,
            omega,
            plus_exact: d.plus_exact,
            plus_bound: d.plus_bound,
            minus_exact: d.minus_exact,
            minus_bound: d.minus_bound,
            holds: d.plus_exact <= d.plus_bound && d.minus_exact <= d.minus_bound,
        });
    }
    let all_hold = out.iter().all(|t| t.tail_holds && t.moments_hold) && det.iter().all(|d| d.holds);
    Ok(QfReport { trials_per_config: trials, seed, configs: out, determinant: det, all_hold })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_run_holds() {
        let r = qf_check(6, 20_000, 10, 5).unwrap();
        assert!(r.configs.iter().all(|t| t.tail_holds));
        assert!(r.determinant.iter().all(|d| d.holds));
    }
}
