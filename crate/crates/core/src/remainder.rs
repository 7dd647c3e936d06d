//! Taylor remainders around the mode, the local smoothness value `ω`, its
//! third-derivative majorant `α`, self-concordance constants and the
//! Gaussian moments of the homogeneous majorants `τ₃`, `τ₄`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{gaussian_norm_even_moment, sample_gaussian, LocalGeometry, PrecisionPair};
use crate::linalg::{pairwise_sum, quad_form, Matrix, Vector};
use crate::model::{directional_derivative, evaluate, gradient, hessian, Objective};
use crate::rng::{standard_normal, stream};
use crate::scalar::Real;

/// Bregman divergence `f(x+u) − f(x) − ⟨∇f(x), u⟩`.
pub fn bregman<T: Real>(f: &(impl Objective<T> + ?Sized), x: &Vector<T>, u: &Vector<T>) -> Result<T> {
    let g = gradient(f, x)?;
    Ok(evaluate(f, &(x + u))? - evaluate(f, x)? - g.dot(u))
}

/// `δ₃(x, u) = f(x;u) − ½⟨∇²f(x), u⊗²⟩`.
pub fn delta3<T: Real>(f: &(impl Objective<T> + ?Sized), x: &Vector<T>, u: &Vector<T>) -> Result<T> {
    let h = hessian(f, x)?;
    Ok(bregman(f, x, u)? - T::lit(0.5) * quad_form(&h, u))
}

/// `δ₄(x, u) = δ₃(x, u) − ⅙⟨∇³f(x), u⊗³⟩`.
pub fn delta4<T: Real>(f: &(impl Objective<T> + ?Sized), x: &Vector<T>, u: &Vector<T>) -> Result<T> {
    let k3 = directional_derivative(f, x, u, 3)?;
    Ok(delta3(f, x, u)? - k3 / T::lit(6.0))
}

/// Value, gradient and Hessian frozen at a base point, so `δ₃` along many
/// directions costs one evaluation each.
pub struct Expansion<T: Real> {
    pub x: Vector<T>,
    pub value: T,
    pub gradient: Vector<T>,
    pub hessian: Matrix<T>,
}

impl<T: Real> Expansion<T> {
    pub fn at(f: &(impl Objective<T> + ?Sized), x: &Vector<T>) -> Result<Self> {
        Ok(Self { x: x.clone(), value: evaluate(f, x)?, gradient: gradient(f, x)?, hessian: hessian(f, x)? })
    }

    pub fn delta3(&self, f: &(impl Objective<T> + ?Sized), u: &Vector<T>) -> Result<T> {
        let v = evaluate(f, &(&self.x + u))?;
        Ok(v - self.value - self.gradient.dot(u) - T::lit(0.5) * quad_form(&self.hessian, u))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanOptions {
    pub n_dirs: usize,
    pub n_line: usize,
    pub seed: u64,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self { n_dirs: 256, n_line: 32, seed: 0 }
    }
}

impl ScanOptions {
    pub fn validate(&self) -> Result<()> {
        if self.n_dirs < 32 || self.n_line < 16 {
            return Err(Error::PreconditionViolated("need n_dirs >= 32 and n_line >= 16".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RemainderReport {
    pub omega: f64,
    pub alpha: Option<f64>,
    pub directions_used: usize,
    pub line_points_used: usize,
    pub sup_attained_at: Vec<f64>,
    /// The scan is a sampled maximum, i.e. a lower estimate of the supremum.
    pub is_sup_estimate: bool,
}

/// Direction `i`, uniform on `{‖D u‖ = 1}`.
fn direction<T: Real>(d_inv: &Matrix<T>, seed: u64, tag: &str, i: usize) -> Vector<T> {
    let p = d_inv.nrows();
    let mut rng = stream(seed, tag, i as u64);
    let z = Vector::from_iterator(p, (0..p).map(|_| T::lit(standard_normal(&mut rng))));
    let nz = z.norm();
    d_inv * (z / nz)
}

struct Best<T: Real> {
    value: T,
    index: usize,
    point: Vector<T>,
}

fn reduce_best<T: Real>(items: Vec<Result<Best<T>>>) -> Result<Best<T>> {
    let mut best: Option<Best<T>> = None;
    for b in items {
        let b = b?;
        let better = match &best {
            None => true,
            Some(cur) => b.value > cur.value || (b.value == cur.value && b.index < cur.index),
        };
        if better {
            best = Some(b);
        }
    }
    best.ok_or_else(|| Error::PreconditionViolated("empty scan".into()))
}

fn scan<T: Real, F>(geom: &LocalGeometry<T>, opts: &ScanOptions, tag: &str, include_zero: bool, per_point: F) -> Result<Best<T>>
where
    F: Fn(&Vector<T>, T) -> Result<T> + Sync,
{
    opts.validate()?;
    let d_inv = geom.d_inverse()?;
    let r = geom.local_radius;
    let items: Vec<Result<Best<T>>> = (0..opts.n_dirs)
        .into_par_iter()
        .map(|i| {
            let dir = direction(&d_inv, opts.seed, tag, i);
            let mut best = Best { value: T::zero(), index: i, point: geom.center.clone() };
            let start = if include_zero { 0 } else { 1 };
            for j in start..=opts.n_line {
                let t = r * T::from_count(j) / T::from_count(opts.n_line);
                let v = per_point(&dir, t)?;
                if v > best.value {
                    best = Best { value: v, index: i, point: &geom.center + &dir * t };
                }
            }
            Ok(best)
        })
        .collect();
    reduce_best(items)
}

/// Sampled `ω = sup_{u ∈ U} 2|δ₃(x*, u)|/‖Du‖²`.
pub fn estimate_omega<T: Real>(f: &(impl Objective<T> + ?Sized), geom: &LocalGeometry<T>, opts: &ScanOptions) -> Result<RemainderReport> {
    let exp = Expansion::at(f, &geom.center)?;
    let best = scan(geom, opts, "remainder/directions", false, |dir, t| {
        let u = dir * t;
        let d3 = exp.delta3(f, &u)?;
        Ok(T::lit(2.0) * d3.abs() / (t * t))
    })?;
    Ok(RemainderReport {
        omega: best.value.as_f64(),
        alpha: None,
        directions_used: opts.n_dirs,
        line_points_used: opts.n_line,
        sup_attained_at: best.point.iter().map(|v| v.as_f64()).collect(),
        is_sup_estimate: true,
    })
}

/// Sampled `α = sup |⟨∇³f(x* + tu), u⊗³⟩|/‖Du‖²` over `u ∈ U`, `t ∈ [0, 1]`.
///
/// For a unit direction the ratio is `s·|k₃(x* + τ·dir)|` with `τ ≤ s ≤ R`,
/// so the scan takes `R·max_τ |k₃|`.
pub fn estimate_alpha<T: Real>(f: &(impl Objective<T> + ?Sized), geom: &LocalGeometry<T>, opts: &ScanOptions) -> Result<f64> {
    let r = geom.local_radius;
    let best = scan(geom, opts, "remainder/directions", true, |dir, t| {
        let y = &geom.center + dir * t;
        Ok(r * directional_derivative(f, &y, dir, 3)?.abs())
    })?;
    Ok(best.value.as_f64())
}

/// `ω` and `α` on the same directions.
pub fn estimate_remainders<T: Real>(
    f: &(impl Objective<T> + ?Sized),
    geom: &LocalGeometry<T>,
    opts: &ScanOptions,
) -> Result<RemainderReport> {
    let mut rep = estimate_omega(f, geom, opts)?;
    rep.alpha = Some(estimate_alpha(f, geom, opts)?);
    Ok(rep)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConcordanceSource {
    EstimatedSup,
    Analytic,
    NlConstants,
}

/// `c₃`, `c₄` with `−ℓ = n·h`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelfConcordance {
    pub c3: f64,
    pub c4: Option<f64>,
    pub n: f64,
    pub source: ConcordanceSource,
    pub is_sup_estimate: bool,
}

impl SelfConcordance {
    pub fn analytic(c3: f64, c4: Option<f64>, n: f64) -> Self {
        Self { c3, c4, n, source: ConcordanceSource::Analytic, is_sup_estimate: false }
    }
}

/// Sampled suprema over `U` of `|⟨∇³h(x*+tu),u⊗³⟩|/⟨∇²h(x*),u⊗²⟩^{3/2}` and
/// `|⟨∇⁴h(x*+tu),u⊗⁴⟩|/⟨∇²h(x*),u⊗²⟩²`.
pub fn estimate_self_concordance<T: Real>(
    h: &(impl Objective<T> + ?Sized),
    geom: &LocalGeometry<T>,
    n: T,
    opts: &ScanOptions,
    with_fourth: bool,
) -> Result<SelfConcordance> {
    let h2 = hessian(h, &geom.center)?;
    let curv = |dir: &Vector<T>| -> Result<T> {
        let q = quad_form(&h2, dir);
        if q <= T::zero() || !q.is_finite_value() {
            return Err(Error::CurvatureSingular);
        }
        Ok(q)
    };
    let c3 = scan(geom, opts, "remainder/directions", true, |dir, t| {
        let y = &geom.center + dir * t;
        Ok(directional_derivative(h, &y, dir, 3)?.abs() / curv(dir)?.powf(T::lit(1.5)))
    })?;
    let c4 = if with_fourth {
        let b = scan(geom, opts, "remainder/directions", true, |dir, t| {
            let y = &geom.center + dir * t;
            let q = curv(dir)?;
            Ok(directional_derivative(h, &y, dir, 4)?.abs() / (q * q))
        })?;
        Some(b.value.as_f64())
    } else {
        None
    };
    Ok(SelfConcordance { c3: c3.value.as_f64(), c4, n: n.as_f64(), source: ConcordanceSource::EstimatedSup, is_sup_estimate: true })
}

/// Moment bounds implied by self-concordance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TauBounds {
    /// `c₃ n^{-1/2} (p_G+1)^{3/2}`.
    pub e_tau3: f64,
    /// `c₄ n^{-1} (p_G+1)²`.
    pub e_tau4: Option<f64>,
    /// `c₃² (p_G+2)³ / n`.
    pub third_form_sq: f64,
}

pub fn tau_moment_bounds(sc: &SelfConcordance, p_g: f64) -> Result<TauBounds> {
    if !(sc.n > 0.0) {
        return Err(Error::PreconditionViolated("sample size must be positive".into()));
    }
    Ok(TauBounds {
        e_tau3: sc.c3 * (p_g + 1.0).powf(1.5) / sc.n.sqrt(),
        e_tau4: sc.c4.map(|c4| c4 * (p_g + 1.0).powi(2) / sc.n),
        third_form_sq: sc.c3 * sc.c3 * (p_g + 2.0).powi(3) / sc.n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
}

/// Monte Carlo `E τ_k(γ_G)` with `τ_k(u) = c_k n^{1−k/2} ‖Du‖^k`.
pub fn tau_moment_mc(pair: &PrecisionPair<f64>, sc: &SelfConcordance, order: usize, samples: usize, seed: u64) -> Result<McEstimate> {
    let c = match order {
        3 => sc.c3,
        4 => sc.c4.ok_or_else(|| Error::PreconditionViolated("c4 not available".into()))?,
        _ => return Err(Error::UnsupportedOrder(order)),
    };
    if c == 0.0 {
        return Ok(McEstimate { mean: 0.0, stderr: 0.0 });
    }
    let scale = c * sc.n.powf(1.0 - order as f64 / 2.0);
    let g = sample_gaussian(pair, samples, seed)?;
    let vals: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let row = g.row(i).transpose();
            scale * quad_form(&pair.d2, &row).max(0.0).powf(order as f64 / 2.0)
        })
        .collect();
    let m = pairwise_sum(&vals) / samples as f64;
    let sq: Vec<f64> = vals.iter().map(|v| (v - m) * (v - m)).collect();
    let var = pairwise_sum(&sq) / (samples as f64 - 1.0).max(1.0);
    Ok(McEstimate { mean: m, stderr: (var / samples as f64).sqrt() })
}

/// Closed form `E τ₄(γ_G) = c₄ n^{-1} [(tr B)² + 2 tr B²]`.
pub fn tau4_exact(pair: &PrecisionPair<f64>, c4: f64, n: f64) -> f64 {
    c4 / n * gaussian_norm_even_moment(&pair.b_matrix, 4).unwrap_or(f64::NAN)
}
