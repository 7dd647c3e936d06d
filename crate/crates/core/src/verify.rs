//! Numerical ground truth for certificates: tensor-grid quadrature in low
//! dimension, self-normalized importance sampling otherwise, and a report
//! pairing every bound with its measured counterpart.

use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certificate::{Gated, LaplaceCertificate};
use crate::error::{Error, Result};
use crate::geometry::LocalGeometry;
use crate::linalg::{log_sum_exp, pairwise_sum, quad_form, Matrix, Vector};
use crate::model::{gradient, Objective};
use crate::rng::normal_block;

/// Posterior tabulated on a tensor grid in whitened coordinates
/// `x = center + T v`, `T = L^{-T}`, `LLᵀ = D_G²`.
pub struct GridPosterior {
    pub dim: usize,
    pub center: Vector<f64>,
    pub transform: Matrix<f64>,
    /// Half-width of the box in every whitened axis.
    pub half_width: f64,
    /// Odd number of nodes per axis; the coarse level uses every other node.
    pub resolution: usize,
    pub log_density: Vec<f64>,
    /// Nodes excluded by a restriction (e.g. outside `X₀`) carry `false`.
    pub mask: Vec<bool>,
    /// Volume element of the fine level in `x` coordinates.
    pub cell_volume: f64,
    pub log_normalizer: f64,
    levels: OnceLock<(Level, Level)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridOptions {
    pub box_sigmas: f64,
    /// Nodes per axis; `None` picks a default from the dimension.
    pub resolution: Option<usize>,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self { box_sigmas: 8.0, resolution: None }
    }
}

pub const MAX_GRID_POINTS: usize = 10_000_000;
const BOUNDARY_MASS: f64 = 1e-6;

pub fn default_resolution(dim: usize) -> usize {
    match dim {
        1 => 4001,
        2 => 401,
        3 => 121,
        4 => 41,
        _ => 21,
    }
}

struct Level {
    nodes: Vec<usize>,
    /// Quadrature weight times volume element.
    weights: Vec<f64>,
    log_weights: Vec<f64>,
}

impl GridPosterior {
    fn digits(&self, mut k: usize, out: &mut [usize]) {
        for slot in out.iter_mut() {
            *slot = k % self.resolution;
            k /= self.resolution;
        }
    }

    fn step(&self) -> f64 {
        2.0 * self.half_width / (self.resolution - 1) as f64
    }

    fn fill_whitened(&self, k: usize, idx: &mut [usize], y: &mut Vector<f64>) {
        self.digits(k, idx);
        let h = self.step();
        for (yi, &i) in y.iter_mut().zip(idx.iter()) {
            *yi = -self.half_width + i as f64 * h;
        }
    }

    /// Whitened coordinates of node `k`.
    pub fn whitened(&self, k: usize) -> Vector<f64> {
        let mut idx = vec![0; self.dim];
        let mut y = Vector::zeros(self.dim);
        self.fill_whitened(k, &mut idx, &mut y);
        y
    }

    pub fn point(&self, k: usize) -> Vector<f64> {
        &self.center + &self.transform * self.whitened(k)
    }

    pub fn len(&self) -> usize {
        self.log_density.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_density.is_empty()
    }

    fn level(&self, coarse: bool) -> &Level {
        let pair = self.levels.get_or_init(|| (self.build_level(false), self.build_level(true)));
        if coarse {
            &pair.1
        } else {
            &pair.0
        }
    }

    fn build_level(&self, coarse: bool) -> Level {
        let r = self.resolution;
        let stride = if coarse { 2 } else { 1 };
        let vol = self.cell_volume * (stride as f64).powi(self.dim as i32);
        let mut idx = vec![0; self.dim];
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let mut log_weights = Vec::new();
        // indexed by the number of axes on which the node sits on the boundary
        let table: Vec<(f64, f64)> =
            (0..=self.dim).map(|b| (vol * 0.5f64.powi(b as i32), vol.ln() - b as f64 * std::f64::consts::LN_2)).collect();
        for k in 0..self.len() {
            self.digits(k, &mut idx);
            if coarse && idx.iter().any(|i| i % 2 == 1) {
                continue;
            }
            let b = idx.iter().filter(|&&i| i == 0 || i == r - 1).count();
            nodes.push(k);
            weights.push(table[b].0);
            log_weights.push(table[b].1);
        }
        Level { nodes, weights, log_weights }
    }

    fn level_logs(&self, lv: &Level) -> Vec<f64> {
        lv.nodes
            .iter()
            .zip(&lv.log_weights)
            .map(|(&k, &lw)| if self.mask[k] { self.log_density[k] + lw } else { f64::NEG_INFINITY })
            .collect()
    }

    /// Normalized posterior masses per node of a level.
    fn posterior_masses(&self, lv: &Level) -> Vec<f64> {
        let logs = self.level_logs(lv);
        let z = log_sum_exp(&logs);
        logs.iter().map(|&l| (l - z).exp()).collect()
    }

    fn log_normalizer_of(&self, lv: &Level) -> f64 {
        log_sum_exp(&self.level_logs(lv))
    }

    /// `(x_k − mean)ᵀ P (x_k − mean)` at every node, through the whitened
    /// coordinates: `yᵀ(TᵀPT)y + 2yᵀTᵀPδ + δᵀPδ` with `δ = center − mean`.
    fn quad_forms(&self, mean: &Vector<f64>, prec: &Matrix<f64>) -> Vec<f64> {
        let t = &self.transform;
        let m = t.transpose() * prec * t;
        let delta = &self.center - mean;
        let b = t.transpose() * (prec * &delta);
        let c0 = quad_form(prec, &delta);
        let d = self.dim;
        (0..self.len())
            .into_par_iter()
            .map_init(
                || (vec![0usize; d], Vector::zeros(d)),
                |(idx, y), k| {
                    self.fill_whitened(k, idx, y);
                    let mut q = c0;
                    for i in 0..d {
                        let mut row = 0.0;
                        for j in 0..d {
                            row += m[(i, j)] * y[j];
                        }
                        q += y[i] * (row + 2.0 * b[i]);
                    }
                    q
                },
            )
            .collect()
    }

    fn gaussian_log_density(&self, mean: &Vector<f64>, prec: &Matrix<f64>) -> Result<Vec<f64>> {
        let (ch, _) = crate::linalg::cholesky_jitter(prec)?;
        let logdet: f64 = ch.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let c = 0.5 * logdet - 0.5 * self.dim as f64 * (2.0 * std::f64::consts::PI).ln();
        Ok(self.quad_forms(mean, prec).into_iter().map(|q| c - 0.5 * q).collect())
    }
}

/// Tabulates `e^{f}` on a grid of `±box_sigmas` whitened standard deviations
/// around `center`, optionally restricted to `mask`.
pub fn grid_posterior(
    f: &(impl Objective<f64> + ?Sized),
    center: &Vector<f64>,
    dg2: &Matrix<f64>,
    opts: &GridOptions,
    restrict: Option<&(dyn Fn(&Vector<f64>) -> bool + Sync)>,
) -> Result<GridPosterior> {
    let dim = center.len();
    let mut resolution = opts.resolution.unwrap_or_else(|| default_resolution(dim));
    if resolution % 2 == 0 {
        resolution += 1;
    }
    let total = (resolution as f64).powi(dim as i32);
    if total > MAX_GRID_POINTS as f64 {
        return Err(Error::GridTooLarge(total as usize));
    }
    let total = total as usize;
    let (ch, _) = crate::linalg::cholesky_jitter(dg2)?;
    let transform = ch.l().transpose().try_inverse().ok_or(Error::SingularPrecision)?;
    let det_t: f64 = transform.diagonal().iter().map(|v| v.abs()).product();
    let half_width = opts.box_sigmas;
    let h = 2.0 * half_width / (resolution - 1) as f64;
    let mut gp = GridPosterior {
        dim,
        center: center.clone(),
        transform,
        half_width,
        resolution,
        log_density: Vec::new(),
        mask: Vec::new(),
        cell_volume: h.powi(dim as i32) * det_t,
        log_normalizer: 0.0,
        levels: OnceLock::new(),
    };
    let evals: Vec<(f64, bool)> = (0..total)
        .into_par_iter()
        .map_init(
            || (vec![0usize; dim], Vector::zeros(dim), Vector::zeros(dim)),
            |(idx, y, x), k| {
                gp.fill_whitened(k, idx, y);
                x.copy_from(&gp.center);
                x.gemv(1.0, &gp.transform, y, 1.0);
                let keep = restrict.is_none_or(|r| r(x));
                (if keep { f.value(x) } else { f64::NEG_INFINITY }, keep)
            },
        )
        .collect();
    if let Some(k) = evals.iter().position(|(v, _)| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Domain { point: gp.point(k).iter().copied().collect() });
    }
    gp.log_density = evals.iter().map(|e| e.0).collect();
    gp.mask = evals.iter().map(|e| e.1).collect();
    let fine = gp.build_level(false);
    gp.log_normalizer = gp.log_normalizer_of(&fine);
    if !gp.log_normalizer.is_finite() {
        return Err(Error::Domain { point: center.iter().copied().collect() });
    }
    let masses = gp.posterior_masses(&fine);
    let r = resolution;
    let mut idx = vec![0; dim];
    let mut boundary = 0.0;
    for (&k, &m) in fine.nodes.iter().zip(&masses) {
        gp.digits(k, &mut idx);
        if idx.iter().any(|&i| i == 0 || i == r - 1) {
            boundary += m;
        }
    }
    if boundary > BOUNDARY_MASS {
        return Err(Error::BoxTooSmall(boundary));
    }
    let coarse = gp.build_level(true);
    let _ = gp.levels.set((fine, coarse));
    Ok(gp)
}

/// [`grid_posterior`] with the box widened on [`Error::BoxTooSmall`], keeping
/// the node spacing.
pub fn grid_posterior_adaptive(
    f: &(impl Objective<f64> + ?Sized),
    center: &Vector<f64>,
    dg2: &Matrix<f64>,
    opts: &GridOptions,
    restrict: Option<&(dyn Fn(&Vector<f64>) -> bool + Sync)>,
) -> Result<GridPosterior> {
    let mut o = *opts;
    let base_res = o.resolution.unwrap_or_else(|| default_resolution(center.len()));
    for attempt in 0..4 {
        match grid_posterior(f, center, dg2, &o, restrict) {
            Err(Error::BoxTooSmall(m)) if attempt < 3 => {
                let _ = m;
                o.box_sigmas *= 1.5;
                let res = ((base_res - 1) as f64 * o.box_sigmas / opts.box_sigmas).round() as usize + 1;
                o.resolution = Some(res | 1);
            }
            other => return other,
        }
    }
    unreachable!("loop returns on the last attempt")
}

/// A measured quantity with its numerical error (quadrature or Monte Carlo).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measured {
    pub value: f64,
    pub error: f64,
}

fn measured(fine: f64, coarse: f64) -> Measured {
    let error = if fine.is_finite() && coarse.is_finite() { (fine - coarse).abs() } else { f64::INFINITY };
    Measured { value: fine, error }
}

fn tv_from(gp: &GridPosterior, lq: &[f64]) -> Measured {
    let tv = |coarse: bool| {
        let lv = gp.level(coarse);
        let p = gp.posterior_masses(lv);
        let terms: Vec<f64> = lv.nodes.iter().zip(&lv.weights).zip(&p).map(|((&k, &w), &pk)| (pk - lq[k].exp() * w).abs()).collect();
        0.5 * pairwise_sum(&terms)
    };
    measured(tv(false), tv(true))
}

fn kl_from(gp: &GridPosterior, lq: &[f64]) -> (Measured, Measured) {
    let kls = |coarse: bool| {
        let lv = gp.level(coarse);
        let z = gp.log_normalizer_of(lv);
        let mut fwd = Vec::with_capacity(lv.nodes.len());
        let mut rev = Vec::with_capacity(lv.nodes.len());
        for (&k, &w) in lv.nodes.iter().zip(&lv.weights) {
            let lp = if gp.mask[k] { gp.log_density[k] - z } else { f64::NEG_INFINITY };
            let pm = lp.exp() * w;
            let qm = lq[k].exp() * w;
            if pm > 0.0 {
                fwd.push(pm * (lp - lq[k]));
            }
            if qm > 0.0 {
                rev.push(if pm > 0.0 { qm * (lq[k] - lp) } else { f64::INFINITY });
            }
        }
        (pairwise_sum(&fwd), pairwise_sum(&rev))
    };
    let (ff, rf) = kls(false);
    let (fc, rc) = kls(true);
    (measured(ff, fc), measured(rf, rc))
}

/// `½ Σ |p − q|` on the grid against a Gaussian; error from the coarse level.
pub fn tv_grid(gp: &GridPosterior, mean: &Vector<f64>, prec: &Matrix<f64>) -> Result<Measured> {
    Ok(tv_from(gp, &gp.gaussian_log_density(mean, prec)?))
}

/// `KL(P_f ‖ N)` and `KL(N ‖ P_f)` on the grid, with `0·log 0 = 0`.
pub fn kl_grid(gp: &GridPosterior, mean: &Vector<f64>, prec: &Matrix<f64>) -> Result<(Measured, Measured)> {
    Ok(kl_from(gp, &gp.gaussian_log_density(mean, prec)?))
}

/// Worst-case local error of the one-dimensional Laplace approximation on
/// `[−z, z]`, over all `|g| ≤ 1` and over even `g`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnivariateError {
    pub dd: f64,
    pub z: f64,
    pub all_g: Measured,
    pub even_g: Measured,
}

/// Trapezoid quadrature of `|e^{f(x;u)} − e^{−𝔻²u²/2}|` (and its even part)
/// on `half_nodes + 1` nodes of `[0, z]` (both signs of `u` per node),
/// normalized by `√(2π)/𝔻`.
pub fn univariate_local_error(f: &(impl Objective<f64> + ?Sized), x: f64, z: f64, half_nodes: usize) -> Result<UnivariateError> {
    if f.dim() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: f.dim() });
    }
    if !(z > 0.0) || half_nodes < 8 || half_nodes % 2 != 0 {
        return Err(Error::PreconditionViolated("need z > 0 and an even half_nodes >= 8".into()));
    }
    let xv = Vector::from_vec(vec![x]);
    let fx = crate::model::evaluate(f, &xv)?;
    let g = gradient(f, &xv)?[0];
    let dd2 = -crate::model::hessian(f, &xv)?[(0, 0)];
    if !(dd2 > 0.0) {
        return Err(Error::IndefiniteAtOptimum);
    }
    let dd = dd2.sqrt();
    let h = z / half_nodes as f64;
    let diff = |u: f64| -> Result<f64> {
        let v = crate::model::evaluate(f, &Vector::from_vec(vec![x + u]))?;
        Ok((v - fx - g * u).exp() - (-0.5 * dd2 * u * u).exp())
    };
    let vals: Vec<(f64, f64)> = (0..=half_nodes)
        .into_par_iter()
        .map(|j| {
            let u = j as f64 * h;
            Ok((diff(u)?, diff(-u)?))
        })
        .collect::<Result<_>>()?;
    let norm = dd / (2.0 * std::f64::consts::PI).sqrt();
    let integrate = |step: usize, even: bool| {
        let hs = h * step as f64;
        let terms: Vec<f64> = (0..=half_nodes)
            .step_by(step)
            .map(|j| {
                let (a, b) = vals[j];
                let w = if j == 0 || j == half_nodes { 0.5 } else { 1.0 };
                let v = if even { (a + b).abs() } else { a.abs() + b.abs() };
                w * v * hs
            })
            .collect();
        pairwise_sum(&terms) * norm
    };
    Ok(UnivariateError {
        dd,
        z,
        all_g: measured(integrate(1, false), integrate(2, false)),
        even_g: measured(integrate(1, true), integrate(2, true)),
    })
}

/// Grid-measured counterparts of the certificate bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Empirical {
    pub tv: Option<Measured>,
    pub ball_discrepancy: Option<Measured>,
    pub kl_forward: Option<Measured>,
    pub kl_reverse: Option<Measured>,
    pub tail_mass: Option<Measured>,
    pub mean_shift: Option<Measured>,
    pub mean: Option<Vec<f64>>,
}

/// TV, KL both ways, the largest discrepancy over centered `D_G`-balls,
/// posterior mass outside `U` and `‖D(x̄ − x*)‖`.
pub fn grid_empirical(gp: &GridPosterior, geom: &LocalGeometry<f64>) -> Result<Empirical> {
    let mean = &geom.center;
    let prec = &geom.pair.dg2;
    let q_dg = gp.quad_forms(mean, prec);
    let q_d = gp.quad_forms(mean, &geom.pair.d2);
    let (ch, _) = crate::linalg::cholesky_jitter(prec)?;
    let logdet: f64 = ch.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let c = 0.5 * logdet - 0.5 * gp.dim as f64 * (2.0 * std::f64::consts::PI).ln();
    let lq: Vec<f64> = q_dg.iter().map(|q| c - 0.5 * q).collect();
    let tv = tv_from(gp, &lq);
    let (kf, kr) = kl_from(gp, &lq);
    let r2_local = geom.local_radius * geom.local_radius;
    let stats = |coarse: bool| -> (f64, f64, f64, Vector<f64>) {
        let lv = gp.level(coarse);
        let p = gp.posterior_masses(lv);
        // centered balls in the D_G metric
        let mut rows: Vec<(f64, f64)> =
            lv.nodes.iter().zip(&lv.weights).zip(&p).map(|((&k, &w), &pk)| (q_dg[k], pk - lq[k].exp() * w)).collect();
        rows.par_sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
        let mut acc = 0.0;
        let mut best: f64 = 0.0;
        for (i, (r, d)) in rows.iter().enumerate() {
            acc += d;
            let last_of_group = i + 1 == rows.len() || rows[i + 1].0 > *r;
            if last_of_group {
                best = best.max(acc.abs());
            }
        }
        let mut tail = Vec::new();
        let mut wy = Vector::zeros(gp.dim);
        let mut idx = vec![0; gp.dim];
        let mut y = Vector::zeros(gp.dim);
        for (&k, &pk) in lv.nodes.iter().zip(&p) {
            if pk == 0.0 {
                continue;
            }
            if q_d[k] > r2_local {
                tail.push(pk);
            }
            gp.fill_whitened(k, &mut idx, &mut y);
            wy.axpy(pk, &y, 1.0);
        }
        // E[x] − mean = T E[y] + center − mean
        let u = &gp.transform * wy + (&gp.center - mean);
        let shift = (&geom.d * &u).norm();
        (best, pairwise_sum(&tail), shift, u + mean)
    };
    let (bf, tf, sf, mf) = stats(false);
    let (bc, tc, sc, _) = stats(true);
    Ok(Empirical {
        tv: Some(tv),
        ball_discrepancy: Some(measured(bf, bc)),
        kl_forward: Some(kf),
        kl_reverse: Some(kr),
        tail_mass: Some(measured(tf, tc)),
        mean_shift: Some(measured(sf, sc)),
        mean: Some(mf.iter().copied().collect()),
    })
}

/// `C_ℓ = E|ℓ(x*; T v)| e^{ρ_G ‖D T v‖²/2}` over `v ~ N(0, I)`, the
/// normalized form of the reverse-KL integrability constant, with
/// `ρ_G = 2x/r_G²`. Grid quadrature, `d ≤ 2`.
pub fn c_ell_grid(ell: &(impl Objective<f64> + ?Sized), geom: &LocalGeometry<f64>, resolution: usize) -> Result<f64> {
    let d = geom.dim();
    if d > 2 {
        return Err(Error::PreconditionViolated("C_ell is computed only in d <= 2".into()));
    }
    let rho_g = 2.0 * geom.deviation_x / (geom.r_g * geom.r_g);
    let x0 = &geom.center;
    let g = gradient(ell, x0)?;
    let l0 = ell.value(x0);
    let (ch, _) = crate::linalg::cholesky_jitter(&geom.pair.dg2)?;
    let t = ch.l().transpose().try_inverse().ok_or(Error::SingularPrecision)?;
    let half = 8.0 / (1.0 - rho_g).sqrt();
    let res = resolution | 1;
    let h = 2.0 * half / (res - 1) as f64;
    let total = res.pow(d as u32);
    let vals: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|mut k| {
            let mut v = Vector::zeros(d);
            let mut w = 1.0;
            for j in 0..d {
                let i = k % res;
                k /= res;
                v[j] = -half + i as f64 * h;
                if i == 0 || i == res - 1 {
                    w *= 0.5;
                }
            }
            let u = &t * &v;
            let breg = ell.value(&(x0 + &u)) - l0 - g.dot(&u);
            let expo = -0.5 * v.norm_squared() + 0.5 * rho_g * quad_form(&geom.pair.d2, &u);
            w * breg.abs() * expo.exp()
        })
        .collect();
    let norm = (2.0 * std::f64::consts::PI).powf(d as f64 / 2.0);
    let out = pairwise_sum(&vals) * h.powi(d as i32) / norm;
    if out.is_finite() {
        Ok(out)
    } else {
        Err(Error::Domain { point: x0.iter().copied().collect() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IsOptions {
    pub inflation: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for IsOptions {
    fn default() -> Self {
        Self { inflation: 1.2, samples: 100_000, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsResult {
    pub mean: Vec<f64>,
    pub mean_stderr: Vec<f64>,
    pub ess: f64,
    pub samples: usize,
    pub tail_mass: Measured,
    pub mean_shift: Measured,
    pub ball_radii: Vec<f64>,
    pub ball_prob_posterior: Vec<f64>,
    pub ball_prob_gaussian: Vec<f64>,
    pub ball_discrepancy: Measured,
}

/// Self-normalized importance sampling from `N(x*, inflation²·D_G^{-2})`.
pub fn posterior_functionals_is(f: &(impl Objective<f64> + ?Sized), geom: &LocalGeometry<f64>, opts: &IsOptions) -> Result<IsResult> {
    if !(opts.inflation >= 1.0) {
        return Err(Error::PreconditionViolated("proposal inflation must be at least 1".into()));
    }
    let mut m = opts.samples.max(2);
    let mut last = Err(Error::DegenerateWeights(0.0));
    for _ in 0..4 {
        last = is_once(f, geom, opts.inflation, m, opts.seed);
        match last {
            Err(Error::DegenerateWeights(_)) => m *= 2,
            _ => return last,
        }
    }
    last
}

fn is_once(f: &(impl Objective<f64> + ?Sized), geom: &LocalGeometry<f64>, inflation: f64, m: usize, seed: u64) -> Result<IsResult> {
    let p = geom.dim();
    let (ch, _) = crate::linalg::cholesky_jitter(&geom.pair.dg2)?;
    let t = ch.l().transpose().try_inverse().ok_or(Error::SingularPrecision)?;
    let z = normal_block(seed, "verify/is", m, p);
    let zg = normal_block(seed, "verify/is-reference", m, p);
    let draws: Vec<(Vector<f64>, f64, f64)> = (0..m)
        .into_par_iter()
        .map(|i| {
            let zi = Vector::from_row_slice(&z[i * p..(i + 1) * p]);
            let u = &t * &zi * inflation;
            let x = &geom.center + &u;
            (u, f.value(&x) + 0.5 * zi.norm_squared(), inflation * zi.norm())
        })
        .collect();
    if let Some(d) = draws.iter().find(|d| d.1.is_nan()) {
        return Err(Error::Domain { point: (&geom.center + &d.0).iter().copied().collect() });
    }
    let logs: Vec<f64> = draws.iter().map(|d| d.1).collect();
    let lz = log_sum_exp(&logs);
    let w: Vec<f64> = logs.iter().map(|l| (l - lz).exp()).collect();
    let ess = 1.0 / pairwise_sum(&w.iter().map(|v| v * v).collect::<Vec<_>>());
    if !(ess >= 50.0) {
        return Err(Error::DegenerateWeights(ess));
    }
    let weighted = |g: &dyn Fn(usize) -> f64| -> Measured {
        let vals: Vec<f64> = (0..m).map(|i| w[i] * g(i)).collect();
        let est = pairwise_sum(&vals);
        let var: Vec<f64> = (0..m).map(|i| w[i] * w[i] * (g(i) - est).powi(2)).collect();
        Measured { value: est, error: pairwise_sum(&var).sqrt() }
    };
    let mut mean = Vec::with_capacity(p);
    let mut mean_se = Vec::with_capacity(p);
    for j in 0..p {
        let r = weighted(&|i| draws[i].0[j]);
        mean.push(geom.center[j] + r.value);
        mean_se.push(r.error);
    }
    let shift_vec = Vector::from_iterator(p, (0..p).map(|j| mean[j] - geom.center[j]));
    let shift = (&geom.d * &shift_vec).norm();
    let dse = Vector::from_vec(mean_se.clone());
    let shift_err = (&geom.d * dse).norm();
    let tail = weighted(&|i| if geom.d_norm(&draws[i].0) > geom.local_radius { 1.0 } else { 0.0 });

    let mut gauss_r: Vec<f64> = (0..m).map(|i| Vector::from_row_slice(&zg[i * p..(i + 1) * p]).norm()).collect();
    gauss_r.sort_by(|a, b| a.total_cmp(b));
    let r_max = gauss_r[(m as f64 * 0.999) as usize].max(1e-12);
    let radii: Vec<f64> = (1..=64).map(|j| r_max * j as f64 / 64.0).collect();
    let mut post_probs = Vec::with_capacity(64);
    let mut gauss_probs = Vec::with_capacity(64);
    let mut disc = Measured { value: 0.0, error: 0.0 };
    for &r in &radii {
        let pp = weighted(&|i| if draws[i].2 <= r { 1.0 } else { 0.0 });
        let gp = gauss_r.partition_point(|&v| v <= r) as f64 / m as f64;
        let g_se = (gp * (1.0 - gp) / m as f64).sqrt();
        post_probs.push(pp.value);
        gauss_probs.push(gp);
        let d = (pp.value - gp).abs();
        if d > disc.value {
            disc = Measured { value: d, error: (pp.error * pp.error + g_se * g_se).sqrt() };
        }
    }
    Ok(IsResult {
        mean,
        mean_stderr: mean_se,
        ess,
        samples: m,
        tail_mass: tail,
        mean_shift: Measured { value: shift, error: shift_err },
        ball_radii: radii,
        ball_prob_posterior: post_probs,
        ball_prob_gaussian: gauss_probs,
        ball_discrepancy: disc,
    })
}

impl From<&IsResult> for Empirical {
    fn from(r: &IsResult) -> Self {
        Empirical {
            tv: None,
            ball_discrepancy: Some(r.ball_discrepancy),
            kl_forward: None,
            kl_reverse: None,
            tail_mass: Some(r.tail_mass),
            mean_shift: Some(r.mean_shift),
            mean: Some(r.mean.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoundnessRow {
    pub name: String,
    pub empirical: Option<f64>,
    pub error: Option<f64>,
    pub bound: Option<f64>,
    /// All gates of the bound hold, so the row is a test of the bound.
    pub gate_valid: bool,
    /// `empirical ≤ bound + 4·error`.
    pub holds: bool,
    /// `bound / max(empirical, 1e-12)`.
    pub slack_ratio: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoundnessReport {
    pub model_id: String,
    pub rows: Vec<SoundnessRow>,
    /// Every gated row with both sides present holds.
    pub all_hold: bool,
}

impl SoundnessReport {
    pub fn row(&self, name: &str) -> Option<&SoundnessRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Marks a row as not a test of its bound and recomputes `all_hold`.
    pub fn exclude(&mut self, name: &str, note: &str) {
        for r in self.rows.iter_mut().filter(|r| r.name == name) {
            r.gate_valid = false;
            r.note = Some(note.to_string());
        }
        self.all_hold = self.rows.iter().filter(|r| r.gate_valid).all(|r| r.holds);
    }

    /// Flat CSV with columns
    /// `name,empirical,error,bound,gate_valid,holds,slack_ratio`.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
        let mut s = String::from("name,empirical,error,bound,gate_valid,holds,slack_ratio\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.name,
                opt(r.empirical),
                opt(r.error),
                opt(r.bound),
                r.gate_valid,
                r.holds,
                opt(r.slack_ratio)
            ));
        }
        s
    }
}

fn make_row(name: &str, emp: Option<Measured>, bound: Option<f64>, gate_valid: bool) -> SoundnessRow {
    let note = match (&emp, &bound) {
        (None, _) => Some("missing empirical counterpart".to_string()),
        (_, None) => Some("bound not available".to_string()),
        _ => None,
    };
    let (holds, slack) = match (emp, bound) {
        (Some(e), Some(b)) => (e.value.is_finite() && e.value <= b + 4.0 * e.error, Some(b / e.value.max(1e-12))),
        _ => (true, None),
    };
    SoundnessRow {
        name: name.to_string(),
        empirical: emp.map(|e| e.value),
        error: emp.map(|e| e.error),
        bound,
        gate_valid: gate_valid && emp.is_some() && bound.is_some(),
        holds,
        slack_ratio: slack,
        note,
    }
}

/// Pairs each certificate bound with its empirical counterpart.
pub fn soundness_report(cert: &LaplaceCertificate, emp: &Empirical) -> SoundnessReport {
    let g = |name: &str| cert.gates.get(name).is_none_or(|r| r.holds);
    let omega_pg = g("omega_pg");
    let sc_ok = g("c3_rg");
    let gated = |v: Option<Gated>, extra: bool| (v.map(|x| x.bound), v.is_some_and(|x| x.gate) && extra);
    let b = &cert.bounds;
    let mut rows = Vec::new();
    let (v, ok) = gated(b.tv_diamond2, omega_pg);
    rows.push(make_row("tv_diamond2", emp.tv, v, ok));
    let (v, ok) = gated(b.tv_diamond3, omega_pg);
    rows.push(make_row("tv_diamond3", emp.tv, v, ok));
    let (v, ok) = gated(b.tv_sc, sc_ok);
    rows.push(make_row("tv_sc", emp.tv, v, ok));
    let (v, ok) = gated(Some(b.tv_bound_all_sets), true);
    rows.push(make_row("tv_all_sets", emp.tv, v, ok));
    let (v, ok) = gated(b.tv_bound_symmetric_sets, sc_ok);
    rows.push(make_row("tv_symmetric_sets", emp.ball_discrepancy, v, ok));
    let (v, ok) = gated(b.kl_forward, omega_pg);
    rows.push(make_row("kl_forward", emp.kl_forward, v, ok));
    rows.push(make_row("kl_reverse", emp.kl_reverse, b.kl_reverse, omega_pg && sc_ok));
    rows.push(make_row("concentration", emp.tail_mass, Some(b.concentration.coarse), omega_pg));
    rows.push(make_row("mean_shift", emp.mean_shift, b.mean_shift, sc_ok && omega_pg));
    let all_hold = rows.iter().filter(|r| r.gate_valid).all(|r| r.holds);
    SoundnessReport { model_id: cert.meta.model_id.clone(), rows, all_hold }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FnObjective;

    fn std_normal_1d() -> FnObjective<f64> {
        FnObjective::new(1, |x: &Vector<f64>| -0.5 * x[0] * x[0])
    }

    #[test]
    fn normalizer_and_self_tv() {
        let f = std_normal_1d();
        let one = Matrix::identity(1, 1);
        let gp = grid_posterior(&f, &Vector::zeros(1), &one, &GridOptions::default(), None).unwrap();
        let z = gp.log_normalizer - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!(z.abs() < 1e-8);
        let tv = tv_grid(&gp, &Vector::zeros(1), &one).unwrap();
        assert!(tv.value < 1e-8);
    }

    #[test]
    fn shifted_normal_tv_and_kl() {
        let f = std_normal_1d();
        let one = Matrix::identity(1, 1);
        let opts = GridOptions { box_sigmas: 10.0, resolution: Some(8001) };
        let gp = grid_posterior(&f, &Vector::zeros(1), &one, &opts, None).unwrap();
        let tv = tv_grid(&gp, &Vector::from_vec(vec![0.5]), &one).unwrap();
        assert!((tv.value - 0.197_412_6).abs() < 1e-4, "{}", tv.value);
        let (kf, kr) = kl_grid(&gp, &Vector::from_vec(vec![1.0]), &one).unwrap();
        assert!((kf.value - 0.5).abs() < 1e-4);
        assert!((kr.value - 0.5).abs() < 1e-3);
    }

    #[test]
    fn box_too_small_is_reported() {
        let f = FnObjective::new(1, |x: &Vector<f64>| -0.5 * x[0] * x[0] / 100.0);
        let r = grid_posterior(&f, &Vector::zeros(1), &Matrix::identity(1, 1), &GridOptions::default(), None);
        assert!(matches!(r, Err(Error::BoxTooSmall(_))));
    }

    #[test]
    fn grid_too_large() {
        let f = FnObjective::new(3, |x: &Vector<f64>| -0.5 * x.norm_squared());
        let opts = GridOptions { box_sigmas: 8.0, resolution: Some(301) };
        assert!(matches!(grid_posterior(&f, &Vector::zeros(3), &Matrix::identity(3, 3), &opts, None), Err(Error::GridTooLarge(_))));
    }

    #[test]
    fn univariate_error_oracles() {
        // exact quadratic: no error at all
        let e = univariate_local_error(&std_normal_1d(), 0.0, 5.0, 2000).unwrap();
        assert!(e.all_g.value < 1e-15 && e.even_g.value < 1e-15);
        // f = −u²/2 + a·u: f(0;u) = −u²/2 exactly, so the error vanishes too
        let lin = FnObjective::new(1, |x: &Vector<f64>| -0.5 * x[0] * x[0] + 0.3 * x[0]);
        assert!(univariate_local_error(&lin, 0.0, 5.0, 2000).unwrap().all_g.value < 1e-12);
        let wide = FnObjective::new(1, |x: &Vector<f64>| -0.25 * x[0] * x[0]);
        let e = univariate_local_error(&wide, 0.0, 40.0, 40000).unwrap();
        assert!((e.dd - 0.5f64.sqrt()).abs() < 1e-6 && e.all_g.value < 1e-9);
        // small cubic term: leading orders |c|·E|γ|³/6 and c²·Eγ⁶/72
        let c = 1e-3;
        let cubic = FnObjective::new(1, move |x: &Vector<f64>| -0.5 * x[0] * x[0] - c * x[0].powi(3) / 6.0);
        let e = univariate_local_error(&cubic, 0.0, 12.0, 24000).unwrap();
        let abs3 = 2.0 * (2.0 / std::f64::consts::PI).sqrt();
        assert!((e.all_g.value / (c * abs3 / 6.0) - 1.0).abs() < 1e-2, "{}", e.all_g.value);
        assert!((e.even_g.value / (c * c * 15.0 / 72.0) - 1.0).abs() < 1e-2, "{}", e.even_g.value);
        assert!(matches!(univariate_local_error(&wide, 0.0, 5.0, 7), Err(Error::PreconditionViolated(_))));
    }
}
