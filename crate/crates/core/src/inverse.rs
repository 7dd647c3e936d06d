//! Nonlinear inverse problems `z = m(x) + ε` with a Gaussian prior: Fisher
//! curvature, the prior concentration set `X₀`, sampled regularity constants
//! and the conditional certificate.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certificate::{build_certificate, CertificateInput, CertificateOptions, Grade, LaplaceCertificate};
use crate::error::{Error, Result};
use crate::geometry::{concentration_radius, gaussian_ball_radius, sample_precision_factor, LocalGeometry};
use crate::linalg::{
    cholesky_jitter, max_generalized_eigenvalue, min_generalized_eigenvalue, pairwise_sum, quad_form, sym_sqrt, Matrix, Vector,
};
use crate::model::{fd_directional, fd_hessian, penalize, Objective, PenalizedObjective};
use crate::models::sigmoid;
use crate::remainder::{estimate_remainders, ConcordanceSource, RemainderReport, ScanOptions, SelfConcordance};
use crate::rng::{normal_block, stream, uniform_block};
use crate::solver::{find_map, maximize, MapResult, SolverOptions};

/// Componentwise forward map `m = (m_1, …, m_n)`.
pub trait ForwardMap: Send + Sync {
    fn p(&self) -> usize;
    fn n(&self) -> usize;
    fn component(&self, i: usize, x: &Vector<f64>) -> f64;
    fn component_grad(&self, i: usize, x: &Vector<f64>) -> Vector<f64>;

    fn component_hess(&self, _i: usize, _x: &Vector<f64>) -> Option<Matrix<f64>> {
        None
    }

    /// `⟨∇ᵏm_i(x), u^⊗k⟩` for `k ∈ {2, 3, 4}`.
    fn component_directional(&self, _i: usize, _x: &Vector<f64>, _u: &Vector<f64>, _order: usize) -> Option<f64> {
        None
    }
}

struct Component<'a, M: ?Sized> {
    map: &'a M,
    i: usize,
}

impl<M: ForwardMap + ?Sized> Objective<f64> for Component<'_, M> {
    fn dim(&self) -> usize {
        self.map.p()
    }
    fn value(&self, x: &Vector<f64>) -> f64 {
        self.map.component(self.i, x)
    }
    fn analytic_gradient(&self, x: &Vector<f64>) -> Option<Vector<f64>> {
        Some(self.map.component_grad(self.i, x))
    }
}

fn comp_hess<M: ForwardMap + ?Sized>(m: &M, i: usize, x: &Vector<f64>) -> Result<Matrix<f64>> {
    match m.component_hess(i, x) {
        Some(h) => Ok(h),
        None => fd_hessian(&Component { map: m, i }, x),
    }
}

/// `⟨∇ᵏm_i(x), u^⊗k⟩`, `k ∈ {1, …, 4}`.
fn comp_dir<M: ForwardMap + ?Sized>(m: &M, i: usize, x: &Vector<f64>, u: &Vector<f64>, k: usize) -> Result<f64> {
    if k == 1 {
        return Ok(m.component_grad(i, x).dot(u));
    }
    if let Some(v) = m.component_directional(i, x, u, k) {
        return Ok(v);
    }
    match k {
        2 => Ok(quad_form(&comp_hess(m, i, x)?, u)),
        3 | 4 => fd_directional(&Component { map: m, i }, x, u, k),
        _ => Err(Error::UnsupportedOrder(k)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Link {
    Linear,
    Exp,
    Sigmoid,
}

impl Link {
    /// `φ⁽ᵏ⁾(s)` for `k ≤ 4`.
    pub fn derivative(self, s: f64, k: usize) -> f64 {
        match self {
            Link::Linear => match k {
                0 => s,
                1 => 1.0,
                _ => 0.0,
            },
            Link::Exp => s.exp(),
            Link::Sigmoid => {
                let g = sigmoid(s);
                let d1 = g * (1.0 - g);
                match k {
                    0 => g,
                    1 => d1,
                    2 => d1 * (1.0 - 2.0 * g),
                    3 => d1 * (1.0 - 6.0 * g + 6.0 * g * g),
                    _ => d1 * (1.0 - 2.0 * g) * (1.0 - 12.0 * g + 12.0 * g * g),
                }
            }
        }
    }
}

/// `m_i(x) = φ(⟨a_i, x⟩)` with rows `a_i` of `design`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SingleIndexMap {
    pub design: Matrix<f64>,
    pub link: Link,
}

impl SingleIndexMap {
    fn score(&self, i: usize, x: &Vector<f64>) -> f64 {
        self.design.row(i).transpose().dot(x)
    }
}

impl ForwardMap for SingleIndexMap {
    fn p(&self) -> usize {
        self.design.ncols()
    }
    fn n(&self) -> usize {
        self.design.nrows()
    }
    fn component(&self, i: usize, x: &Vector<f64>) -> f64 {
        self.link.derivative(self.score(i, x), 0)
    }
    fn component_grad(&self, i: usize, x: &Vector<f64>) -> Vector<f64> {
        self.design.row(i).transpose() * self.link.derivative(self.score(i, x), 1)
    }
    fn component_hess(&self, i: usize, x: &Vector<f64>) -> Option<Matrix<f64>> {
        let a = self.design.row(i).transpose();
        Some(&a * a.transpose() * self.link.derivative(self.score(i, x), 2))
    }
    fn component_directional(&self, i: usize, x: &Vector<f64>, u: &Vector<f64>, order: usize) -> Option<f64> {
        let v = self.design.row(i).transpose().dot(u);
        Some(self.link.derivative(self.score(i, x), order) * v.powi(order as i32))
    }
}

/// Data, prior and deviation level of an inverse problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InverseProblem<M> {
    pub forward: M,
    pub data: Vector<f64>,
    pub prior_mean: Vector<f64>,
    pub prior_precision: Matrix<f64>,
    pub deviation_x: f64,
}

impl<M: ForwardMap> InverseProblem<M> {
    pub fn new(forward: M, data: Vector<f64>, prior_mean: Vector<f64>, prior_precision: Matrix<f64>, deviation_x: f64) -> Result<Self> {
        let (p, n) = (forward.p(), forward.n());
        if n == 0 {
            return Err(Error::PreconditionViolated("forward map needs at least one component".into()));
        }
        if data.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: data.len() });
        }
        if prior_mean.len() != p {
            return Err(Error::DimensionMismatch { expected: p, got: prior_mean.len() });
        }
        if prior_precision.shape() != (p, p) {
            return Err(Error::DimensionMismatch { expected: p, got: prior_precision.nrows() });
        }
        Ok(Self { forward, data, prior_mean, prior_precision, deviation_x })
    }

    pub fn p(&self) -> usize {
        self.forward.p()
    }

    pub fn n(&self) -> usize {
        self.forward.n()
    }

    fn residuals(&self, x: &Vector<f64>) -> Vec<f64> {
        (0..self.n()).map(|i| self.forward.component(i, x) - self.data[i]).collect()
    }

    /// `−½‖z − m(x)‖²`.
    pub fn loss(&self, x: &Vector<f64>) -> Result<f64> {
        let sq: Vec<f64> = self.residuals(x).iter().map(|r| r * r).collect();
        let v = -0.5 * pairwise_sum(&sq);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Domain { point: x.iter().copied().collect() })
        }
    }

    /// `D̆²(x) = Σ ∇m_i ∇m_iᵀ`.
    pub fn breve_d2(&self, x: &Vector<f64>) -> Result<Matrix<f64>> {
        let p = self.p();
        let mut out = Matrix::zeros(p, p);
        for i in 0..self.n() {
            let g = self.forward.component_grad(i, x);
            out += &g * g.transpose();
        }
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(Error::Domain { point: x.iter().copied().collect() })
        }
    }

    /// `F(x) = D̆²(x) + Σ (m_i − z_i) ∇²m_i(x) = −∇²ℓ(x)`.
    pub fn fisher(&self, x: &Vector<f64>) -> Result<Matrix<f64>> {
        let mut f = self.breve_d2(x)?;
        for (i, r) in self.residuals(x).into_iter().enumerate() {
            if r != 0.0 {
                f += comp_hess(&self.forward, i, x)? * r;
            }
        }
        Ok(f)
    }

    /// `Q = D̆(x₀)`.
    pub fn x0_operator(&self) -> Result<Matrix<f64>> {
        Ok(sym_sqrt(&self.breve_d2(&self.prior_mean)?))
    }

    /// `r₀ = √tr(Q G^{-2} Q) + √(2x‖Q G^{-2} Q‖)`.
    pub fn x0_radius(&self) -> Result<f64> {
        let q = self.x0_operator()?;
        let (ch, _) = cholesky_jitter(&self.prior_precision)?;
        let b = &q * ch.inverse() * &q;
        Ok(gaussian_ball_radius(&b, self.deviation_x))
    }

    /// `‖Q(x − x₀)‖ ≤ r₀` with a relative tolerance of `1e-12`.
    pub fn in_x0(&self, q: &Matrix<f64>, r0: f64, x: &Vector<f64>) -> bool {
        (q * (x - &self.prior_mean)).norm() <= r0 * (1.0 + 1e-12)
    }

    /// Penalized objective `ℓ − ½‖G(x − x₀)‖²` with sample size `n`.
    pub fn penalized(&self) -> Result<PenalizedObjective<f64, &Self>> {
        Ok(penalize(self, self.prior_precision.clone(), self.prior_mean.clone())?.with_sample_size(self.n() as f64))
    }

    /// Prior draws `N(x₀, G^{-2})` kept only inside `X₀`; fails after 100×
    /// oversampling.
    pub fn sample_prior_in_x0(&self, count: usize, seed: u64) -> Result<Vec<Vector<f64>>> {
        let q = self.x0_operator()?;
        let r0 = self.x0_radius()?;
        let (ch, _) = cholesky_jitter(&self.prior_precision)?;
        let l = ch.l();
        let mut out = Vec::with_capacity(count);
        let mut batch = 0u64;
        let cap = 100 * count.max(1);
        let mut drawn = 0;
        while out.len() < count {
            if drawn >= cap {
                return Err(Error::AllDrawsRejected);
            }
            let m = count.max(16);
            let draws = sample_precision_factor(&l, m, crate::rng::derive_seed(seed, "inverse/prior", batch), "inverse/prior")?;
            batch += 1;
            drawn += m;
            for r in 0..m {
                let x = &self.prior_mean + draws.row(r).transpose();
                if self.in_x0(&q, r0, &x) && out.len() < count {
                    out.push(x);
                }
            }
        }
        Ok(out)
    }

    /// Monte Carlo `P(prior draw ∉ X₀)` and its standard error.
    pub fn prior_mass_outside_x0(&self, count: usize, seed: u64) -> Result<(f64, f64)> {
        let q = self.x0_operator()?;
        let r0 = self.x0_radius()?;
        let (ch, _) = cholesky_jitter(&self.prior_precision)?;
        let draws = sample_precision_factor(&ch.l(), count, seed, "inverse/prior-mass")?;
        let outside = (0..count).into_par_iter().filter(|&r| (&q * draws.row(r).transpose()).norm() > r0 * (1.0 + 1e-12)).count();
        let freq = outside as f64 / count as f64;
        Ok((freq, (freq * (1.0 - freq) / count as f64).sqrt()))
    }
}

impl<M: ForwardMap> Objective<f64> for InverseProblem<M> {
    fn dim(&self) -> usize {
        self.p()
    }
    fn value(&self, x: &Vector<f64>) -> f64 {
        self.loss(x).unwrap_or(f64::NAN)
    }
    fn analytic_gradient(&self, x: &Vector<f64>) -> Option<Vector<f64>> {
        let mut g = Vector::zeros(self.p());
        for (i, r) in self.residuals(x).into_iter().enumerate() {
            g -= self.forward.component_grad(i, x) * r;
        }
        Some(g)
    }
    fn analytic_hessian(&self, x: &Vector<f64>) -> Option<Matrix<f64>> {
        self.fisher(x).ok().map(|f| -f)
    }
    fn analytic_directional(&self, x: &Vector<f64>, u: &Vector<f64>, order: usize) -> Option<f64> {
        if !(order == 3 || order == 4) {
            return None;
        }
        let terms: Result<Vec<f64>> = (0..self.n())
            .map(|i| {
                let r = self.forward.component(i, x) - self.data[i];
                let d1 = comp_dir(&self.forward, i, x, u, 1)?;
                let d2 = comp_dir(&self.forward, i, x, u, 2)?;
                let d3 = comp_dir(&self.forward, i, x, u, 3)?;
                Ok(if order == 3 {
                    -(3.0 * d1 * d2 + r * d3)
                } else {
                    let d4 = comp_dir(&self.forward, i, x, u, 4)?;
                    -(3.0 * d2 * d2 + 4.0 * d1 * d3 + r * d4)
                })
            })
            .collect();
        terms.ok().map(|t| pairwise_sum(&t))
    }
    fn gauss_newton_curvature(&self, x: &Vector<f64>) -> Option<Matrix<f64>> {
        self.breve_d2(x).ok()
    }
}

/// Uniform draws from the ellipsoid `{‖Q(x − c)‖ ≤ r}`.
pub fn sample_ellipsoid(center: &Vector<f64>, q: &Matrix<f64>, r: f64, count: usize, seed: u64, tag: &str) -> Result<Vec<Vector<f64>>> {
    let p = center.len();
    let qinv = q.clone().try_inverse().ok_or(Error::SingularPrecision)?;
    let z = normal_block(seed, tag, count, p);
    let u = uniform_block(seed, &format!("{tag}/radius"), count, 1);
    Ok((0..count)
        .map(|k| {
            let zk = Vector::from_row_slice(&z[k * p..(k + 1) * p]);
            let rad = r * u[k].powf(1.0 / p as f64);
            center + &qinv * (zk.normalize() * rad)
        })
        .collect())
}

fn unit_directions(p: usize, count: usize, seed: u64, tag: &str) -> Vec<Vector<f64>> {
    let z = normal_block(seed, tag, count, p);
    (0..count).map(|k| Vector::from_row_slice(&z[k * p..(k + 1) * p]).normalize()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstantOptions {
    pub n_points: usize,
    pub n_dirs: usize,
    pub seed: u64,
}

impl Default for ConstantOptions {
    fn default() -> Self {
        Self { n_points: 256, n_dirs: 256, seed: 0 }
    }
}

/// Sampled regularity constants of the forward map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularityConstants {
    pub c2_hat: f64,
    pub cn_hat: f64,
    pub c0_hat: f64,
    pub cg_hat: f64,
    pub c3_hat: f64,
    pub c4_hat: Option<f64>,
    pub rho0: f64,
    pub r0: f64,
    pub delta: f64,
    pub n: f64,
    pub samples: usize,
    pub directions: usize,
    pub skipped_directions: usize,
    pub seed: u64,
    pub is_sup_estimate: bool,
}

impl RegularityConstants {
    /// `δ = C₂(ρ₀ + 2r₀CₙC₀/√n)`.
    pub fn recompute_delta(&self) -> f64 {
        self.c2_hat * (self.rho0 + 2.0 * self.r0 * self.cn_hat * self.c0_hat / self.n.sqrt())
    }
}

/// Vicinity `{‖D̆(x*)(x − x*)‖ ≤ radius}` of the penalized optimum.
pub struct Vicinity {
    pub center: Vector<f64>,
    pub breve_d2: Matrix<f64>,
    pub radius: f64,
}

impl Vicinity {
    /// Radius `2r_G` around the optimum.
    pub fn around_map<M: ForwardMap>(problem: &InverseProblem<M>, map: &MapResult<f64>) -> Result<Self> {
        let pair = map.pair()?;
        let p_g = crate::geometry::effective_dimension(&pair);
        Ok(Self {
            center: map.x_star.clone(),
            breve_d2: problem.breve_d2(&map.x_star)?,
            radius: 2.0 * concentration_radius(p_g, problem.deviation_x),
        })
    }
}

#[derive(Default, Clone, Copy)]
struct Maxes {
    c2: f64,
    cn: f64,
    c0: f64,
    cg: f64,
    c3: f64,
    c4: f64,
    skipped: usize,
    total: usize,
}

impl Maxes {
    fn merge(self, o: Self) -> Self {
        Self {
            c2: self.c2.max(o.c2),
            cn: self.cn.max(o.cn),
            c0: self.c0.max(o.c0),
            cg: self.cg.max(o.cg),
            c3: self.c3.max(o.c3),
            c4: self.c4.max(o.c4),
            skipped: self.skipped + o.skipped,
            total: self.total + o.total,
        }
    }
}

const DEGENERATE: f64 = 1e-14;

/// Sampled suprema: `C₂`, `Cₙ`, `C₀` over `X₀` (uniform draws plus `x₀`),
/// `C_G`, `C₃`, `C₄` over the vicinity of the optimum, directions on the
/// Euclidean sphere. The fourth-order ratios use exponent 4 throughout.
pub fn estimate_constants<M: ForwardMap>(
    problem: &InverseProblem<M>,
    vicinity: &Vicinity,
    rho0: f64,
    opts: &ConstantOptions,
) -> Result<RegularityConstants> {
    if opts.n_points < 32 || opts.n_dirs < 32 {
        return Err(Error::PreconditionViolated("n_points and n_dirs must be at least 32".into()));
    }
    let p = problem.p();
    let n = problem.n();
    let fm = &problem.forward;
    let q = problem.x0_operator()?;
    let r0 = problem.x0_radius()?;
    let d0 = q.clone() * &q;
    let mut x0_pts = vec![problem.prior_mean.clone()];
    x0_pts.extend(sample_ellipsoid(&problem.prior_mean, &q, r0, opts.n_points, opts.seed, "inverse/x0-points")?);
    let vq = sym_sqrt(&vicinity.breve_d2);
    let mut v_pts = vec![vicinity.center.clone()];
    v_pts.extend(sample_ellipsoid(&vicinity.center, &vq, vicinity.radius, opts.n_points, opts.seed, "inverse/vicinity-points")?);
    let dirs = unit_directions(p, opts.n_dirs, opts.seed, "inverse/directions");

    let over_x0 = x0_pts
        .par_iter()
        .map(|x| -> Result<Maxes> {
            let mut m = Maxes::default();
            let bd2 = problem.breve_d2(x)?;
            let (ch, _) = cholesky_jitter(&bd2)?;
            for i in 0..n {
                let g = fm.component_grad(i, x);
                m.cn = m.cn.max((n as f64 * g.dot(&ch.solve(&g))).sqrt());
            }
            m.c0 = max_generalized_eigenvalue(&bd2, &d0)?.max(0.0).sqrt();
            for u in &dirs {
                m.total += 1;
                let mut num = Vec::with_capacity(n);
                let mut den = Vec::with_capacity(n);
                for i in 0..n {
                    num.push(comp_dir(fm, i, x, u, 2)?.abs());
                    den.push(comp_dir(fm, i, x, u, 1)?.powi(2));
                }
                let dd = pairwise_sum(&den);
                if dd < DEGENERATE {
                    m.skipped += 1;
                    continue;
                }
                m.c2 = m.c2.max(pairwise_sum(&num) / dd);
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(Maxes::default(), Maxes::merge);

    let over_vicinity = v_pts
        .par_iter()
        .map(|x| -> Result<Maxes> {
            let mut m = Maxes::default();
            m.cg = max_generalized_eigenvalue(&problem.breve_d2(x)?, &vicinity.breve_d2)?.max(0.0);
            for u in &dirs {
                m.total += 1;
                let mut d = [Vec::with_capacity(n), Vec::new(), Vec::new(), Vec::new()];
                for i in 0..n {
                    for (k, slot) in d.iter_mut().enumerate() {
                        slot.push(comp_dir(fm, i, x, u, k + 1)?);
                    }
                }
                let s = |f: &dyn Fn(usize) -> f64| pairwise_sum(&(0..n).map(f).collect::<Vec<_>>());
                let cube = s(&|i| d[0][i].abs().powi(3));
                let quart = s(&|i| d[0][i].powi(4));
                if s(&|i| d[0][i] * d[0][i]) < DEGENERATE || cube <= 0.0 || quart <= 0.0 {
                    m.skipped += 1;
                    continue;
                }
                let r3a = s(&|i| d[2][i].abs()) / cube;
                let r3b = s(&|i| (d[0][i] * d[1][i]).abs()) / cube;
                m.c3 = m.c3.max(r3a).max(r3b);
                let r4a = s(&|i| d[3][i].abs()) / quart;
                let r4b = s(&|i| (d[0][i] * d[2][i]).abs()) / quart;
                let r4c = s(&|i| d[1][i] * d[1][i]) / quart;
                m.c4 = m.c4.max(r4a).max(r4b).max(r4c);
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(Maxes::default(), Maxes::merge);

    let all = over_x0.merge(over_vicinity);
    if all.skipped * 10 > all.total {
        return Err(Error::RankDeficientForwardMap { skipped: all.skipped, total: all.total });
    }
    let mut c = RegularityConstants {
        c2_hat: over_x0.c2,
        cn_hat: over_x0.cn,
        c0_hat: over_x0.c0.max(1.0),
        cg_hat: over_vicinity.cg,
        c3_hat: over_vicinity.c3,
        c4_hat: Some(over_vicinity.c4),
        rho0,
        r0,
        delta: 0.0,
        n: n as f64,
        samples: x0_pts.len() + v_pts.len(),
        directions: dirs.len(),
        skipped_directions: all.skipped,
        seed: opts.seed,
        is_sup_estimate: true,
    };
    c.delta = c.recompute_delta();
    Ok(c)
}

/// `T · log Σ (e^{r_i/T} + e^{−r_i/T})`, a smooth upper bound of `max|r_i|`.
fn soft_abs_max(r: &[f64], t: f64) -> (f64, Vec<f64>) {
    let logs: Vec<f64> = r.iter().flat_map(|&v| [v / t, -v / t]).collect();
    let lse = crate::linalg::log_sum_exp(&logs);
    let w: Vec<f64> = r.iter().map(|&v| ((v / t - lse).exp()) - ((-v / t - lse).exp())).collect();
    (t * lse, w)
}

struct SoftObjective<'a, M> {
    problem: &'a InverseProblem<M>,
    qinv: Matrix<f64>,
    r0: f64,
    t: f64,
}

impl<M: ForwardMap> SoftObjective<'_, M> {
    /// Maps whitened coordinates into `X₀` by radial clamping.
    fn point(&self, v: &Vector<f64>) -> Vector<f64> {
        let nv = v.norm();
        let v = if nv > self.r0 { v * (self.r0 / nv) } else { v.clone() };
        &self.problem.prior_mean + &self.qinv * v
    }
}

impl<M: ForwardMap> Objective<f64> for SoftObjective<'_, M> {
    fn dim(&self) -> usize {
        self.problem.p()
    }
    fn value(&self, v: &Vector<f64>) -> f64 {
        let x = self.point(v);
        let excess = (v.norm() - self.r0).max(0.0);
        -soft_abs_max(&self.problem.residuals(&x), self.t).0 - excess * excess
    }
    fn analytic_gradient(&self, v: &Vector<f64>) -> Option<Vector<f64>> {
        if v.norm() > self.r0 {
            return None;
        }
        let x = self.point(v);
        let (_, w) = soft_abs_max(&self.problem.residuals(&x), self.t);
        let mut g = Vector::zeros(self.dim());
        for (i, wi) in w.iter().enumerate() {
            g -= self.problem.forward.component_grad(i, &x) * *wi;
        }
        Some(self.qinv.transpose() * g)
    }
}

/// Upper estimate of `ρ₀ = inf_{X₀} max_i |m_i(x) − z_i|`: annealed
/// log-sum-exp surrogate followed by a coordinate polish, all iterates kept
/// inside `X₀`. Returns the value and the point attaining it.
pub fn estimate_rho0<M: ForwardMap>(problem: &InverseProblem<M>) -> Result<(f64, Vector<f64>)> {
    let q = problem.x0_operator()?;
    let qinv = q.clone().try_inverse().ok_or(Error::SingularPrecision)?;
    let r0 = problem.x0_radius()?;
    let sup = |x: &Vector<f64>| problem.residuals(x).iter().fold(0.0f64, |a, r| a.max(r.abs()));
    let mut v = Vector::zeros(problem.p());
    let mut t = sup(&problem.prior_mean).max(1e-12) * 0.1;
    let opts = SolverOptions { max_iterations: 100, gradient_tolerance: 1e-12, ..SolverOptions::default() };
    for _ in 0..10 {
        let obj = SoftObjective { problem, qinv: qinv.clone(), r0, t };
        let run = maximize(&obj, &v, &opts)?;
        let cand = obj.point(&run.x);
        if sup(&cand) <= sup(&obj.point(&v)) {
            v = run.x;
        }
        t *= 0.1;
    }
    let clamp = |v: &Vector<f64>| {
        let nv = v.norm();
        if nv > r0 {
            v * (r0 / nv)
        } else {
            v.clone()
        }
    };
    v = clamp(&v);
    let to_x = |v: &Vector<f64>| &problem.prior_mean + &qinv * v;
    let mut best = sup(&to_x(&v));
    let mut step = r0 * 1e-2;
    while step > r0 * 1e-14 {
        let mut improved = false;
        for j in 0..problem.p() {
            for sgn in [1.0, -1.0] {
                let mut w = v.clone();
                w[j] += sgn * step;
                let w = clamp(&w);
                let val = sup(&to_x(&w));
                if val < best {
                    best = val;
                    v = w;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    Ok((best, to_x(&v)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRow {
    pub name: String,
    pub inequality: String,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub rows: Vec<ConditionRow>,
    pub delta: f64,
    pub all_hold: bool,
}

impl ConditionReport {
    pub fn row(&self, name: &str) -> Option<&ConditionRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

fn cond(name: &str, inequality: &str, lhs: f64, rhs: f64) -> ConditionRow {
    ConditionRow { name: name.into(), inequality: inequality.into(), lhs, rhs, holds: lhs <= rhs }
}

/// Radius condition, warm-start condition and the concavity margin `δ`.
pub fn check_conditions(consts: &RegularityConstants, n: f64) -> ConditionReport {
    let rn = 2.0 * consts.cn_hat * consts.c0_hat * consts.c2_hat * consts.r0 / n.sqrt();
    let delta = consts.c2_hat * (consts.rho0 + 2.0 * consts.r0 * consts.cn_hat * consts.c0_hat / n.sqrt());
    let rows = vec![
        cond("r0", "2*Cn*C0*C2*r0/sqrt(n) <= 1/4", rn, 0.25),
        cond("x0", "C2*rho0 <= 1/4", consts.c2_hat * consts.rho0, 0.25),
        cond("delta", "C2*(rho0 + 2*r0*Cn*C0/sqrt(n)) <= 3/4", delta, 0.75),
    ];
    let all_hold = rows.iter().all(|r| r.holds);
    ConditionReport { rows, delta, all_hold }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginReport {
    pub min_generalized_eigenvalue: f64,
    pub threshold: f64,
    pub samples: usize,
    pub holds: bool,
}

/// Smallest generalized eigenvalue of `(F(x), D̆²(x))` over uniform draws in
/// `X₀`, against `1 − δ`.
pub fn concavity_margin_check<M: ForwardMap>(
    problem: &InverseProblem<M>,
    consts: &RegularityConstants,
    n_points: usize,
    seed: u64,
) -> Result<MarginReport> {
    if !(consts.delta < 1.0) {
        return Err(Error::PreconditionViolated("delta must be below 1".into()));
    }
    let q = problem.x0_operator()?;
    let pts = sample_ellipsoid(&problem.prior_mean, &q, consts.r0, n_points, seed, "inverse/margin-points")?;
    let vals = pts
        .par_iter()
        .map(|x| {
            let bd2 = problem.breve_d2(x)?;
            min_generalized_eigenvalue(&problem.fisher(x)?, &bd2).map_err(|_| Error::RankDeficientForwardMap { skipped: 1, total: 1 })
        })
        .collect::<Result<Vec<f64>>>()?;
    let min = vals.into_iter().fold(f64::INFINITY, f64::min);
    let threshold = 1.0 - consts.delta;
    Ok(MarginReport { min_generalized_eigenvalue: min, threshold, samples: n_points, holds: min >= threshold - 1e-8 })
}

/// `c₃ = 4 C_G^{3/2} C₃ Cₙ`, `c₄ = 8 C_G² C₄ Cₙ`.
pub fn nl_self_concordance(consts: &RegularityConstants) -> SelfConcordance {
    SelfConcordance {
        c3: 4.0 * consts.cg_hat.powf(1.5) * consts.c3_hat * consts.cn_hat,
        c4: consts.c4_hat.map(|c4| 8.0 * consts.cg_hat.powi(2) * c4 * consts.cn_hat),
        n: consts.n,
        source: ConcordanceSource::NlConstants,
        is_sup_estimate: consts.is_sup_estimate,
    }
}

pub struct NlCertified {
    pub geometry: LocalGeometry<f64>,
    pub report: RemainderReport,
    pub self_concordance: SelfConcordance,
    pub certificate: LaplaceCertificate,
}

/// Certificate for `P_f(· | X₀)` from the sampled constants. The curvature is
/// `D² = F(x*)`, `D_G² = D² + G²`.
pub fn nl_certificate<M: ForwardMap>(
    model_id: &str,
    problem: &InverseProblem<M>,
    consts: &RegularityConstants,
    map: &MapResult<f64>,
    options: &CertificateOptions,
    scan: &ScanOptions,
) -> Result<NlCertified> {
    map.require_converged()?;
    let q = problem.x0_operator()?;
    if !problem.in_x0(&q, consts.r0, &map.x_star) {
        return Err(Error::CenterOutsideX0);
    }
    let d2 = problem.fisher(&map.x_star)?;
    let pair = crate::geometry::PrecisionPair::from_penalty(d2, &problem.prior_precision)?;
    let geometry = LocalGeometry::new(map.x_star.clone(), pair, options.x, options.nu)?;
    let f = problem.penalized()?;
    let report = estimate_remainders(&f, &geometry, scan)?;
    let sc = nl_self_concordance(consts);
    let mut certificate = build_certificate(&CertificateInput {
        model_id,
        seed: scan.seed,
        map,
        geometry: &geometry,
        report: &report,
        omega_grade: Grade::Estimated,
        self_concordance: Some(&sc),
        options,
    })?;
    certificate.meta.conditional_on_x0 = true;
    if consts.rho0 > 0.0 {
        certificate
            .meta
            .warnings
            .push(format!("rho0 = {:.3e} > 0: the optimum is only checked to lie in X0, the statement assumes rho0 = 0", consts.rho0));
    }
    Ok(NlCertified { geometry, report, self_concordance: sc, certificate })
}

/// Synthetic problem families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Linear,
    Exp,
    Sigmoid,
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Family::Linear),
            "exp" => Ok(Family::Exp),
            "sigmoid" => Ok(Family::Sigmoid),
            other => Err(Error::Config(format!("unknown family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticOptions {
    pub p: usize,
    pub n: usize,
    pub sigma: f64,
    pub seed: u64,
    /// `G² = κ D̆²(x₀)`.
    pub kappa: f64,
    pub deviation_x: f64,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        Self { p: 2, n: 50, sigma: 0.0, seed: 0, kappa: 0.5, deviation_x: crate::geometry::DEFAULT_X }
    }
}

pub struct Synthetic {
    pub problem: InverseProblem<SingleIndexMap>,
    pub truth: Vector<f64>,
}

/// Builds `z = m(x̄) + σε` with `x̄` drawn from the prior restricted to `X₀`.
///
/// For `exp` the rows `a_i` are unit vectors in the positive orthant and
/// `x₀ = 2.5·1`; for `sigmoid` they are uniform on the sphere with `x₀ = 0`;
/// for `linear` they are standard normal.
pub fn synthetic(family: Family, opts: &SyntheticOptions) -> Result<Synthetic> {
    let (p, n) = (opts.p, opts.n);
    if p == 0 || n == 0 {
        return Err(Error::PreconditionViolated("p and n must be positive".into()));
    }
    let raw = normal_block(opts.seed, "inverse/design", n, p);
    let mut design = Matrix::from_row_slice(n, p, &raw);
    let (link, x0) = match family {
        Family::Linear => (Link::Linear, Vector::zeros(p)),
        Family::Exp => {
            for mut row in design.row_iter_mut() {
                row.apply(|v| *v = v.abs());
                let nr = row.norm();
                row /= nr;
            }
            (Link::Exp, Vector::from_element(p, 2.5))
        }
        Family::Sigmoid => {
            for mut row in design.row_iter_mut() {
                let nr = row.norm();
                row /= nr;
            }
            (Link::Sigmoid, Vector::zeros(p))
        }
    };
    let forward = SingleIndexMap { design, link };
    let mut problem = InverseProblem::new(forward, Vector::zeros(n), x0.clone(), Matrix::identity(p, p), opts.deviation_x)?;
    let bd0 = problem.breve_d2(&x0)?;
    problem.prior_precision = bd0 * opts.kappa;
    let truth = problem.sample_prior_in_x0(1, crate::rng::derive_seed(opts.seed, "inverse/truth", 0))?.remove(0);
    let mut rng = stream(opts.seed, "inverse/noise", 0);
    let data = Vector::from_iterator(
        n,
        (0..n).map(|i| {
            let e: f64 = if opts.sigma > 0.0 { rng.sample(rand_distr::StandardNormal) } else { 0.0 };
            problem.forward.component(i, &truth) + opts.sigma * e
        }),
    );
    problem.data = data;
    Ok(Synthetic { problem, truth })
}

/// Everything `invert` produces for one synthetic problem.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InversionSummary {
    pub constants: RegularityConstants,
    pub conditions: ConditionReport,
    /// `None` when `δ ≥ 1`, where the margin statement is void.
    pub margin: Option<MarginReport>,
    pub certificate: LaplaceCertificate,
}

/// Optimum, constants, condition checks, margin check and certificate.
pub fn run_inversion<M: ForwardMap>(
    model_id: &str,
    problem: &InverseProblem<M>,
    consts_opts: &ConstantOptions,
    solver: &SolverOptions,
    options: &CertificateOptions,
) -> Result<(InversionSummary, NlCertified, MapResult<f64>)> {
    let f = problem.penalized()?;
    let map = find_map(&f, &problem.prior_mean, solver)?;
    map.require_converged()?;
    let (rho0, _) = estimate_rho0(problem)?;
    let vic = Vicinity::around_map(problem, &map)?;
    let consts = estimate_constants(problem, &vic, rho0, consts_opts)?;
    let conditions = check_conditions(&consts, problem.n() as f64);
    let margin =
        if consts.delta < 1.0 { Some(concavity_margin_check(problem, &consts, consts_opts.n_points, consts_opts.seed)?) } else { None };
    let scan = ScanOptions { seed: consts_opts.seed, ..ScanOptions::default() };
    let nl = nl_certificate(model_id, problem, &consts, &map, options, &scan)?;
    let summary = InversionSummary { constants: consts, conditions, margin, certificate: nl.certificate.clone() };
    Ok((summary, nl, map))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fd_hessian;

    fn identity_problem(z: f64) -> InverseProblem<SingleIndexMap> {
        let fm = SingleIndexMap { design: Matrix::identity(1, 1), link: Link::Linear };
        InverseProblem::new(fm, Vector::from_vec(vec![z]), Vector::zeros(1), Matrix::identity(1, 1), 2.0).unwrap()
    }

    #[test]
    fn loss_examples() {
        assert_eq!(identity_problem(2.0).loss(&Vector::from_vec(vec![2.0])).unwrap(), 0.0);
        assert_eq!(identity_problem(0.0).loss(&Vector::from_vec(vec![1.0])).unwrap(), -0.5);
    }

    #[test]
    fn breve_d2_rank_one() {
        let fm = SingleIndexMap { design: Matrix::from_row_slice(1, 2, &[1.0, 2.0]), link: Link::Linear };
        let pr = InverseProblem::new(fm, Vector::zeros(1), Vector::zeros(2), Matrix::identity(2, 2), 2.0).unwrap();
        let d = pr.breve_d2(&Vector::zeros(2)).unwrap();
        assert_eq!(d, Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]));
    }

    #[test]
    fn fisher_matches_fd_hessian() {
        let s = synthetic(Family::Exp, &SyntheticOptions { sigma: 0.3, n: 20, ..Default::default() }).unwrap();
        let x = &s.truth + Vector::from_vec(vec![0.01, -0.02]);
        let f = s.problem.fisher(&x).unwrap();
        let h = fd_hessian(&s.problem, &x).unwrap();
        assert!((&f + &h).norm() <= 1e-6 * f.norm(), "{f} vs {h}");
    }

    #[test]
    fn sigmoid_derivatives_match_fd() {
        let fm = SingleIndexMap { design: Matrix::from_row_slice(1, 1, &[1.0]), link: Link::Sigmoid };
        let c = Component { map: &fm, i: 0 };
        let x = Vector::from_vec(vec![0.4]);
        let u = Vector::from_vec(vec![1.0]);
        for k in [3, 4] {
            let a = fm.component_directional(0, &x, &u, k).unwrap();
            let f = fd_directional(&c, &x, &u, k).unwrap();
            assert!((a - f).abs() < 1e-4, "order {k}: {a} vs {f}");
        }
    }

    #[test]
    fn x0_radius_identity_case() {
        // D̆₀ = I, G = I, p = 4, x = 2 → 2 + 2
        let fm = SingleIndexMap { design: Matrix::identity(4, 4), link: Link::Linear };
        let pr = InverseProblem::new(fm, Vector::zeros(4), Vector::zeros(4), Matrix::identity(4, 4), 2.0).unwrap();
        assert!((pr.x0_radius().unwrap() - 4.0).abs() < 1e-12);
        let q = pr.x0_operator().unwrap();
        let edge = Vector::from_vec(vec![4.0, 0.0, 0.0, 0.0]);
        assert!(pr.in_x0(&q, 4.0, &Vector::zeros(4)));
        assert!(pr.in_x0(&q, 4.0, &edge));
        assert!(!pr.in_x0(&q, 4.0, &(edge * 1.01)));
    }

    #[test]
    fn linear_constants_are_trivial() {
        let s = synthetic(Family::Linear, &SyntheticOptions { n: 30, sigma: 0.0, ..Default::default() }).unwrap();
        let f = s.problem.penalized().unwrap();
        let map = find_map(&f, &s.problem.prior_mean, &SolverOptions::default()).unwrap();
        let vic = Vicinity::around_map(&s.problem, &map).unwrap();
        let c = estimate_constants(&s.problem, &vic, 0.0, &ConstantOptions { n_points: 32, n_dirs: 32, seed: 1 }).unwrap();
        assert_eq!(c.c2_hat, 0.0);
        assert_eq!(c.c3_hat, 0.0);
        assert!((c.c0_hat - 1.0).abs() < 1e-9 && (c.cg_hat - 1.0).abs() < 1e-9);
        assert_eq!(c.delta, 0.0);
        let sc = nl_self_concordance(&c);
        assert_eq!(sc.c3, 0.0);
    }

    #[test]
    fn unit_constants_give_four_and_eight() {
        let c = RegularityConstants {
            c2_hat: 1.0,
            cn_hat: 1.0,
            c0_hat: 1.0,
            cg_hat: 1.0,
            c3_hat: 1.0,
            c4_hat: Some(1.0),
            rho0: 0.0,
            r0: 1.0,
            delta: 0.0,
            n: 10.0,
            samples: 0,
            directions: 0,
            skipped_directions: 0,
            seed: 0,
            is_sup_estimate: false,
        };
        let sc = nl_self_concordance(&c);
        assert_eq!((sc.c3, sc.c4), (4.0, Some(8.0)));
    }

    #[test]
    fn rho0_vanishes_on_consistent_data() {
        let s = synthetic(Family::Exp, &SyntheticOptions::default()).unwrap();
        let (rho0, x) = estimate_rho0(&s.problem).unwrap();
        let q = s.problem.x0_operator().unwrap();
        assert!(s.problem.in_x0(&q, s.problem.x0_radius().unwrap(), &x));
        assert!(rho0 < 1e-6, "{rho0}");
    }
}
