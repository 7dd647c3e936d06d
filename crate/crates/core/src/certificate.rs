//! Error terms, tail terms and distance bounds, and their assembly into a
//! serializable [`LaplaceCertificate`].

use std::collections::BTreeMap;
use std::io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{concentration_radius, LocalGeometry};
use crate::linalg::{
    cholesky_jitter, max_eigenvalue, quad_form, sorted_eigenvalues, sym_eigen, sym_inv_sqrt, trace_norm_sym, Matrix, Vector,
};
use crate::model::DerivMethod;
use crate::remainder::{tau_moment_bounds, RemainderReport, SelfConcordance};
use crate::scalar::Real;
use crate::solver::MapResult;

fn check_omega<T: Real>(omega: T) -> Result<()> {
    if omega < T::zero() || omega >= T::one() || !omega.is_finite_value() {
        return Err(Error::OmegaOutOfRange(omega.as_f64()));
    }
    Ok(())
}

/// `◊₂ = 0.75 ω p_G / (1 − ω)`.
pub fn diamond2<T: Real>(omega: T, p_g: T) -> Result<T> {
    check_omega(omega)?;
    Ok(T::lit(0.75) * omega * p_g / (T::one() - omega))
}

/// `◊₃ = E τ₃ / (4(1 − ω)^{3/2})`.
pub fn diamond3<T: Real>(e_tau3: T, omega: T) -> Result<T> {
    check_omega(omega)?;
    Ok(e_tau3 / (T::lit(4.0) * (T::one() - omega).powf(T::lit(1.5))))
}

/// `◊₄ = (E⟨∇³f, γ⊗³⟩² + 2 E τ₄) / (16(1 − ω)²)`.
pub fn diamond4<T: Real>(third_form_sq: T, e_tau4: T, omega: T) -> Result<T> {
    check_omega(omega)?;
    let q = T::one() - omega;
    Ok((third_form_sq + T::lit(2.0) * e_tau4) / (T::lit(16.0) * q * q))
}

/// One-dimensional `◊₃ = 0.7 |f̄⁽³⁾| / 𝔻³`.
pub fn diamond3_univariate<T: Real>(f3bar: T, dd: T) -> T {
    T::lit(0.7) * f3bar.abs() / (dd * dd * dd)
}

/// One-dimensional `◊₄ = {5κ₃²/(12(1−ω)^{7/2}) + κ₄/(4(1−ω)^{5/2})} 𝔻^{-2}`.
pub fn diamond4_univariate<T: Real>(kappa3: T, kappa4: T, omega: T, dd: T) -> Result<T> {
    if omega < T::zero() || omega > T::lit(1.0 / 3.0) {
        return Err(Error::OmegaOutOfRange(omega.as_f64()));
    }
    let q = T::one() - omega;
    let a = T::lit(5.0) * kappa3 * kappa3 / (T::lit(12.0) * q.powf(T::lit(3.5)));
    let b = kappa4 / (T::lit(4.0) * q.powf(T::lit(2.5)));
    Ok((a + b) / (dd * dd))
}

/// A probability-valued bound, raw and clamped to `[0, 1]`, with its gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gated {
    pub raw: f64,
    pub bound: f64,
    pub gate: bool,
}

impl Gated {
    fn prob(raw: f64, gate: bool) -> Self {
        Self { raw, bound: raw.clamp(0.0, 1.0), gate }
    }
}

/// `min(1, 4(◊ + e^{-x}))`, gated on `ω p_G ≤ 2/3`.
pub fn tv_bound(diamond: f64, x: f64, omega: f64, p_g: f64) -> Gated {
    Gated::prob(4.0 * (diamond + (-x).exp()), omega * p_g <= 2.0 / 3.0)
}

fn sc_gate(c3: f64, p_g: f64, n: f64, x: f64) -> bool {
    c3 * concentration_radius(p_g, x) / n.sqrt() <= 0.75
}

/// `2 c₃ √((p_G+1)³/n) + 4e^{-x}`, gated on `c₃ r_G/√n ≤ 3/4`.
pub fn tv_bound_sc(c3: f64, p_g: f64, n: f64, x: f64) -> Gated {
    let raw = 2.0 * c3 * ((p_g + 1.0).powi(3) / n).sqrt() + 4.0 * (-x).exp();
    Gated::prob(raw, sc_gate(c3, p_g, n, x))
}

/// `(c₃²(p_G+2)³ + 2c₄(p_G+1)²)/(2n) + 4e^{-x}` for centrally symmetric sets.
pub fn tv_bound_symmetric_sc(c3: f64, c4: f64, p_g: f64, n: f64, x: f64) -> Gated {
    let raw = (c3 * c3 * (p_g + 2.0).powi(3) + 2.0 * c4 * (p_g + 1.0).powi(2)) / (2.0 * n) + 4.0 * (-x).exp();
    Gated::prob(raw, sc_gate(c3, p_g, n, x))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Concentration {
    pub coarse: f64,
    pub refined: f64,
    pub gate: bool,
}

/// Bounds on `P(X − x* ∉ U)`: `e^{-x}` and `4e^{-x-(1-ω)p_G/2}` (for `ω ≤ 1/3`).
pub fn concentration_bound(omega: f64, p_g: f64, x: f64) -> Concentration {
    Concentration { coarse: (-x).exp(), refined: 4.0 * (-x - (1.0 - omega) * p_g / 2.0).exp(), gate: omega <= 1.0 / 3.0 }
}

/// `(ρ, ρ_G) = (4e^{-x-p_G/2}, e^{-x-p_G/2})`.
pub fn tail_rho_bounds(p_g: f64, x: f64) -> (f64, f64) {
    let e = (-x - p_g / 2.0).exp();
    (4.0 * e, e)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sandwich {
    /// `None` when the precondition fails.
    pub value: Option<f64>,
    pub valid: bool,
}

/// `2(ρ* + ◊)/(1 − ρ* − ◊)` with `ρ* = max(ρ, ρ_G)`; requires
/// `◊ + ρ* ≤ 1/2` and `◊_G ≤ ◊`.
pub fn sandwich(diamond: f64, diamond_g: f64, rho: f64, rho_g: f64) -> Sandwich {
    let rs = rho.max(rho_g);
    let s = diamond + rs;
    if s <= 0.5 && diamond_g <= diamond {
        Sandwich { value: Some(2.0 * s / (1.0 - s)), valid: true }
    } else {
        Sandwich { value: None, valid: false }
    }
}

/// `4◊₃ + 4e^{-x}`, gated on the value being at most 1.
pub fn kl_forward_bound(diamond3: f64, x: f64) -> Gated {
    let raw = 4.0 * diamond3 + 4.0 * (-x).exp();
    Gated { raw, bound: raw, gate: raw <= 1.0 }
}

/// `c₃ √((p_G+1)³/n) + (2 + C_ℓ) e^{-x}`.
pub fn kl_reverse_bound(c3: f64, p_g: f64, n: f64, x: f64, c_ell: f64) -> f64 {
    c3 * ((p_g + 1.0).powi(3) / n).sqrt() + (2.0 + c_ell) * (-x).exp()
}

/// `2.4 c₃ ‖Q D_G^{-2} Qᵀ‖^{1/2} (p_G+1)^{3/2}/√n + C e^{-x}`.
pub fn mean_shift_bound(c3: f64, p_g: f64, n: f64, x: f64, q_dg2_qt_opnorm: f64, big_c: f64) -> f64 {
    2.4 * c3 * q_dg2_qt_opnorm.sqrt() * (p_g + 1.0).powf(1.5) / n.sqrt() + big_c * (-x).exp()
}

/// `KL(N(μ₁, Σ₁) ‖ N(μ₂, Σ₂))` with `Σ_k` the inverse precisions.
pub fn gaussian_kl<T: Real>(mean1: &Vector<T>, prec1: &Matrix<T>, mean2: &Vector<T>, prec2: &Matrix<T>) -> Result<T> {
    let p = mean1.len();
    let (c1, _) = cholesky_jitter(prec1)?;
    let (c2, _) = cholesky_jitter(prec2)?;
    let sigma1 = c1.inverse();
    let tr = (prec2 * &sigma1).trace();
    let dm = mean2 - mean1;
    // ln det(Σ₂ Σ₁^{-1}) = ln det P₁ − ln det P₂
    let logdet = |c: &nalgebra::Cholesky<T, nalgebra::Dyn>| c.l().diagonal().iter().fold(T::zero(), |s, &v| s + v.ln()) * T::lit(2.0);
    let kl = T::lit(0.5) * (tr - T::from_count(p) + quad_form(prec2, &dm) + logdet(&c1) - logdet(&c2));
    Ok(kl.max(T::zero()))
}

/// `min(1, √(KL/2))`.
pub fn gaussian_tv_pinsker<T: Real>(kl: T) -> T {
    (kl.max(T::zero()) / T::lit(2.0)).sqrt().min(T::one())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub d: f64,
    /// `3‖Σ_k‖² ≤ ‖Σ_k‖²_Fr` for both matrices.
    pub applicable: bool,
}

/// `(1/‖Σ₁‖_Fr + 1/‖Σ₂‖_Fr)(‖λ₁ − λ₂‖₁ + ‖a‖²)`; with `use_wh` the eigenvalue
/// gap is replaced by the trace norm `‖Σ₁ − Σ₂‖₁`.
pub fn gaussian_comparison_d<T: Real>(sigma1: &Matrix<T>, sigma2: &Matrix<T>, a: &Vector<T>, use_wh: bool) -> Comparison {
    let f1 = sigma1.norm().as_f64();
    let f2 = sigma2.norm().as_f64();
    let gap = if use_wh {
        trace_norm_sym(&(sigma1 - sigma2)).as_f64()
    } else {
        let l1 = sorted_eigenvalues(sigma1);
        let l2 = sorted_eigenvalues(sigma2);
        l1.iter().zip(&l2).map(|(u, v)| (*u - *v).abs().as_f64()).sum()
    };
    let d = (1.0 / f1 + 1.0 / f2) * (gap + a.norm_squared().as_f64());
    let op = |s: &Matrix<T>| crate::linalg::op_norm_sym(s).as_f64();
    let slack = 1.0 + 1e-12;
    let applicable = 3.0 * op(sigma1).powi(2) <= f1 * f1 * slack && 3.0 * op(sigma2).powi(2) <= f2 * f2 * slack;
    Comparison { d, applicable }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InexactTv {
    pub base: f64,
    pub pinsker: f64,
    /// `½(‖D_G(x − x*)‖ + √tr B²)` when `‖B‖ ≤ 2/3`, `B = D^{-1}D_G²D^{-1} − I`.
    pub eigen: Option<f64>,
    pub total: f64,
}

/// `4(◊ + e^{-x}) + TV(N(x, D^{-2}), N(x*, D_G^{-2}))`, the Gaussian distance
/// bounded by the smaller of Pinsker and the eigenvalue bound.
pub fn inexact_tv_bound(
    diamond: f64,
    x: f64,
    center_used: &Vector<f64>,
    prec_used: &Matrix<f64>,
    center_star: &Vector<f64>,
    prec_star: &Matrix<f64>,
) -> Result<InexactTv> {
    let base = 4.0 * (diamond + (-x).exp());
    let kl = gaussian_kl(center_star, prec_star, center_used, prec_used)?;
    let pinsker = gaussian_tv_pinsker(kl);
    let d_inv = sym_inv_sqrt(prec_used)?;
    let p = center_used.len();
    let b = &d_inv * prec_star * &d_inv - Matrix::identity(p, p);
    let b_norm = crate::linalg::op_norm_sym(&b);
    let eigen = if b_norm <= 2.0 / 3.0 {
        let shift = quad_form(prec_star, &(center_used - center_star)).max(0.0).sqrt();
        Some(0.5 * (shift + (&b * &b).trace().max(0.0).sqrt()))
    } else {
        None
    };
    let gauss = eigen.map_or(pinsker, |e| e.min(pinsker)).min(1.0);
    Ok(InexactTv { base, pinsker, eigen, total: base + gauss })
}

/// `4(◊₃ + e^{-x}) + C ‖Q(x̄ − x*)‖² / ‖Q D_G^{-2} Qᵀ‖_Fr`.
pub fn posterior_mean_center_bound(diamond3: f64, x: f64, mean_shift: f64, q_dg2_qt_frnorm: f64, big_c: f64) -> Result<f64> {
    if !(q_dg2_qt_frnorm > 0.0) {
        return Err(Error::PreconditionViolated("Frobenius norm must be positive".into()));
    }
    Ok(4.0 * (diamond3 + (-x).exp()) + big_c * mean_shift * mean_shift / q_dg2_qt_frnorm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    /// Row-major entries.
    pub data: Vec<f64>,
}

impl From<&Matrix<f64>> for MatrixJson {
    fn from(m: &Matrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Self { rows: m.nrows(), cols: m.ncols(), data }
    }
}

impl MatrixJson {
    pub fn to_matrix(&self) -> Matrix<f64> {
        Matrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grade {
    Analytic,
    Estimated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub holds: bool,
    pub inequality: String,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub model_id: String,
    pub seed: u64,
    pub version: String,
    pub dim: usize,
    pub n: Option<f64>,
    pub conditional_on_x0: bool,
    pub contains_unspecified_constant: bool,
    pub big_c: f64,
    pub c_ell: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryBlock {
    pub p_g: f64,
    pub r_g: f64,
    pub x: f64,
    pub nu: f64,
    pub local_radius: f64,
    pub center: Vec<f64>,
    pub dg2: MatrixJson,
    pub d2: MatrixJson,
    pub b_opnorm: f64,
    pub map_grad_norm: f64,
    pub map_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemaindersBlock {
    /// The value fed to every formula (inflated when estimated).
    pub omega: f64,
    pub omega_raw: f64,
    pub omega_grade: Grade,
    pub omega_inflation: f64,
    pub alpha: Option<f64>,
    pub directions_used: usize,
    pub line_points_used: usize,
    pub c3: Option<f64>,
    pub c4: Option<f64>,
    pub e_tau3: Option<f64>,
    pub e_tau4: Option<f64>,
    pub third_form_sq: Option<f64>,
    pub derivative_method: DerivMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsBlock {
    pub diamond2: Option<f64>,
    pub diamond3: Option<f64>,
    pub diamond4: Option<f64>,
    pub tv_diamond2: Option<Gated>,
    pub tv_diamond3: Option<Gated>,
    pub tv_sc: Option<Gated>,
    /// Smallest bound among the gated all-sets bounds above.
    pub tv_bound_all_sets: Gated,
    pub tv_bound_symmetric_sets: Option<Gated>,
    pub kl_forward: Option<Gated>,
    pub kl_reverse: Option<f64>,
    pub mean_shift: Option<f64>,
    pub tail_rho: f64,
    pub tail_rho_g: f64,
    pub concentration: Concentration,
    pub sandwich: Sandwich,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaplaceCertificate {
    pub meta: Meta,
    pub geometry: GeometryBlock,
    pub remainders: RemaindersBlock,
    pub bounds: BoundsBlock,
    pub gates: BTreeMap<String, GateRecord>,
    pub provenance: BTreeMap<String, String>,
}

impl LaplaceCertificate {
    pub fn all_gates_hold(&self) -> bool {
        self.gates.values().all(|g| g.holds)
    }

    pub fn to_json(&self) -> Result<String> {
        to_canonical_json(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertificateOptions {
    pub x: f64,
    pub nu: f64,
    pub omega_inflation: f64,
    pub big_c: f64,
    pub c_ell: f64,
}

impl Default for CertificateOptions {
    fn default() -> Self {
        Self { x: crate::geometry::DEFAULT_X, nu: crate::geometry::DEFAULT_NU, omega_inflation: 1.25, big_c: 1.0, c_ell: 1.0 }
    }
}

/// Inputs to [`build_certificate`].
pub struct CertificateInput<'a> {
    pub model_id: &'a str,
    pub seed: u64,
    pub map: &'a MapResult<f64>,
    pub geometry: &'a LocalGeometry<f64>,
    pub report: &'a RemainderReport,
    pub omega_grade: Grade,
    pub self_concordance: Option<&'a SelfConcordance>,
    pub options: &'a CertificateOptions,
}

fn gate(holds: bool, inequality: &str, lhs: f64, rhs: f64) -> GateRecord {
    GateRecord { holds, inequality: inequality.to_string(), lhs, rhs }
}

/// Assembles every bound from the mode, the local geometry, `ω` and (when
/// available) the self-concordance constants.
pub fn build_certificate(input: &CertificateInput<'_>) -> Result<LaplaceCertificate> {
    input.map.require_converged()?;
    let opts = input.options;
    let geom = input.geometry;
    let x = geom.deviation_x;
    let p_g = geom.p_g;
    let inflation = match input.omega_grade {
        Grade::Estimated => opts.omega_inflation,
        Grade::Analytic => 1.0,
    };
    let omega_raw = input.report.omega;
    let omega = omega_raw * inflation;
    let omega_ok = omega < 1.0;
    let b_opnorm = max_eigenvalue(&geom.pair.b_matrix).max(0.0);

    let mut gates = BTreeMap::new();
    let mut prov = BTreeMap::new();
    let mut warnings = Vec::new();
    gates.insert("omega_third".into(), gate(omega <= 1.0 / 3.0, "omega <= 1/3", omega, 1.0 / 3.0));
    gates.insert("omega_pg".into(), gate(omega * p_g <= 2.0 / 3.0, "omega*p_G <= 2/3", omega * p_g, 2.0 / 3.0));

    let d2 = if omega_ok { Some(diamond2(omega, p_g)?) } else { None };
    prov.insert("diamond2".into(), "0.75*omega*p_G/(1-omega)".into());
    let tv_d2 = d2.map(|d| tv_bound(d, x, omega, p_g));
    prov.insert("tv_diamond2".into(), "min(1, 4*(diamond2 + exp(-x)))".into());

    let sc = input.self_concordance;
    let taus = match sc {
        Some(s) => Some(tau_moment_bounds(s, p_g)?),
        None => None,
    };
    let d3 = match (&taus, omega_ok) {
        (Some(t), true) => Some(diamond3(t.e_tau3, omega)?),
        _ => None,
    };
    prov.insert("diamond3".into(), "E tau3 / (4*(1-omega)^(3/2)), E tau3 <= c3*(p_G+1)^(3/2)/sqrt(n)".into());
    let d4 = match (&taus, omega_ok) {
        (Some(t), true) => match t.e_tau4 {
            Some(e4) => Some(diamond4(t.third_form_sq, e4, omega)?),
            None => None,
        },
        _ => None,
    };
    prov.insert("diamond4".into(), "(c3^2*(p_G+2)^3/n + 2*c4*(p_G+1)^2/n) / (16*(1-omega)^2)".into());
    let tv_d3 = d3.map(|d| tv_bound(d, x, omega, p_g));
    prov.insert("tv_diamond3".into(), "min(1, 4*(diamond3 + exp(-x)))".into());

    let (tv_sc, tv_sym) = match sc {
        Some(s) => {
            let lhs = s.c3 * geom.r_g / s.n.sqrt();
            gates.insert("c3_rg".into(), gate(lhs <= 0.75, "c3*r_G/sqrt(n) <= 3/4", lhs, 0.75));
            let sym = s.c4.map(|c4| tv_bound_symmetric_sc(s.c3, c4, p_g, s.n, x));
            (Some(tv_bound_sc(s.c3, p_g, s.n, x)), sym)
        }
        None => (None, None),
    };
    prov.insert("tv_sc".into(), "2*c3*sqrt((p_G+1)^3/n) + 4*exp(-x)".into());
    prov.insert("tv_bound_symmetric_sets".into(), "(c3^2*(p_G+2)^3 + 2*c4*(p_G+1)^2)/(2n) + 4*exp(-x)".into());

    let candidates = [tv_d2, tv_d3, tv_sc];
    let valid: Vec<Gated> = candidates.iter().flatten().filter(|g| g.gate).copied().collect();
    let tv_all = if let Some(best) = valid.iter().min_by(|a, b| a.raw.total_cmp(&b.raw)) {
        *best
    } else {
        let fallback = candidates.iter().flatten().min_by(|a, b| a.raw.total_cmp(&b.raw)).copied();
        fallback.unwrap_or(Gated { raw: f64::INFINITY, bound: 1.0, gate: false })
    };
    prov.insert("tv_bound_all_sets".into(), "minimum over gated tv_diamond2, tv_diamond3, tv_sc".into());

    let kl_fwd = d3.map(|d| kl_forward_bound(d, x));
    if let Some(k) = kl_fwd {
        gates.insert("kl_forward".into(), gate(k.gate, "4*diamond3 + 4*exp(-x) <= 1", k.raw, 1.0));
    }
    prov.insert("kl_forward".into(), "4*diamond3 + 4*exp(-x)".into());
    let kl_rev = sc.map(|s| kl_reverse_bound(s.c3, p_g, s.n, x, opts.c_ell));
    prov.insert("kl_reverse".into(), "c3*sqrt((p_G+1)^3/n) + (2 + C_ell)*exp(-x)".into());
    let mean_shift = sc.map(|s| mean_shift_bound(s.c3, p_g, s.n, x, b_opnorm, opts.big_c));
    prov.insert("mean_shift".into(), "2.4*c3*||D D_G^-2 D||^(1/2)*(p_G+1)^(3/2)/sqrt(n) + C*exp(-x), Q = D".into());

    let (rho, rho_g) = tail_rho_bounds(p_g, x);
    prov.insert("tail_rho".into(), "4*exp(-x - p_G/2)".into());
    prov.insert("tail_rho_g".into(), "exp(-x - p_G/2)".into());
    let conc = concentration_bound(omega, p_g, x);
    prov.insert("concentration".into(), "coarse exp(-x); refined 4*exp(-x - (1-omega)*p_G/2)".into());
    let best_diamond = [d2, d3].iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let sw =
        if best_diamond.is_finite() { sandwich(best_diamond, best_diamond, rho, rho_g) } else { Sandwich { value: None, valid: false } };
    prov.insert("sandwich".into(), "2*(rho* + diamond)/(1 - rho* - diamond)".into());

    if sc.is_some() {
        warnings.push("constants C and C_ell are unspecified by the theory; defaults are configurable".into());
    }
    if input.omega_grade == Grade::Estimated {
        warnings.push("omega and c3/c4 are sampled suprema (lower estimates)".into());
    }

    Ok(LaplaceCertificate {
        meta: Meta {
            model_id: input.model_id.to_string(),
            seed: input.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            dim: geom.dim(),
            n: sc.map(|s| s.n),
            conditional_on_x0: false,
            contains_unspecified_constant: sc.is_some(),
            big_c: opts.big_c,
            c_ell: opts.c_ell,
            warnings,
        },
        geometry: GeometryBlock {
            p_g,
            r_g: geom.r_g,
            x,
            nu: geom.nu,
            local_radius: geom.local_radius,
            center: geom.center.iter().copied().collect(),
            dg2: (&geom.pair.dg2).into(),
            d2: (&geom.pair.d2).into(),
            b_opnorm,
            map_grad_norm: input.map.grad_norm,
            map_iterations: input.map.iterations,
        },
        remainders: RemaindersBlock {
            omega,
            omega_raw,
            omega_grade: input.omega_grade,
            omega_inflation: inflation,
            alpha: input.report.alpha,
            directions_used: input.report.directions_used,
            line_points_used: input.report.line_points_used,
            c3: sc.map(|s| s.c3),
            c4: sc.and_then(|s| s.c4),
            e_tau3: taus.map(|t| t.e_tau3),
            e_tau4: taus.and_then(|t| t.e_tau4),
            third_form_sq: taus.map(|t| t.third_form_sq),
            derivative_method: input.map.hessian_method,
        },
        bounds: BoundsBlock {
            diamond2: d2,
            diamond3: d3,
            diamond4: d4,
            tv_diamond2: tv_d2,
            tv_diamond3: tv_d3,
            tv_sc,
            tv_bound_all_sets: tv_all,
            tv_bound_symmetric_sets: tv_sym,
            kl_forward: kl_fwd,
            kl_reverse: kl_rev,
            mean_shift,
            tail_rho: rho,
            tail_rho_g: rho_g,
            concentration: conc,
            sandwich: sw,
        },
        gates,
        provenance: prov,
    })
}

/// Pretty JSON whose floats are printed with 17 significant digits.
struct CanonicalFormatter {
    inner: serde_json::ser::PrettyFormatter<'static>,
}

impl serde_json::ser::Formatter for CanonicalFormatter {
    // JSON has no infinities; they go out as null like serde_json does
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            write!(w, "{value:.16e}")
        } else {
            w.write_all(b"null")
        }
    }
    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_array(w)
    }
    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array(w)
    }
    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array_value(w)
    }
    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object(w)
    }
    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object(w)
    }
    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object_value(w)
    }
}

/// Serializes with canonical float printing; identical values give identical
/// bytes.
pub fn to_canonical_json<S: Serialize>(value: &S) -> Result<String> {
    let mut buf = Vec::new();
    let fmt = CanonicalFormatter { inner: serde_json::ser::PrettyFormatter::with_indent(b"  ") };
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, fmt);
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    String::from_utf8(buf).map_err(|e| Error::Io(e.to_string()))
}

/// `tr B²` for `B = D^{-1} D_G² D^{-1} − I`.
pub fn b_trace_sq(prec_used: &Matrix<f64>, prec_star: &Matrix<f64>) -> Result<f64> {
    let d_inv = sym_inv_sqrt(prec_used)?;
    let p = prec_used.nrows();
    let b = &d_inv * prec_star * &d_inv - Matrix::identity(p, p);
    Ok(sym_eigen(&b).eigenvalues.iter().map(|v| v * v).sum())
}
