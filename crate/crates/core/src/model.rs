//! Smooth objectives, their penalized form `ℓ(x) − ½‖G(x − x₀)‖²`, and
//! derivative resolution (analytic first, finite differences otherwise).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, op_norm_sym, symmetrize, Matrix, Vector};
use crate::scalar::Real;

/// How a derivative was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivMethod {
    Analytic,
    FiniteDifference,
}

/// A value together with the derivative path that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Traced<V> {
    pub value: V,
    pub method: DerivMethod,
}

impl<V> Traced<V> {
    pub fn analytic(value: V) -> Self {
        Self { value, method: DerivMethod::Analytic }
    }

    pub fn fd(value: V) -> Self {
        Self { value, method: DerivMethod::FiniteDifference }
    }

    pub fn map<W>(self, f: impl FnOnce(V) -> W) -> Traced<W> {
        Traced { value: f(self.value), method: self.method }
    }
}

/// A smooth log-density `f: ℝᵖ → ℝ` (up to a constant).
///
/// Only [`Objective::value`] is required. The `analytic_*` hooks supply exact
/// derivatives; the `resolve_*` hooks let wrappers forward the whole
/// resolution to an inner objective (keeping its provenance).
pub trait Objective<T: Real>: Send + Sync {
    fn dim(&self) -> usize;

    fn value(&self, x: &Vector<T>) -> T;

    fn analytic_gradient(&self, _x: &Vector<T>) -> Option<Vector<T>> {
        None
    }

    fn analytic_hessian(&self, _x: &Vector<T>) -> Option<Matrix<T>> {
        None
    }

    /// `⟨∇ᵏf(x), u^⊗k⟩` for `k ∈ {3, 4}`.
    fn analytic_directional(&self, _x: &Vector<T>, _u: &Vector<T>, _order: usize) -> Option<T> {
        None
    }

    /// A positive semi-definite surrogate for `−∇²f(x)` (Gauss–Newton).
    fn gauss_newton_curvature(&self, _x: &Vector<T>) -> Option<Matrix<T>> {
        None
    }

    /// Characteristic coordinate scale used by finite-difference steps.
    fn deriv_scale(&self) -> T {
        T::one()
    }

    fn resolve_gradient(&self, _x: &Vector<T>) -> Option<Result<Traced<Vector<T>>>> {
        None
    }

    fn resolve_hessian(&self, _x: &Vector<T>) -> Option<Result<Traced<Matrix<T>>>> {
        None
    }

    fn resolve_directional(&self, _x: &Vector<T>, _u: &Vector<T>, _order: usize) -> Option<Result<Traced<T>>> {
        None
    }
}

macro_rules! forward_objective {
    ($ty:ty) => {
        impl<T: Real, O: Objective<T> + ?Sized> Objective<T> for $ty {
            fn dim(&self) -> usize {
                (**self).dim()
            }
            fn value(&self, x: &Vector<T>) -> T {
                (**self).value(x)
            }
            fn analytic_gradient(&self, x: &Vector<T>) -> Option<Vector<T>> {
                (**self).analytic_gradient(x)
            }
            fn analytic_hessian(&self, x: &Vector<T>) -> Option<Matrix<T>> {
                (**self).analytic_hessian(x)
            }
            fn analytic_directional(&self, x: &Vector<T>, u: &Vector<T>, order: usize) -> Option<T> {
                (**self).analytic_directional(x, u, order)
            }
            fn gauss_newton_curvature(&self, x: &Vector<T>) -> Option<Matrix<T>> {
                (**self).gauss_newton_curvature(x)
            }
            fn deriv_scale(&self) -> T {
                (**self).deriv_scale()
            }
            fn resolve_gradient(&self, x: &Vector<T>) -> Option<Result<Traced<Vector<T>>>> {
                (**self).resolve_gradient(x)
            }
            fn resolve_hessian(&self, x: &Vector<T>) -> Option<Result<Traced<Matrix<T>>>> {
                (**self).resolve_hessian(x)
            }
            fn resolve_directional(&self, x: &Vector<T>, u: &Vector<T>, order: usize) -> Option<Result<Traced<T>>> {
                (**self).resolve_directional(x, u, order)
            }
        }
    };
}

forward_objective!(&O);
forward_objective!(Box<O>);
forward_objective!(Arc<O>);

fn check_dim<T: Real>(obj: &(impl Objective<T> + ?Sized), x: &Vector<T>) -> Result<()> {
    if x.len() != obj.dim() {
        return Err(Error::DimensionMismatch { expected: obj.dim(), got: x.len() });
    }
    Ok(())
}

fn domain_error<T: Real>(x: &Vector<T>) -> Error {
    Error::Domain { point: x.iter().map(|v| v.as_f64()).collect() }
}

/// `f(x)`; non-finite values are reported as [`Error::Domain`].
pub fn evaluate<T: Real>(obj: &(impl Objective<T> + ?Sized), x: &Vector<T>) -> Result<T> {
    check_dim(obj, x)?;
    let v = obj.value(x);
    if v.is_finite_value() {
        Ok(v)
    } else {
        Err(domain_error(x))
    }
}

pub fn gradient<T: Real>(obj: &(impl Objective<T> + ?Sized), x: &Vector<T>) -> Result<Vector<T>> {
    gradient_traced(obj, x).map(|t| t.value)
}

pub fn gradient_traced<T: Real>(obj: &(impl Objective<T> + ?Sized), x: &Vector<T>) -> Result<Traced<Vector<T>>> {
    check_dim(obj, x)?;
    if let Some(r) = obj.resolve_gradient(x) {
        return r;
    }
    if let Some(g) = obj.analytic_gradient(x) {
        if g.iter().all(|v| v.is_finite_value()) {
            return Ok(Traced::analytic(g));
        }
        return Err(domain_error(x));
    }
    fd_gradient(obj, x).map(Traced::fd)
}

/// Central differences with step `deriv_scale·ε^{1/3}`.
pub fn fd_gradient<T: Real>(obj: &(impl Objective<T> + ?Sized), x: &Vector<T>) -> Result<Vector<T>> {
    let h = obj.deriv_scale() * T::machine_epsilon().powf(T::lit(1.0 / 3.0));
    let mut g = Vector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = evaluate(obj, &xp)?;
        xp[i] = x[i] - h;
        let fm = evaluate(obj, &xp)?;
        xp[i] = x[i];
        g[i] = (fp - fm) / (h + h);
    }
    Ok(g)
}

pub fn hessian<T: Real>(obj: &(impl Objective<T> + ?Sized), x: &Vector<T>) -> Result<Matrix<T>> {
    hessian_traced(obj, x).map(|t| t.value)
}

/// Hessian, symmetrized as `(H + Hᵀ)/2`.
pub fn hessian_traced<T: Real>(obj: &(impl Objective<T> + ?Sized), x: &Vector<T>) -> Result<Traced<Matrix<T>>> {
    check_dim(obj, x)?;
    if let Some(r) = obj.resolve_hessian(x) {
        return r.map(|t| t.map(|h| symmetrize(&h)));
    }
    if let Some(h) = obj.analytic_hessian(x) {
        if h.iter().all(|v| v.is_finite_value()) {
            return Ok(Traced::analytic(symmetrize(&h)));
        }
        return Err(domain_error(x));
    }
    fd_hessian(obj, x).map(Traced::fd)
}

/// Finite-difference Hessian: differences of the analytic gradient when one
/// exists, otherwise second differences of the value.
pub fn fd_hessian<T: Real>(obj: &(impl Objective<T> + ?Sized), x: &Vector<T>) -> Result<Matrix<T>> {
    let p = x.len();
    let mut h = Matrix::zeros(p, p);
    let has_grad = obj.analytic_gradient(x).is_some() || obj.resolve_gradient(x).is_some();
    if has_grad {
        let step = obj.deriv_scale() * T::machine_epsilon().powf(T::lit(1.0 / 3.0));
        let mut xp = x.clone();
        for j in 0..p {
            xp[j] = x[j] + step;
            let gp = gradient(obj, &xp)?;
            xp[j] = x[j] - step;
            let gm = gradient(obj, &xp)?;
            xp[j] = x[j];
            let col = (gp - gm) / (step + step);
            h.set_column(j, &col);
        }
    } else {
        let step = obj.deriv_scale() * T::machine_epsilon().powf(T::lit(0.25));
        let f0 = evaluate(obj, x)?;
        let mut xp = x.clone();
        let four = T::lit(4.0);
        for i in 0..p {
            xp[i] = x[i] + step + step;
            let fpp = evaluate(obj, &xp)?;
            xp[i] = x[i] - step - step;
            let fmm = evaluate(obj, &xp)?;
            xp[i] = x[i];
            h[(i, i)] = (fpp - f0 - f0 + fmm) / (four * step * step);
            for j in 0..i {
                let mut corner = |si: T, sj: T| -> Result<T> {
                    xp[i] = x[i] + si * step;
                    xp[j] = x[j] + sj * step;
                    let v = evaluate(obj, &xp);
                    xp[i] = x[i];
                    xp[j] = x[j];
                    v
                };
                let one = T::one();
                let v = (corner(one, one)? - corner(one, -one)? - corner(-one, one)? + corner(-one, -one)?) / (four * step * step);
                h[(i, j)] = v;
                h[(j, i)] = v;
            }
        }
    }
    Ok(symmetrize(&h))
}

/// 7-point central stencil for the third derivative, offsets −3..=3.
const STENCIL3: [f64; 7] = [0.125, -1.0, 1.625, 0.0, -1.625, 1.0, -0.125];
/// 9-point central stencil for the fourth derivative, offsets −4..=4.
const STENCIL4: [f64; 9] = [7.0 / 240.0, -0.4, 169.0 / 60.0, -122.0 / 15.0, 91.0 / 8.0, -122.0 / 15.0, 169.0 / 60.0, -0.4, 7.0 / 240.0];

pub fn directional_derivative<T: Real>(obj: &(impl Objective<T> + ?Sized), x: &Vector<T>, u: &Vector<T>, order: usize) -> Result<T> {
    directional_derivative_traced(obj, x, u, order).map(|t| t.value)
}

/// `⟨∇ᵏf(x), u^⊗k⟩` for `k ∈ {3, 4}`.
pub fn directional_derivative_traced<T: Real>(
    obj: &(impl Objective<T> + ?Sized),
    x: &Vector<T>,
    u: &Vector<T>,
    order: usize,
) -> Result<Traced<T>> {
    if order != 3 && order != 4 {
        return Err(Error::UnsupportedOrder(order));
    }
    check_dim(obj, x)?;
    if u.len() != x.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), got: u.len() });
    }
    if let Some(r) = obj.resolve_directional(x, u, order) {
        return r;
    }
    if let Some(v) = obj.analytic_directional(x, u, order) {
        if v.is_finite_value() {
            return Ok(Traced::analytic(v));
        }
        return Err(domain_error(x));
    }
    fd_directional(obj, x, u, order).map(Traced::fd)
}

/// Order-th derivative at `t = 0` of `t ↦ f(x + t·u)` by a high-order central
/// stencil with step `deriv_scale·ε^{1/(order+2)}/‖u‖`.
pub fn fd_directional<T: Real>(obj: &(impl Objective<T> + ?Sized), x: &Vector<T>, u: &Vector<T>, order: usize) -> Result<T> {
    let norm = u.norm();
    if norm == T::zero() {
        return Ok(T::zero());
    }
    let stencil: &[f64] = match order {
        3 => &STENCIL3,
        4 => &STENCIL4,
        _ => return Err(Error::UnsupportedOrder(order)),
    };
    let h = obj.deriv_scale() * T::machine_epsilon().powf(T::lit(1.0 / (order as f64 + 2.0))) / norm;
    let half = (stencil.len() / 2) as i64;
    let mut acc = T::zero();
    for (k, &c) in stencil.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let offset = k as i64 - half;
        let t = h * T::lit(offset as f64);
        let v = obj.value(&(x + u * t));
        if !v.is_finite_value() {
            return Err(Error::StencilOutOfDomain { offset: t.as_f64() });
        }
        acc += T::lit(c) * v;
    }
    Ok(acc / h.powi(order as i32))
}

/// Third (and optionally fourth) directional derivative at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionalTaylor<T: Real> {
    pub base_point: Vector<T>,
    pub direction: Vector<T>,
    pub k3: T,
    pub k4: Option<T>,
    pub method: DerivMethod,
}

pub fn directional_taylor<T: Real>(
    obj: &(impl Objective<T> + ?Sized),
    x: &Vector<T>,
    u: &Vector<T>,
    with_fourth: bool,
) -> Result<DirectionalTaylor<T>> {
    let k3 = directional_derivative_traced(obj, x, u, 3)?;
    let (k4, method) = if with_fourth {
        let k4 = directional_derivative_traced(obj, x, u, 4)?;
        let method = if k3.method == DerivMethod::Analytic && k4.method == DerivMethod::Analytic {
            DerivMethod::Analytic
        } else {
            DerivMethod::FiniteDifference
        };
        (Some(k4.value), method)
    } else {
        (None, k3.method)
    };
    Ok(DirectionalTaylor { base_point: x.clone(), direction: u.clone(), k3: k3.value, k4, method })
}

type ValueFn<T> = Box<dyn Fn(&Vector<T>) -> T + Send + Sync>;
type GradFn<T> = Box<dyn Fn(&Vector<T>) -> Vector<T> + Send + Sync>;
type HessFn<T> = Box<dyn Fn(&Vector<T>) -> Matrix<T> + Send + Sync>;
type DirFn<T> = Box<dyn Fn(&Vector<T>, &Vector<T>, usize) -> Option<T> + Send + Sync>;

/// Objective assembled from closures.
pub struct FnObjective<T: Real> {
    dim: usize,
    value_fn: ValueFn<T>,
    gradient_fn: Option<GradFn<T>>,
    hessian_fn: Option<HessFn<T>>,
    directional_fn: Option<DirFn<T>>,
    deriv_scale: T,
}

impl<T: Real> FnObjective<T> {
    pub fn new(dim: usize, value: impl Fn(&Vector<T>) -> T + Send + Sync + 'static) -> Self {
        Self { dim, value_fn: Box::new(value), gradient_fn: None, hessian_fn: None, directional_fn: None, deriv_scale: T::one() }
    }

    pub fn with_gradient(mut self, g: impl Fn(&Vector<T>) -> Vector<T> + Send + Sync + 'static) -> Self {
        self.gradient_fn = Some(Box::new(g));
        self
    }

    pub fn with_hessian(mut self, h: impl Fn(&Vector<T>) -> Matrix<T> + Send + Sync + 'static) -> Self {
        self.hessian_fn = Some(Box::new(h));
        self
    }

    pub fn with_directional(mut self, d: impl Fn(&Vector<T>, &Vector<T>, usize) -> Option<T> + Send + Sync + 'static) -> Self {
        self.directional_fn = Some(Box::new(d));
        self
    }

    pub fn with_deriv_scale(mut self, scale: T) -> Self {
        self.deriv_scale = scale;
        self
    }
}

impl<T: Real> Objective<T> for FnObjective<T> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, x: &Vector<T>) -> T {
        (self.value_fn)(x)
    }
    fn analytic_gradient(&self, x: &Vector<T>) -> Option<Vector<T>> {
        self.gradient_fn.as_ref().map(|g| g(x))
    }
    fn analytic_hessian(&self, x: &Vector<T>) -> Option<Matrix<T>> {
        self.hessian_fn.as_ref().map(|h| h(x))
    }
    fn analytic_directional(&self, x: &Vector<T>, u: &Vector<T>, order: usize) -> Option<T> {
        self.directional_fn.as_ref().and_then(|d| d(x, u, order))
    }
    fn deriv_scale(&self) -> T {
        self.deriv_scale
    }
}

/// `factor · inner(x)`; used to pass `h = −ℓ/n` to the self-concordance
/// estimator.
pub struct ScaledObjective<T: Real, O> {
    pub inner: O,
    pub factor: T,
}

impl<T: Real, O: Objective<T>> Objective<T> for ScaledObjective<T, O> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn value(&self, x: &Vector<T>) -> T {
        self.inner.value(x) * self.factor
    }
    fn deriv_scale(&self) -> T {
        self.inner.deriv_scale()
    }
    fn resolve_gradient(&self, x: &Vector<T>) -> Option<Result<Traced<Vector<T>>>> {
        Some(gradient_traced(&self.inner, x).map(|t| t.map(|g| g * self.factor)))
    }
    fn resolve_hessian(&self, x: &Vector<T>) -> Option<Result<Traced<Matrix<T>>>> {
        Some(hessian_traced(&self.inner, x).map(|t| t.map(|h| h * self.factor)))
    }
    fn resolve_directional(&self, x: &Vector<T>, u: &Vector<T>, order: usize) -> Option<Result<Traced<T>>> {
        Some(directional_derivative_traced(&self.inner, x, u, order).map(|t| t.map(|v| v * self.factor)))
    }
    fn gauss_newton_curvature(&self, x: &Vector<T>) -> Option<Matrix<T>> {
        self.inner.gauss_newton_curvature(x).map(|m| m * self.factor.abs())
    }
}

/// `f(x) = ℓ(x) − ½‖G(x − x₀)‖²` with `G²` stored as a matrix.
pub struct PenalizedObjective<T: Real, L> {
    pub likelihood: L,
    pub penalty_precision: Matrix<T>,
    pub prior_mean: Vector<T>,
    /// `n` in `−ℓ = n·h`.
    pub sample_size_hint: Option<T>,
}

/// Builds `ℓ(x) − ½‖G(x − x₀)‖²`; `G²` must be symmetric PSD.
pub fn penalize<T: Real, L: Objective<T>>(likelihood: L, g2: Matrix<T>, x0: Vector<T>) -> Result<PenalizedObjective<T, L>> {
    let p = likelihood.dim();
    if g2.nrows() != p || g2.ncols() != p {
        return Err(Error::DimensionMismatch { expected: p, got: g2.nrows() });
    }
    if x0.len() != p {
        return Err(Error::DimensionMismatch { expected: p, got: x0.len() });
    }
    let asym = (&g2 - g2.transpose()).abs().max();
    let scale = op_norm_sym(&g2);
    if asym > T::lit(1e-10) * (T::one() + scale) {
        return Err(Error::PreconditionViolated("penalty precision is not symmetric".into()));
    }
    if p > 0 && min_eigenvalue(&g2) < -T::lit(1e-12) * scale {
        return Err(Error::PreconditionViolated("penalty precision is not positive semi-definite".into()));
    }
    Ok(PenalizedObjective { likelihood, penalty_precision: symmetrize(&g2), prior_mean: x0, sample_size_hint: None })
}

impl<T: Real, L: Objective<T>> PenalizedObjective<T, L> {
    pub fn with_sample_size(mut self, n: T) -> Self {
        self.sample_size_hint = Some(n);
        self
    }

    pub fn penalty(&self, x: &Vector<T>) -> T {
        let g = &self.penalty_precision;
        let mut q = T::zero();
        for i in 0..x.len() {
            let di = x[i] - self.prior_mean[i];
            let mut row = T::zero();
            for j in 0..x.len() {
                row += g[(i, j)] * (x[j] - self.prior_mean[j]);
            }
            q += di * row;
        }
        q * T::lit(0.5)
    }
}

impl<T: Real, L: Objective<T>> Objective<T> for PenalizedObjective<T, L> {
    fn dim(&self) -> usize {
        self.likelihood.dim()
    }

    fn value(&self, x: &Vector<T>) -> T {
        self.likelihood.value(x) - self.penalty(x)
    }

    fn deriv_scale(&self) -> T {
        self.likelihood.deriv_scale()
    }

    fn resolve_gradient(&self, x: &Vector<T>) -> Option<Result<Traced<Vector<T>>>> {
        let pen = &self.penalty_precision * (x - &self.prior_mean);
        Some(gradient_traced(&self.likelihood, x).map(|t| t.map(|g| g - pen)))
    }

    fn resolve_hessian(&self, x: &Vector<T>) -> Option<Result<Traced<Matrix<T>>>> {
        Some(hessian_traced(&self.likelihood, x).map(|t| t.map(|h| h - &self.penalty_precision)))
    }

    // The quadratic penalty has vanishing third and fourth derivatives.
    fn resolve_directional(&self, x: &Vector<T>, u: &Vector<T>, order: usize) -> Option<Result<Traced<T>>> {
        Some(directional_derivative_traced(&self.likelihood, x, u, order))
    }

    fn gauss_newton_curvature(&self, x: &Vector<T>) -> Option<Matrix<T>> {
        self.likelihood.gauss_newton_curvature(x).map(|c| c + &self.penalty_precision)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::quad_form;
    use approx::assert_relative_eq;

    fn neg_half_norm() -> FnObjective<f64> {
        FnObjective::new(2, |x: &Vector<f64>| -0.5 * x.norm_squared())
    }

    fn neg_quartic() -> FnObjective<f64> {
        FnObjective::new(1, |x: &Vector<f64>| -x[0].powi(4) / 4.0)
    }

    #[test]
    fn evaluate_quadratic_and_errors() {
        let f = neg_half_norm();
        assert_eq!(evaluate(&f, &Vector::from_vec(vec![3.0, 4.0])).unwrap(), -12.5);
        assert!(matches!(evaluate(&f, &Vector::from_vec(vec![1.0])), Err(Error::DimensionMismatch { expected: 2, got: 1 })));
        let bad = FnObjective::new(1, |x: &Vector<f64>| x[0].ln());
        assert!(matches!(evaluate(&bad, &Vector::from_vec(vec![-1.0])), Err(Error::Domain { .. })));
        let inf = FnObjective::new(1, |_x: &Vector<f64>| f64::INFINITY);
        assert!(matches!(evaluate(&inf, &Vector::from_vec(vec![0.0])), Err(Error::Domain { .. })));
    }

    #[test]
    fn gradient_paths() {
        let f = neg_half_norm();
        let g = gradient_traced(&f, &Vector::from_vec(vec![1.0, 2.0])).unwrap();
        assert_eq!(g.method, DerivMethod::FiniteDifference);
        assert_relative_eq!(g.value, Vector::from_vec(vec![-1.0, -2.0]), epsilon = 1e-8);
        let c = FnObjective::new(3, |_x: &Vector<f64>| 7.0);
        assert_relative_eq!(gradient(&c, &Vector::zeros(3)).unwrap(), Vector::zeros(3), epsilon = 1e-12);
    }

    #[test]
    fn hessian_paths() {
        let a = Matrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let a2 = a.clone();
        let f = FnObjective::new(2, move |x: &Vector<f64>| -0.5 * quad_form(&a2, x)).with_hessian({
            let a = a.clone();
            move |_x| -a.clone()
        });
        let h = hessian_traced(&f, &Vector::from_vec(vec![0.3, -0.1])).unwrap();
        assert_eq!(h.method, DerivMethod::Analytic);
        assert_eq!(h.value, -a);
        let q = neg_quartic();
        let h = hessian(&q, &Vector::from_vec(vec![1.0])).unwrap();
        assert!((h[(0, 0)] + 3.0).abs() < 1e-4);
    }

    #[test]
    fn fd_hessian_is_symmetric() {
        let f = FnObjective::new(3, |x: &Vector<f64>| (x[0] * x[1]).sin() + x[2].powi(3) * x[0] - x.norm_squared());
        let h = hessian(&f, &Vector::from_vec(vec![0.2, -0.7, 1.1])).unwrap();
        assert!((&h - h.transpose()).abs().max() <= 1e-10);
    }

    #[test]
    fn directional_fd() {
        let q = neg_quartic();
        let v = directional_derivative(&q, &Vector::from_vec(vec![0.0]), &Vector::from_vec(vec![1.0]), 4).unwrap();
        assert!((v + 6.0).abs() < 1e-3, "{v}");
        let quad = neg_half_norm();
        let u = Vector::from_vec(vec![0.6, -0.8]);
        let v = directional_derivative(&quad, &Vector::from_vec(vec![0.5, 0.1]), &u, 3).unwrap();
        assert!(v.abs() <= 1e-6, "{v}");
        let a = Vector::from_vec(vec![0.3, -0.5]);
        let a2 = a.clone();
        let e = FnObjective::new(2, move |x: &Vector<f64>| a2.dot(x).exp());
        let x = Vector::from_vec(vec![0.4, 0.2]);
        let u = Vector::from_vec(vec![1.0, -0.7]);
        let exact = a.dot(&u).powi(3) * a.dot(&x).exp();
        let v = directional_derivative(&e, &x, &u, 3).unwrap();
        assert!(((v - exact) / exact).abs() < 1e-4);
        assert!(matches!(directional_derivative(&e, &x, &u, 5), Err(Error::UnsupportedOrder(5))));
    }

    #[test]
    fn stencil_out_of_domain() {
        let f = FnObjective::new(1, |x: &Vector<f64>| if x[0] > 0.0 { -x[0] } else { f64::NAN });
        let r = directional_derivative(&f, &Vector::from_vec(vec![0.0]), &Vector::from_vec(vec![1.0]), 3);
        assert!(matches!(r, Err(Error::StencilOutOfDomain { .. })));
    }

    #[test]
    fn odd_even_symmetry() {
        let f = FnObjective::new(2, |x: &Vector<f64>| (x[0] + 0.5 * x[1]).exp() - x[1].powi(4));
        let x = Vector::from_vec(vec![0.1, 0.3]);
        let u = Vector::from_vec(vec![0.4, -0.9]);
        let t = directional_taylor(&f, &x, &u, true).unwrap();
        let tm = directional_taylor(&f, &x, &(-&u), true).unwrap();
        assert_relative_eq!(t.k3, -tm.k3, epsilon = 1e-6 * (1.0 + t.k3.abs()));
        assert_relative_eq!(t.k4.unwrap(), tm.k4.unwrap(), epsilon = 1e-4 * (1.0 + t.k4.unwrap().abs()));
    }

    #[test]
    fn penalize_identities() {
        let zero = FnObjective::new(2, |_x: &Vector<f64>| 0.0);
        let f = penalize(zero, Matrix::identity(2, 2), Vector::zeros(2)).unwrap();
        let x = Vector::from_vec(vec![1.0, -2.0]);
        assert_relative_eq!(evaluate(&f, &x).unwrap(), -2.5, epsilon = 1e-15);

        let ell = FnObjective::new(2, |x: &Vector<f64>| (x[0] - x[1]).exp() - x[0].powi(4));
        let g2 = Matrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let x0 = Vector::from_vec(vec![0.5, -0.5]);
        let ell_ref = FnObjective::new(2, |x: &Vector<f64>| (x[0] - x[1]).exp() - x[0].powi(4));
        let f = penalize(ell, g2.clone(), x0.clone()).unwrap();
        let u = Vector::from_vec(vec![0.3, 0.8]);
        let d_f = directional_derivative(&f, &x, &u, 3).unwrap();
        let d_l = directional_derivative(&ell_ref, &x, &u, 3).unwrap();
        assert!((d_f - d_l).abs() <= 1e-8);
        let hf = hessian(&f, &x).unwrap();
        let hl = hessian(&ell_ref, &x).unwrap();
        assert!((&hf + &g2 - &hl).abs().max() <= 1e-10);
        let diff = evaluate(&f, &x).unwrap() - (evaluate(&ell_ref, &x).unwrap() - 0.5 * quad_form(&g2, &(&x - &x0)));
        assert!(diff.abs() < 1e-14);
    }

    #[test]
    fn penalize_rejects_bad_penalty() {
        let z = || FnObjective::new(2, |_x: &Vector<f64>| 0.0);
        let neg = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(penalize(z(), neg, Vector::zeros(2)), Err(Error::PreconditionViolated(_))));
        assert!(matches!(penalize(z(), Matrix::identity(3, 3), Vector::zeros(2)), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn scaled_objective_scales_everything() {
        let f = FnObjective::new(1, |x: &Vector<f64>| x[0].powi(4));
        let s = ScaledObjective { inner: f, factor: -0.5 };
        let x = Vector::from_vec(vec![1.0]);
        assert_relative_eq!(evaluate(&s, &x).unwrap(), -0.5);
        assert!((hessian(&s, &x).unwrap()[(0, 0)] + 6.0).abs() < 1e-4);
    }

    #[test]
    fn works_in_single_precision() {
        let f = FnObjective::<f32>::new(2, |x: &Vector<f32>| -0.5 * x.norm_squared());
        let g = gradient(&f, &Vector::from_vec(vec![1.0f32, 2.0])).unwrap();
        assert!((g[0] + 1.0).abs() < 1e-2 && (g[1] + 2.0).abs() < 1e-2);
    }
}
