//! Local Gaussian geometry around the mode: the precision pair `(D², D_G²)`,
//! effective dimension, radii, Gaussian quadratic-form tools and sampling
//! from `N(0, D_G^{-2})`.

use nalgebra::Cholesky;
use nalgebra::Dyn;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{cholesky_jitter, min_eigenvalue, op_norm_sym, quad_form, sym_eigen, sym_sqrt, symmetrize, whiten, Matrix, Vector};
use crate::rng::normal_block;
use crate::scalar::Real;

/// Default `ν`.
pub const DEFAULT_NU: f64 = 2.0 / 3.0;
/// Default deviation level `x`.
pub const DEFAULT_X: f64 = 4.0;

/// Likelihood curvature `D²` and full precision `D_G² = D² + G²`.
#[derive(Debug, Clone)]
pub struct PrecisionPair<T: Real> {
    pub d2: Matrix<T>,
    pub dg2: Matrix<T>,
    pub chol_dg2: Cholesky<T, Dyn>,
    /// `L⁻¹ D² L⁻ᵀ` with `D_G² = LLᵀ`; same spectrum as `D_G⁻¹ D² D_G⁻¹`.
    pub b_matrix: Matrix<T>,
    pub jitter: T,
}

impl<T: Real> PrecisionPair<T> {
    pub fn new(d2: Matrix<T>, dg2: Matrix<T>) -> Result<Self> {
        if d2.shape() != dg2.shape() || d2.nrows() != d2.ncols() {
            return Err(Error::DimensionMismatch { expected: dg2.nrows(), got: d2.nrows() });
        }
        let d2 = symmetrize(&d2);
        let dg2 = symmetrize(&dg2);
        let gap = &dg2 - &d2;
        let scale = op_norm_sym(&dg2);
        if d2.nrows() > 0 && min_eigenvalue(&gap) < -T::lit(1e-10) * (T::one() + scale) {
            return Err(Error::PreconditionViolated("D_G^2 - D^2 is not positive semi-definite".into()));
        }
        let (chol_dg2, jitter) = cholesky_jitter(&dg2)?;
        let b_matrix = whiten(&d2, &dg2)?;
        Ok(Self { d2, dg2, chol_dg2, b_matrix, jitter })
    }

    /// Builds the pair from `D²` and the penalty `G²`.
    pub fn from_penalty(d2: Matrix<T>, g2: &Matrix<T>) -> Result<Self> {
        let dg2 = &d2 + g2;
        Self::new(d2, dg2)
    }

    pub fn dim(&self) -> usize {
        self.d2.nrows()
    }

    /// `D_G^{-2}`.
    pub fn covariance(&self) -> Matrix<T> {
        self.chol_dg2.inverse()
    }

    /// `G² = D_G² − D²`.
    pub fn penalty(&self) -> Matrix<T> {
        &self.dg2 - &self.d2
    }
}

/// `p_G = tr(D² D_G^{-2})`, clamped into `[0, p]`.
pub fn effective_dimension<T: Real>(pair: &PrecisionPair<T>) -> T {
    let tr = pair.b_matrix.trace();
    tr.max(T::zero()).min(T::from_count(pair.dim()))
}

/// `r_G = 2√p_G + √(2x)`.
pub fn concentration_radius<T: Real>(p_g: T, x: T) -> T {
    T::lit(2.0) * p_g.max(T::zero()).sqrt() + (T::lit(2.0) * x).sqrt()
}

/// `√tr B + √(2x‖B‖)`: a radius exceeded by `‖Tγ‖`, `B = TTᵀ`, with
/// probability at most `e^{-x}`.
pub fn gaussian_ball_radius<T: Real>(b: &Matrix<T>, x: T) -> T {
    let tr = b.trace().max(T::zero());
    tr.sqrt() + (T::lit(2.0) * x * op_norm_sym(b)).sqrt()
}

/// Tail bound `exp{−(z − √p_G)²/2}` for `‖D γ_G‖ > z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TailBound {
    pub bound: f64,
    /// False when `z < √p_G`; the bound is then reported as 1.
    pub applies: bool,
}

pub fn qf_tail_bound<T: Real>(p_g: T, z: T) -> TailBound {
    let root = p_g.max(T::zero()).sqrt();
    if z < root {
        return TailBound { bound: 1.0, applies: false };
    }
    let d = (z - root).as_f64();
    TailBound { bound: (-0.5 * d * d).exp().clamp(0.0, 1.0), applies: true }
}

/// `E‖Tγ‖^k` for `B = TTᵀ` and `k ∈ {2, 4, 6}`.
pub fn gaussian_norm_even_moment<T: Real>(b: &Matrix<T>, order: usize) -> Result<T> {
    let t1 = b.trace();
    let b2 = b * b;
    let t2 = b2.trace();
    match order {
        2 => Ok(t1),
        4 => Ok(t1 * t1 + T::lit(2.0) * t2),
        6 => {
            let t3 = (&b2 * b).trace();
            Ok(t1 * t1 * t1 + T::lit(6.0) * t1 * t2 + T::lit(8.0) * t3)
        }
        _ => Err(Error::UnsupportedOrder(order)),
    }
}

/// Determinant bounds for `ω ≤ 1/3` together with the exact values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetBounds {
    /// `exp(ω p_G) ≥ det(I + ωB_G)`.
    pub plus_bound: f64,
    /// `exp{1.5·log(1.5)·ω p_G} ≥ det(I − ωB_G)^{-1/2}`.
    pub minus_bound: f64,
    pub plus_exact: f64,
    pub minus_exact: f64,
}

pub fn det_contiguity_bounds<T: Real>(omega: T, pair: &PrecisionPair<T>) -> Result<DetBounds> {
    let w = omega.as_f64();
    if w > 1.0 / 3.0 + 1e-15 {
        return Err(Error::OmegaTooLarge(w));
    }
    if w < 0.0 {
        return Err(Error::OmegaOutOfRange(w));
    }
    let p_g = effective_dimension(pair).as_f64();
    let eig = sym_eigen(&pair.b_matrix).eigenvalues;
    let mut log_plus = 0.0;
    let mut log_minus = 0.0;
    for v in eig.iter() {
        let b = v.as_f64().clamp(0.0, 1.0);
        log_plus += (w * b).ln_1p();
        log_minus += -0.5 * (-w * b).ln_1p();
    }
    Ok(DetBounds {
        plus_bound: (w * p_g).exp(),
        minus_bound: (1.5 * 1.5f64.ln() * w * p_g).exp(),
        plus_exact: log_plus.exp(),
        minus_exact: log_minus.exp(),
    })
}

/// `count × p` draws from `N(0, D_G^{-2})` as `L^{-T} z`.
pub fn sample_gaussian<T: Real>(pair: &PrecisionPair<T>, count: usize, seed: u64) -> Result<Matrix<T>> {
    sample_precision_factor(&pair.chol_dg2.l(), count, seed, "gauss-geometry/sample")
}

/// Draws `N(0, (LLᵀ)^{-1})` rows for a lower-triangular `L`.
pub fn sample_precision_factor<T: Real>(l: &Matrix<T>, count: usize, seed: u64, tag: &str) -> Result<Matrix<T>> {
    let p = l.nrows();
    if count == 0 {
        return Err(Error::PreconditionViolated("sample count must be positive".into()));
    }
    let z = normal_block(seed, tag, count, p);
    // column-major p × count view of the row-major block
    let zt = Matrix::from_iterator(p, count, z.iter().map(|&v| T::lit(v)));
    let lt = l.transpose();
    let x = lt.solve_upper_triangular(&zt).ok_or(Error::SingularPrecision)?;
    Ok(x.transpose())
}

/// Draws rows `S z` for an arbitrary square root `S` of a covariance.
pub fn sample_covariance_factor<T: Real>(s: &Matrix<T>, count: usize, seed: u64, tag: &str) -> Matrix<T> {
    let p = s.ncols();
    let z = normal_block(seed, tag, count, p);
    let zt = Matrix::from_iterator(p, count, z.iter().map(|&v| T::lit(v)));
    (s * zt).transpose()
}

/// Geometry of the local set `U = {‖Du‖ ≤ r_G/ν}` around the mode.
#[derive(Debug, Clone)]
pub struct LocalGeometry<T: Real> {
    pub center: Vector<T>,
    pub pair: PrecisionPair<T>,
    pub p_g: T,
    pub deviation_x: T,
    pub nu: T,
    pub r_g: T,
    pub local_radius: T,
    /// `D = (D²)^{1/2}`.
    pub d: Matrix<T>,
}

impl<T: Real> LocalGeometry<T> {
    pub fn new(center: Vector<T>, pair: PrecisionPair<T>, deviation_x: T, nu: T) -> Result<Self> {
        if center.len() != pair.dim() {
            return Err(Error::DimensionMismatch { expected: pair.dim(), got: center.len() });
        }
        if !(nu > T::zero() && nu < T::one()) {
            return Err(Error::PreconditionViolated("nu must lie in (0, 1)".into()));
        }
        if !(deviation_x > T::zero()) {
            return Err(Error::PreconditionViolated("deviation level x must be positive".into()));
        }
        let p_g = effective_dimension(&pair);
        let r_g = concentration_radius(p_g, deviation_x);
        let d = sym_sqrt(&pair.d2);
        Ok(Self { center, pair, p_g, deviation_x, nu, r_g, local_radius: r_g / nu, d })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// `‖D u‖`.
    pub fn d_norm(&self, u: &Vector<T>) -> T {
        quad_form(&self.pair.d2, u).max(T::zero()).sqrt()
    }

    /// `‖D_G u‖`.
    pub fn dg_norm(&self, u: &Vector<T>) -> T {
        quad_form(&self.pair.dg2, u).max(T::zero()).sqrt()
    }

    /// Closed-set membership `‖D(point − center)‖ ≤ r_G/ν`.
    pub fn in_local_set(&self, point: &Vector<T>) -> Result<bool> {
        if point.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: point.len() });
        }
        let r = (&self.d * (point - &self.center)).norm();
        Ok(r <= self.local_radius * (T::one() + T::lit(1e-12)))
    }

    /// `D^{-1}`; fails when `D²` is singular.
    pub fn d_inverse(&self) -> Result<Matrix<T>> {
        crate::linalg::sym_inv_sqrt(&self.pair.d2).map_err(|_| Error::CurvatureSingular)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pair(d2: Matrix<f64>, g2: Matrix<f64>) -> PrecisionPair<f64> {
        PrecisionPair::from_penalty(d2, &g2).unwrap()
    }

    #[test]
    fn effective_dimension_examples() {
        let p = pair(Matrix::identity(3, 3), Matrix::zeros(3, 3));
        assert_relative_eq!(effective_dimension(&p), 3.0, epsilon = 1e-12);
        let p = pair(Matrix::identity(2, 2) * 9.0, Matrix::identity(2, 2));
        assert_relative_eq!(effective_dimension(&p), 1.8, epsilon = 1e-12);
        let p = pair(Matrix::zeros(2, 2), Matrix::identity(2, 2));
        assert_eq!(effective_dimension(&p), 0.0);
    }

    #[test]
    fn effective_dimension_matches_eigen_oracle() {
        let a = Matrix::from_row_slice(4, 4, &[3.0, 0.4, 0.1, 0.0, 0.4, 2.0, 0.3, 0.2, 0.1, 0.3, 1.5, 0.1, 0.0, 0.2, 0.1, 0.7]);
        let g = Matrix::from_row_slice(4, 4, &[1.0, 0.2, 0.0, 0.1, 0.2, 0.8, 0.1, 0.0, 0.0, 0.1, 0.5, 0.0, 0.1, 0.0, 0.0, 2.0]);
        let p = pair(a.clone(), g.clone());
        let dg2 = &a + &g;
        let inv_sqrt = crate::linalg::sym_inv_sqrt(&dg2).unwrap();
        let oracle: f64 = sym_eigen(&(&inv_sqrt * &a * &inv_sqrt)).eigenvalues.iter().sum();
        assert_relative_eq!(effective_dimension(&p), oracle, epsilon = 1e-10);
        let ev = sym_eigen(&p.b_matrix).eigenvalues;
        assert!(ev.iter().all(|&v| (-1e-10..=1.0 + 1e-10).contains(&v)));
    }

    #[test]
    fn radii() {
        assert_relative_eq!(concentration_radius(4.0, 2.0), 6.0);
        assert_relative_eq!(concentration_radius(0.0, 0.5), 1.0);
        assert_relative_eq!(concentration_radius(1.8, 3.0), 2.0 * 1.8f64.sqrt() + 6f64.sqrt());
        assert_relative_eq!(gaussian_ball_radius(&Matrix::<f64>::identity(5, 5), 2.0), 5f64.sqrt() + 2.0);
        let b = Matrix::from_diagonal(&Vector::from_vec(vec![4.0, 0.0, 0.0]));
        assert_relative_eq!(gaussian_ball_radius(&b, 2.0), 6.0, epsilon = 1e-12);
    }

    #[test]
    fn tail_bound_examples() {
        let t = qf_tail_bound(4.0, 2.0);
        assert!(t.applies && t.bound == 1.0);
        let t = qf_tail_bound(4.0, 4.0);
        assert_relative_eq!(t.bound, (-2.0f64).exp(), epsilon = 1e-14);
        let t = qf_tail_bound(4.0, 1.0);
        assert!(!t.applies);
        assert_eq!(t.bound, 1.0);
    }

    #[test]
    fn even_moments() {
        assert_eq!(gaussian_norm_even_moment(&Matrix::<f64>::identity(2, 2), 4).unwrap(), 8.0);
        assert_eq!(gaussian_norm_even_moment(&Matrix::<f64>::identity(1, 1), 6).unwrap(), 15.0);
        assert_eq!(gaussian_norm_even_moment(&Matrix::<f64>::identity(3, 3), 2).unwrap(), 3.0);
        assert!(matches!(gaussian_norm_even_moment(&Matrix::<f64>::identity(1, 1), 3), Err(Error::UnsupportedOrder(3))));
    }

    #[test]
    fn determinant_bounds() {
        let p = pair(Matrix::identity(2, 2), Matrix::zeros(2, 2));
        let b = det_contiguity_bounds(0.0, &p).unwrap();
        assert_eq!((b.plus_bound, b.minus_bound), (1.0, 1.0));
        let b = det_contiguity_bounds(1.0 / 3.0, &p).unwrap();
        assert_relative_eq!(b.plus_exact, 16.0 / 9.0, epsilon = 1e-12);
        assert!(b.plus_exact <= b.plus_bound);
        assert!(b.minus_exact <= b.minus_bound * (1.0 + 1e-12));
        assert!(matches!(det_contiguity_bounds(0.4, &p), Err(Error::OmegaTooLarge(_))));
    }

    #[test]
    fn sampling_is_deterministic_and_has_right_covariance() {
        let d2 = Matrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let p = pair(d2, Matrix::identity(2, 2));
        let a = sample_gaussian(&p, 50_000, 7).unwrap();
        let b = sample_gaussian(&p, 50_000, 7).unwrap();
        assert_eq!(a, b);
        let cov = a.transpose() * &a / 50_000.0;
        let target = p.covariance();
        assert!((&cov - &target).norm() / target.norm() < 0.05);
    }

    #[test]
    fn local_set_membership() {
        let d2 = Matrix::from_diagonal(&Vector::from_vec(vec![4.0, 1.0]));
        let p = pair(d2, Matrix::identity(2, 2));
        let c = Vector::from_vec(vec![1.0, -1.0]);
        let g = LocalGeometry::new(c.clone(), p, 4.0, DEFAULT_NU).unwrap();
        assert_relative_eq!(g.local_radius, g.r_g * 1.5, epsilon = 1e-14);
        assert!(g.in_local_set(&c).unwrap());
        let edge = &c + Vector::from_vec(vec![g.local_radius / 2.0, 0.0]);
        assert!(g.in_local_set(&edge).unwrap());
        let out = &c + Vector::from_vec(vec![1.01 * g.local_radius / 2.0, 0.0]);
        assert!(!g.in_local_set(&out).unwrap());
        assert!(g.in_local_set(&Vector::zeros(3)).is_err());
    }
}
