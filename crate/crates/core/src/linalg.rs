//! Dense symmetric linear algebra on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub type Vector<T> = DVector<T>;
pub type Matrix<T> = DMatrix<T>;

/// Returns `(a + aᵀ) / 2`.
pub fn symmetrize<T: Real>(a: &Matrix<T>) -> Matrix<T> {
    (a + a.transpose()) * T::lit(0.5)
}

pub fn quad_form<T: Real>(a: &Matrix<T>, u: &Vector<T>) -> T {
    u.dot(&(a * u))
}

/// Cholesky factor with escalating diagonal jitter.
///
/// Tries the plain matrix, then adds `1e-12·‖A‖` and grows it tenfold up to
/// `1e-6·‖A‖`. Returns the factor and the jitter actually added.
pub fn cholesky_jitter<T: Real>(a: &Matrix<T>) -> Result<(Cholesky<T, Dyn>, T)> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch { expected: a.nrows(), got: a.ncols() });
    }
    if a.iter().any(|v| !v.is_finite_value()) {
        return Err(Error::SingularPrecision);
    }
    let sym = symmetrize(a);
    if let Some(ch) = Cholesky::new(sym.clone()) {
        return Ok((ch, T::zero()));
    }
    let scale = sym.norm().max(T::lit(f64::MIN_POSITIVE));
    let mut jitter = T::lit(1e-12) * scale;
    let cap = T::lit(1e-6) * scale * T::lit(1.000001);
    while jitter <= cap {
        let mut shifted = sym.clone();
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += jitter;
        }
        if let Some(ch) = Cholesky::new(shifted) {
            return Ok((ch, jitter));
        }
        jitter *= T::lit(10.0);
    }
    Err(Error::SingularPrecision)
}

pub fn sym_eigen<T: Real>(a: &Matrix<T>) -> SymmetricEigen<T, Dyn> {
    SymmetricEigen::new(symmetrize(a))
}

/// Eigenvalues sorted in non-increasing order.
pub fn sorted_eigenvalues<T: Real>(a: &Matrix<T>) -> Vec<T> {
    let mut ev: Vec<T> = sym_eigen(a).eigenvalues.iter().copied().collect();
    ev.sort_by(|x, y| y.partial_cmp(x).unwrap_or(std::cmp::Ordering::Equal));
    ev
}

/// Symmetric PSD square root, eigenvalues clamped at zero.
pub fn sym_sqrt<T: Real>(a: &Matrix<T>) -> Matrix<T> {
    let eig = sym_eigen(a);
    let vals = eig.eigenvalues.map(|v| v.max(T::zero()).sqrt());
    &eig.eigenvectors * Matrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Inverse symmetric square root; fails when an eigenvalue is below
/// `1e-12·λ_max`.
pub fn sym_inv_sqrt<T: Real>(a: &Matrix<T>) -> Result<Matrix<T>> {
    let eig = sym_eigen(a);
    let top = eig.eigenvalues.iter().fold(T::zero(), |m, &v| m.max(v.abs()));
    let floor = T::lit(1e-12) * top;
    if top <= T::zero() || eig.eigenvalues.iter().any(|&v| v <= floor) {
        return Err(Error::SingularPrecision);
    }
    let vals = eig.eigenvalues.map(|v| T::one() / v.sqrt());
    Ok(&eig.eigenvectors * Matrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// Spectral norm of a symmetric matrix.
pub fn op_norm_sym<T: Real>(a: &Matrix<T>) -> T {
    sym_eigen(a).eigenvalues.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
}

/// Trace norm `Σ|λ_j|` of a symmetric matrix.
pub fn trace_norm_sym<T: Real>(a: &Matrix<T>) -> T {
    sym_eigen(a).eigenvalues.iter().fold(T::zero(), |s, &v| s + v.abs())
}

pub fn min_eigenvalue<T: Real>(a: &Matrix<T>) -> T {
    sym_eigen(a).eigenvalues.iter().fold(T::max_value().unwrap(), |m, &v| m.min(v))
}

pub fn max_eigenvalue<T: Real>(a: &Matrix<T>) -> T {
    sym_eigen(a).eigenvalues.iter().fold(T::min_value().unwrap(), |m, &v| m.max(v))
}

/// `L⁻¹ A L⁻ᵀ` where `B = LLᵀ`; shares its spectrum with `B^{-1/2} A B^{-1/2}`.
pub fn whiten<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    let (ch, _) = cholesky_jitter(b)?;
    let l = ch.l();
    let left = l.solve_lower_triangular(a).ok_or(Error::SingularPrecision)?;
    let both = l.solve_lower_triangular(&left.transpose()).ok_or(Error::SingularPrecision)?;
    Ok(symmetrize(&both))
}

/// Smallest generalized eigenvalue of the pencil `(A, B)`, `B` SPD.
pub fn min_generalized_eigenvalue<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<T> {
    Ok(min_eigenvalue(&whiten(a, b)?))
}

/// Largest generalized eigenvalue of the pencil `(A, B)`, `B` SPD.
pub fn max_generalized_eigenvalue<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<T> {
    Ok(max_eigenvalue(&whiten(a, b)?))
}

/// Pairwise summation; the result depends only on the input order.
pub fn pairwise_sum<T: Real>(xs: &[T]) -> T {
    const LEAF: usize = 32;
    if xs.len() <= LEAF {
        return xs.iter().fold(T::zero(), |s, &v| s + v);
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Stable `log Σ exp(v_i)`; `-∞` entries are ignored.
pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let m = xs.iter().fold(T::min_value().unwrap(), |m, &v| m.max(v));
    if !m.is_finite_value() {
        return m;
    }
    let terms: Vec<T> = xs.iter().map(|&v| (v - m).exp()).collect();
    m + pairwise_sum(&terms).ln()
}
