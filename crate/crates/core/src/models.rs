//! Built-in likelihoods with analytic derivatives up to fourth order.

use serde::{Deserialize, Serialize};

use crate::linalg::{Matrix, Vector};
use crate::model::Objective;
use crate::rng::{normal_block, stream};
use rand::Rng;

/// `log(1 + e^s)` without overflow.
pub fn softplus(s: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p()
}

pub fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Gaussian linear regression `ℓ(x) = −½‖y − Ax‖²`.
#[derive(Debug, Clone)]
pub struct GaussianLinear {
    pub design: Matrix<f64>,
    pub response: Vector<f64>,
    // AᵀA, Aᵀy, yᵀy
    gram: Matrix<f64>,
    cross: Vector<f64>,
    yy: f64,
}

impl GaussianLinear {
    pub fn new(design: Matrix<f64>, response: Vector<f64>) -> Self {
        let gram = design.transpose() * &design;
        let cross = design.transpose() * &response;
        let yy = response.norm_squared();
        Self { design, response, gram, cross, yy }
    }

    /// `A` and `x̄` standard normal, `y = A x̄ + ε`.
    pub fn generate(n: usize, p: usize, seed: u64) -> Self {
        let a = normal_block(seed, "models/gaussian-linear/design", n, p);
        let design = Matrix::from_row_slice(n, p, &a);
        let truth = Vector::from_vec(normal_block(seed, "models/gaussian-linear/truth", 1, p));
        let noise = Vector::from_vec(normal_block(seed, "models/gaussian-linear/noise", n, 1));
        let response = &design * truth + noise;
        Self::new(design, response)
    }

    /// `(AᵀA + G²)^{-1}(Aᵀy + G²x₀)`.
    pub fn ridge_solution(&self, g2: &Matrix<f64>, x0: &Vector<f64>) -> Vector<f64> {
        let lhs = &self.gram + g2;
        let rhs = &self.cross + g2 * x0;
        lhs.cholesky().expect("ridge system is SPD").solve(&rhs)
    }
}

impl Objective<f64> for GaussianLinear {
    fn dim(&self) -> usize {
        self.design.ncols()
    }
    fn value(&self, x: &Vector<f64>) -> f64 {
        let p = x.len();
        let mut q = 0.0;
        let mut c = 0.0;
        for j in 0..p {
            let col = self.gram.column(j);
            let mut row = 0.0;
            for i in 0..p {
                row += col[i] * x[i];
            }
            q += x[j] * row;
            c += self.cross[j] * x[j];
        }
        -0.5 * (self.yy - 2.0 * c + q)
    }
    fn analytic_gradient(&self, x: &Vector<f64>) -> Option<Vector<f64>> {
        Some(self.design.transpose() * (&self.response - &self.design * x))
    }
    fn analytic_hessian(&self, _x: &Vector<f64>) -> Option<Matrix<f64>> {
        Some(-(self.design.transpose() * &self.design))
    }
    fn analytic_directional(&self, _x: &Vector<f64>, _u: &Vector<f64>, _order: usize) -> Option<f64> {
        Some(0.0)
    }
}

/// `ℓ(x) = −n[(x − 1)²/2 + x⁴/4]` on the line.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Quartic1d {
    pub n: f64,
}

impl Objective<f64> for Quartic1d {
    fn dim(&self) -> usize {
        1
    }
    fn value(&self, x: &Vector<f64>) -> f64 {
        let t = x[0];
        -self.n * (0.5 * (t - 1.0).powi(2) + 0.25 * t.powi(4))
    }
    fn analytic_gradient(&self, x: &Vector<f64>) -> Option<Vector<f64>> {
        let t = x[0];
        Some(Vector::from_element(1, -self.n * (t - 1.0 + t.powi(3))))
    }
    fn analytic_hessian(&self, x: &Vector<f64>) -> Option<Matrix<f64>> {
        Some(Matrix::from_element(1, 1, -self.n * (1.0 + 3.0 * x[0] * x[0])))
    }
    fn analytic_directional(&self, x: &Vector<f64>, u: &Vector<f64>, order: usize) -> Option<f64> {
        match order {
            3 => Some(-self.n * 6.0 * x[0] * u[0].powi(3)),
            4 => Some(-self.n * 6.0 * u[0].powi(4)),
            _ => None,
        }
    }
}

/// `ℓ(x) = −n (¼‖x‖⁴ + ‖x − 1‖²)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Quartic {
    pub p: usize,
    pub n: f64,
}

impl Objective<f64> for Quartic {
    fn dim(&self) -> usize {
        self.p
    }
    fn value(&self, x: &Vector<f64>) -> f64 {
        let r2 = x.norm_squared();
        -self.n * (0.25 * r2 * r2 + x.iter().map(|v| (v - 1.0).powi(2)).sum::<f64>())
    }
    fn analytic_gradient(&self, x: &Vector<f64>) -> Option<Vector<f64>> {
        let r2 = x.norm_squared();
        Some(-(x * r2 + x.map(|v| 2.0 * (v - 1.0))) * self.n)
    }
    fn analytic_hessian(&self, x: &Vector<f64>) -> Option<Matrix<f64>> {
        let r2 = x.norm_squared();
        let p = self.p;
        Some(-(Matrix::identity(p, p) * (r2 + 2.0) + x * x.transpose() * 2.0) * self.n)
    }
    fn analytic_directional(&self, x: &Vector<f64>, u: &Vector<f64>, order: usize) -> Option<f64> {
        let uu = u.norm_squared();
        match order {
            3 => Some(-6.0 * self.n * x.dot(u) * uu),
            4 => Some(-6.0 * self.n * uu * uu),
            _ => None,
        }
    }
}

/// Logistic regression `ℓ(x) = Σ y_i a_iᵀx − log(1 + e^{a_iᵀx})`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Logistic {
    pub design: Matrix<f64>,
    pub labels: Vec<f64>,
}

impl Logistic {
    /// `a_i ~ N(0, I)`, labels drawn at a fixed truth with entries alternating
    /// `±0.5`.
    pub fn generate(n: usize, p: usize, seed: u64) -> Self {
        let a = normal_block(seed, "models/logistic/design", n, p);
        let design = Matrix::from_row_slice(n, p, &a);
        let truth = Vector::from_iterator(p, (0..p).map(|j| if j % 2 == 0 { 0.5 } else { -0.5 }));
        let mut rng = stream(seed, "models/logistic/labels", 0);
        let labels = (0..n)
            .map(|i| {
                let pr = sigmoid(design.row(i).transpose().dot(&truth));
                if rng.random::<f64>() < pr {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Self { design, labels }
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    fn scores(&self, x: &Vector<f64>) -> Vector<f64> {
        &self.design * x
    }
}

impl Objective<f64> for Logistic {
    fn dim(&self) -> usize {
        self.design.ncols()
    }
    fn value(&self, x: &Vector<f64>) -> f64 {
        let s = self.scores(x);
        let terms: Vec<f64> = s.iter().zip(&self.labels).map(|(&si, &yi)| yi * si - softplus(si)).collect();
        crate::linalg::pairwise_sum(&terms)
    }
    fn analytic_gradient(&self, x: &Vector<f64>) -> Option<Vector<f64>> {
        let s = self.scores(x);
        let r = Vector::from_iterator(s.len(), s.iter().zip(&self.labels).map(|(&si, &yi)| yi - sigmoid(si)));
        Some(self.design.transpose() * r)
    }
    fn analytic_hessian(&self, x: &Vector<f64>) -> Option<Matrix<f64>> {
        let s = self.scores(x);
        let w = s.map(|si| {
            let pi = sigmoid(si);
            pi * (1.0 - pi)
        });
        let mut wa = self.design.clone();
        for (i, mut row) in wa.row_iter_mut().enumerate() {
            row *= w[i];
        }
        Some(-(self.design.transpose() * wa))
    }
    fn analytic_directional(&self, x: &Vector<f64>, u: &Vector<f64>, order: usize) -> Option<f64> {
        let s = self.scores(x);
        let v = &self.design * u;
        let terms: Vec<f64> = s
            .iter()
            .zip(v.iter())
            .map(|(&si, &vi)| {
                let pi = sigmoid(si);
                let w = pi * (1.0 - pi);
                match order {
                    3 => -w * (1.0 - 2.0 * pi) * vi.powi(3),
                    _ => -w * (1.0 - 6.0 * w) * vi.powi(4),
                }
            })
            .collect();
        match order {
            3 | 4 => Some(crate::linalg::pairwise_sum(&terms)),
            _ => None,
        }
    }
    fn gauss_newton_curvature(&self, x: &Vector<f64>) -> Option<Matrix<f64>> {
        self.analytic_hessian(x).map(|h| -h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{fd_directional, fd_gradient, fd_hessian};

    fn check_derivatives(obj: &(impl Objective<f64> + ?Sized), x: &Vector<f64>, u: &Vector<f64>) {
        let g = obj.analytic_gradient(x).unwrap();
        let gf = fd_gradient(obj, x).unwrap();
        assert!((&g - &gf).norm() <= 1e-5 * (1.0 + g.norm()), "gradient {g} vs {gf}");
        let h = obj.analytic_hessian(x).unwrap();
        let hf = fd_hessian(obj, x).unwrap();
        assert!((&h - &hf).norm() <= 1e-5 * (1.0 + h.norm()), "hessian");
        for k in [3, 4] {
            let a = obj.analytic_directional(x, u, k).unwrap();
            let f = fd_directional(obj, x, u, k).unwrap();
            assert!((a - f).abs() <= 1e-3 * (1.0 + a.abs()), "order {k}: {a} vs {f}");
        }
    }

    #[test]
    fn logistic_at_zero() {
        let m = Logistic::generate(40, 3, 1);
        assert!((m.value(&Vector::zeros(3)) + 40.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn analytic_matches_fd() {
        let x3 = Vector::from_vec(vec![0.3, -0.2, 0.5]);
        let u3 = Vector::from_vec(vec![0.4, 0.1, -0.7]);
        check_derivatives(&Logistic::generate(30, 3, 2), &x3, &u3);
        check_derivatives(&Quartic { p: 3, n: 2.0 }, &x3, &u3);
        check_derivatives(&GaussianLinear::generate(10, 3, 4), &x3, &u3);
        check_derivatives(&Quartic1d { n: 5.0 }, &Vector::from_vec(vec![0.7]), &Vector::from_vec(vec![1.0]));
    }

    #[test]
    fn stable_link_functions() {
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-16);
        assert!(sigmoid(-1000.0) >= 0.0 && sigmoid(1000.0) <= 1.0);
    }
}
