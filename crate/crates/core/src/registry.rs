//! Built-in experiment models addressed by id.

use crate::error::{Error, Result};
use crate::inverse::{synthetic, Family, Synthetic, SyntheticOptions};
use crate::linalg::{Matrix, Vector};
use crate::model::{penalize, Objective, PenalizedObjective};
use crate::models::{GaussianLinear, Logistic, Quartic, Quartic1d};

pub const MODEL_IDS: [&str; 6] = ["gaussian-linear", "quartic-1d", "quartic", "logistic", "exp-inverse", "sigmoid-inverse"];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelSpec {
    pub id: String,
    pub n: Option<usize>,
    pub p: Option<usize>,
    pub sigma: Option<f64>,
    pub seed: u64,
    pub deviation_x: Option<f64>,
}

pub struct PenalizedModel {
    pub id: String,
    pub objective: PenalizedObjective<f64, Box<dyn Objective<f64>>>,
    pub x_init: Vector<f64>,
    /// Closed-form optimum when the posterior is Gaussian.
    pub exact_map: Option<Vector<f64>>,
}

pub enum BuiltModel {
    Penalized(PenalizedModel),
    Inverse(Synthetic),
}

/// Instantiates a registry model. Defaults: `gaussian-linear` n=50 p=2,
/// `quartic-1d` n=200, `quartic` n=1000 p=2, `logistic` n=200 p=1, inverse models
/// p=2 n=50 σ=0; every penalized model uses `G² = I`, `x₀ = 0`.
pub fn build(spec: &ModelSpec) -> Result<BuiltModel> {
    let boxed = |l: Box<dyn Objective<f64>>, p: usize, n: Option<usize>| -> Result<PenalizedObjective<f64, Box<dyn Objective<f64>>>> {
        let f = penalize(l, Matrix::identity(p, p), Vector::zeros(p))?;
        Ok(match n {
            Some(n) => f.with_sample_size(n as f64),
            None => f,
        })
    };
    let pen = |id: &str, objective, exact_map| {
        let p = Objective::dim(&objective);
        BuiltModel::Penalized(PenalizedModel { id: id.to_string(), objective, x_init: Vector::zeros(p), exact_map })
    };
    match spec.id.as_str() {
        "gaussian-linear" => {
            let (n, p) = (spec.n.unwrap_or(50), spec.p.unwrap_or(2));
            let m = GaussianLinear::generate(n, p, spec.seed);
            let exact = m.ridge_solution(&Matrix::identity(p, p), &Vector::zeros(p));
            Ok(pen("gaussian-linear", boxed(Box::new(m), p, Some(n))?, Some(exact)))
        }
        "quartic-1d" => {
            let n = spec.n.unwrap_or(200);
            Ok(pen("quartic-1d", boxed(Box::new(Quartic1d { n: n as f64 }), 1, Some(n))?, None))
        }
        "quartic" => {
            let (n, p) = (spec.n.unwrap_or(1000), spec.p.unwrap_or(2));
            Ok(pen("quartic", boxed(Box::new(Quartic { p, n: n as f64 }), p, Some(n))?, None))
        }
        "logistic" => {
            let (n, p) = (spec.n.unwrap_or(200), spec.p.unwrap_or(1));
            Ok(pen("logistic", boxed(Box::new(Logistic::generate(n, p, spec.seed)), p, Some(n))?, None))
        }
        "exp-inverse" | "sigmoid-inverse" => {
            let family = if spec.id == "exp-inverse" { Family::Exp } else { Family::Sigmoid };
            let mut o = SyntheticOptions { seed: spec.seed, ..SyntheticOptions::default() };
            if let Some(n) = spec.n {
                o.n = n;
            }
            if let Some(p) = spec.p {
                o.p = p;
            }
            if let Some(s) = spec.sigma {
                o.sigma = s;
            }
            if let Some(x) = spec.deviation_x {
                o.deviation_x = x;
            }
            Ok(BuiltModel::Inverse(synthetic(family, &o)?))
        }
        other => Err(Error::UnknownModel(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_id_builds() {
        for id in MODEL_IDS {
            let spec = ModelSpec { id: id.into(), n: Some(20), ..Default::default() };
            assert!(build(&spec).is_ok(), "{id}");
        }
        assert!(matches!(build(&ModelSpec { id: "nope".into(), ..Default::default() }), Err(Error::UnknownModel(_))));
    }
}
