//! Laplace approximations of penalized log-densities with explicit
//! finite-sample error certificates, plus numerical verification tools.
//!
//! The numerical core is generic over [`scalar::Real`]; the aliases below fix
//! it to `f64`, which is what the CLI and the verification suite use.

pub mod certificate;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod inverse;
pub mod iterations;
pub mod linalg;
pub mod model;
pub mod models;
pub mod pipeline;
pub mod qf;
pub mod registry;
pub mod remainder;
pub mod rng;
pub mod scalar;
pub mod solver;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Vector = linalg::Vector<f64>;
pub type Matrix = linalg::Matrix<f64>;
