use thiserror::Error;

/// Errors raised across the library. Gate failures are never errors; they are
/// recorded on the certificate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite objective value at {point:?}")]
    Domain { point: Vec<f64> },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("finite-difference stencil left the domain at offset {offset}")]
    StencilOutOfDomain { offset: f64 },
    #[error("matrix is not positive definite within the jitter cap")]
    SingularPrecision,
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),
    #[error("unsupported order {0}")]
    UnsupportedOrder(usize),
    #[error("omega = {0} exceeds 1/3")]
    OmegaTooLarge(f64),
    #[error("omega = {0} outside the admissible range")]
    OmegaOutOfRange(f64),
    #[error("solver did not converge after {iterations} iterations (gradient norm {grad_norm})")]
    NotConverged { iterations: usize, grad_norm: f64 },
    #[error("negative Hessian at the optimum is not positive definite")]
    IndefiniteAtOptimum,
    #[error("curvature matrix is singular")]
    CurvatureSingular,
    #[error("the penalized optimum lies outside the prior concentration set")]
    CenterOutsideX0,
    #[error("forward map gradients are rank deficient ({skipped} of {total} directions degenerate)")]
    RankDeficientForwardMap { skipped: usize, total: usize },
    #[error("every proposal draw was rejected")]
    AllDrawsRejected,
    #[error("importance weights degenerate: effective sample size {0}")]
    DegenerateWeights(f64),
    #[error("grid box too small: boundary mass {0}")]
    BoxTooSmall(f64),
    #[error("grid too large: {0} points")]
    GridTooLarge(usize),
    #[error("unknown model id `{0}`")]
    UnknownModel(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}
