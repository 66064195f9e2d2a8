use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("boundary law is not positive at the requested point: g = {0}")]
    BoundaryLawNotElliptic(f64),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("barrier certification failed at x = {point:?}: value {value} does not exceed the margin")]
    BarrierFailure { point: Vec<f64>, value: f64 },
    #[error("{stage} did not converge after {sweeps} sweeps (last residual {residual:e})")]
    Nonconvergence { stage: String, sweeps: usize, residual: f64, history: Vec<f64> },
    #[error("stencil leaves the computational mask at node {0}")]
    BoundaryStencil(usize),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("insufficient resolution: {0}")]
    Resolution(String),
    #[error("singular transform: {0}")]
    SingularTransform(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
