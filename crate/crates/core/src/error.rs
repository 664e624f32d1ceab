use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid simplex point: {0}")]
    InvalidPoint(String),
    #[error("degenerate point: no coordinate above threshold {eta}")]
    DegeneratePoint { eta: f64 },
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("solver did not converge: {0}")]
    NonConvergence(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("invalid split spec: {0}")]
    InvalidSplit(String),
    #[error("split control failed to absorb: {0}")]
    SplitCalibration(String),
    #[error("budget exceeded: {0}")]
    Budget(String),
    #[error("{0}")]
    Precondition(String),
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
