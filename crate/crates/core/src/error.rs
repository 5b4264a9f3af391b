use thiserror::Error;

#[derive(Debug, Error)]
pub enum GofError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid sample size: need at least {min} observations, got {got}")]
    InvalidSize { min: usize, got: usize },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid response: {0}")]
    InvalidResponse(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("zero-norm vector has no defined angle")]
    DegeneratePair,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GofError>;
