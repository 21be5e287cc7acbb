use thiserror::Error;

/// Error type shared across the toolkit.
#[derive(Debug, Error)]
pub enum TomoError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid sparsity factor {factor} for {n_angles} angles")]
    InvalidSparsity { factor: usize, n_angles: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("needle placement outside the field of view: {0}")]
    Placement(String),

    #[error("numerical failure: {0}")]
    NonFinite(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TomoError>;
