use thiserror::Error;

/// Errors surfaced by any saft-core operation.
#[derive(Debug, Error)]
pub enum SaftError {
    /// A vector that must have positive norm was (numerically) zero.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Tensor or parameter shapes do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A configuration value violates its documented invariant.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A persisted artifact is corrupt, truncated, or has the wrong version.
    #[error("bad file format: {0}")]
    Format(String),

    /// A class required by an operation is absent from the description bank.
    #[error("class not in description bank: {0}")]
    MissingClass(String),

    /// The external description generator failed after exhausting retries.
    #[error("description generation failed after {retries} retries: {message}")]
    Generation { message: String, retries: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SaftError>;
