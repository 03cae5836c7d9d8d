use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum EditError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("unknown word {word:?} not in vocabulary")]
    UnknownWord { word: String },
    #[error("token sequence overflow: {got} tokens exceed capacity {cap}")]
    TokenOverflow { got: usize, cap: usize },
    #[error("unknown attribute {0}")]
    UnknownAttribute(usize),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("incompatible artifacts: {0}")]
    Incompatible(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EditError>;
