//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch between tensors or configs.
    #[error("dimension error: {0}")]
    Dim(String),

    /// Invalid configuration value (rank < 1, heads not dividing width, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid input data (unknown class, empty batch, degenerate box, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Attention or prompting received an empty key/value context.
    #[error("empty context: {0}")]
    EmptyContext(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed checkpoint or data file; `offset` is the byte position.
    #[error("format error at offset {offset}: {message}")]
    Format { offset: u64, message: String },

    /// No ground truth available for any evaluated class.
    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code, used by the CLI error protocol.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Dim(_) => "DIM",
            Error::Config(_) => "CONFIG",
            Error::Input(_) => "INPUT",
            Error::EmptyContext(_) => "EMPTY_CONTEXT",
            Error::Numeric(_) => "NUMERIC",
            Error::Format { .. } => "FORMAT",
            Error::Eval(_) => "EVAL",
            Error::Io(_) => "IO",
            Error::Json(_) => "JSON",
        }
    }
}
