use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("unknown gesture {gesture:?} (not present in the manifest class table)")]
    UnknownGesture { gesture: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite activation in encoder layer {layer}")]
    NumericFailure { layer: usize },

    #[error("degenerate example: both mask sets are empty")]
    DegenerateExample,

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("unsupported checkpoint format {found:?} (expected {expected:?})")]
    Format { found: String, expected: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
