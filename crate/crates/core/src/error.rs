use std::path::PathBuf;

/// Errors produced anywhere in the probing toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("undefined scale: {0}")]
    UndefinedScale(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("dtype error: {0}")]
    Dtype(String),

    #[error("corrupt store at {path}: {reason}")]
    CorruptStore { path: PathBuf, reason: String },

    #[error("unsupported store schema version {0}")]
    UnsupportedVersion(u32),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
