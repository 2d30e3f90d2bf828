use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("channel error: {0}")]
    Channel(String),

    #[error("not enough images: requested {requested}, only {available} available")]
    Capacity { requested: usize, available: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("need at least 2 samples, got {0}")]
    InsufficientSamples(usize),

    #[error("empty set: {0}")]
    EmptySet(String),

    #[error("non-finite loss at batch {batch_idx}: {detail}")]
    NonFinite { batch_idx: u64, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used in structured CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Shape(_) => "shape",
            Error::Channel(_) => "channel",
            Error::Capacity { .. } => "capacity",
            Error::Config(_) => "config",
            Error::Domain(_) => "domain",
            Error::InsufficientSamples(_) => "insufficient_samples",
            Error::EmptySet(_) => "empty_set",
            Error::NonFinite { .. } => "non_finite",
            Error::Checkpoint(_) => "checkpoint",
            Error::Validation(_) => "validation",
            Error::Conflict(_) => "conflict",
            Error::NotFound(_) => "not_found",
            Error::Tensor(_) => "tensor",
            Error::Json(_) => "json",
        }
    }
}
