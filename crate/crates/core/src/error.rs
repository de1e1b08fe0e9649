use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("encoder backend '{backend}' unavailable: {reason}")]
    BackendUnavailable { backend: String, reason: String },

    #[error("cache integrity error for key '{key}': {reason}")]
    CacheIntegrity { key: String, reason: String },

    #[error("no candidates: {0}")]
    NoCandidates(String),

    #[error("encode failed for noun '{noun}' with template '{template}'")]
    NounEncode {
        noun: String,
        template: String,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged (non-finite loss) at phase '{phase}', seed {seed}, step {step}")]
    Divergence { phase: String, seed: u64, step: usize },

    #[error("non-finite gradient at integration step {step}")]
    NonFiniteGradient { step: usize },

    #[error("student isolation violated: {0}")]
    StudentIsolation(String),

    #[error("record format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
