use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid split: n_target = {n_target} with {points} points (need 1 <= n_target <= {max})", max = points.saturating_sub(1))]
    InvalidSplit { n_target: usize, points: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("corrupt dataset at {path}: {reason}")]
    CorruptDataset { path: PathBuf, reason: String },

    #[error("corrupt checkpoint at {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("missing saved state: {0}")]
    MissingState(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("unknown concept {0}")]
    UnknownConcept(usize),

    #[error("invalid parameter: {0}")]
    InvalidArgument(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("png encoding failed: {0}")]
    Png(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    /// Configuration and validation problems map to exit code 2 in the CLI.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::InvalidSplit { .. }
                | Error::UnknownConcept(_)
                | Error::InvalidArgument(_)
                | Error::Json { .. }
        )
    }
}
