use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("payload error in {path}: {reason}")]
    Payload { path: PathBuf, reason: String },

    #[error("checkpoint does not match: {0}")]
    Mismatch(String),

    #[error("unrecoverable input: {0}")]
    UnrecoverableInput(String),

    #[error("could not place {placed} of {requested} buildings after {attempts} attempts")]
    Placement {
        placed: usize,
        requested: usize,
        attempts: usize,
    },

    #[error("region too small: {0}")]
    RegionTooSmall(String),

    #[error("non-finite {term} loss at step {step}")]
    NonFinite { term: &'static str, step: usize },

    #[error("empty test set")]
    EmptyTestSet,

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn payload(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Payload {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
