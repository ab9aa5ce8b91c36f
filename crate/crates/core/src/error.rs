use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unsupported dimension {0}: sparse updates address at most 2^31 coordinates")]
    UnsupportedDimension(u64),

    #[error("corrupt update: {0}")]
    CorruptUpdate(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("insufficient data: manifest is {shortfall_hours:.4} h short of the {target_hours} h target")]
    InsufficientData { target_hours: f64, shortfall_hours: f64 },

    #[error("corrupt file {path} at byte offset {offset}: {reason}")]
    Corrupt {
        path: String,
        offset: u64,
        reason: String,
    },

    #[error("missing prerequisite {artifact}: {hint}")]
    MissingPrerequisite { artifact: String, hint: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {reason}")]
    Parse { what: String, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl AsRef<Path>, offset: u64, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.as_ref().display().to_string(),
            offset,
            reason: reason.into(),
        }
    }

    pub(crate) fn missing(artifact: impl AsRef<Path>, hint: impl Into<String>) -> Self {
        Error::MissingPrerequisite {
            artifact: artifact.as_ref().display().to_string(),
            hint: hint.into(),
        }
    }

    /// True for errors caused by input data rather than by usage or a bug.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Corrupt { .. }
                | Error::CorruptUpdate(_)
                | Error::InsufficientData { .. }
                | Error::MissingPrerequisite { .. }
                | Error::Parse { .. }
                | Error::Io { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
