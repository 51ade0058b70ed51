use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the segmentation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A shape or dimension contract was violated.
    #[error("shape error: {0}")]
    Shape(String),

    /// A value lies outside the domain required by the caller.
    #[error("invalid value: {0}")]
    InvalidValue(String),

    /// A documented precondition does not hold.
    #[error("precondition failed: {0}")]
    Precondition(String),

    /// Training diverged.
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the caller's inputs rather than the runtime.
    pub fn is_precondition(&self) -> bool {
        matches!(
            self,
            Error::Shape(_) | Error::InvalidValue(_) | Error::Precondition(_)
        )
    }
}

/// Small helpers for JSON files shared by the on-disk formats.
pub(crate) mod json_file {
    use std::fs;
    use std::path::Path;

    use serde::de::DeserializeOwned;
    use serde::Serialize;

    use super::{Error, Result};

    pub fn write<T: Serialize>(path: &Path, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read<T: DeserializeOwned>(path: &Path) -> Result<T> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}
