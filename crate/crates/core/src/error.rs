use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the unmixing library.
#[derive(Debug, Error)]
pub enum UnmixError {
    #[error("pixel index {index} is out of range for a scene of {pixel_count} pixels")]
    InvalidIndex { index: usize, pixel_count: usize },

    #[error("pixel index {0} appears more than once")]
    DuplicateIndex(usize),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("malformed matrix file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, UnmixError>;

pub(crate) fn ensure_dims(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(UnmixError::Dimension(msg()))
    }
}

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(UnmixError::InvalidInput(format!("{what} contains non-finite values")))
    }
}
