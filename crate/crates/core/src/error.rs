//! Error type shared by every module of the workbench.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, topology documents or options that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Values supplied by the caller outside their documented domain.
    #[error("input error: {0}")]
    Input(String),

    /// A training run produced non-finite values or otherwise diverged.
    #[error("training error: {0}")]
    Training(String),

    /// Threshold balancing could not assign a threshold.
    #[error("conversion error: {0}")]
    Conversion(String),

    #[error("bad magic number in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },

    #[error("truncated file {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("label {label} out of range for {classes} classes in {path}")]
    LabelOutOfRange {
        path: PathBuf,
        label: usize,
        classes: usize,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
pub(crate) use config_err;
