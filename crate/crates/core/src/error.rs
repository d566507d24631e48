use std::path::PathBuf;

use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up (channel mismatch, odd pooling extent, ...).
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration value is out of its documented range.
    #[error("config error: {0}")]
    Config(String),

    /// An API contract was violated (e.g. backward on a non-scalar loss).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value surfaced where the pipeline cannot continue.
    #[error("numerical abort: {0}")]
    Numeric(String),

    /// The requested file does not exist.
    #[error("file not found: {path}")]
    FileNotFound { path: PathBuf },

    /// The file exists but its bytes are not a valid grid file.
    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },

    /// The file parsed but holds a different dtype/rank than requested.
    #[error("format mismatch in {path}: {reason}")]
    FormatMismatch { path: PathBuf, reason: String },

    /// Underlying I/O failure, with the path that triggered it.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code contract: 2 for usage/config/shape/file problems,
    /// 3 for numerical aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}
