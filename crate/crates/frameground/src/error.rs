//! Crate-wide error type.
//!
//! Errors are grouped by how the command line reports them: usage problems
//! (bad flags, malformed config) exit with 1, data problems (missing or
//! corrupt files, shape mismatches) with 2, numeric problems (non-finite
//! values during training) with 3.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration or flag combination supplied by the caller.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A file could not be read or written.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A manifest, config, log, or checkpoint failed to parse.
    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    /// Loaded data violated a shape or value contract.
    #[error("invalid data: {0}")]
    Data(String),

    /// A checkpoint was rejected (bad magic, version, digest, or shape).
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    /// A non-finite value surfaced during training or evaluation.
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    /// Wrap an io error with the path it occurred on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Io { .. } | Error::Parse { .. } | Error::Data(_) | Error::Checkpoint(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}
