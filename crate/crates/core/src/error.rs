//! Error type shared across the crate.
//!
//! Every fallible public API returns [`Result`]. Variants are grouped by how
//! the command-line driver should report them: usage and shape errors are the
//! caller's fault (exit code 1), verification failures mean the math checks
//! did not pass (exit code 2), and I/O or artifact-format problems are
//! environmental (exit code 3).

use std::path::PathBuf;

/// Crate-wide error enum.
#[derive(Debug, thiserror::Error)]
pub enum SanmError {
    /// Tensor shape mismatch or an operation applied to incompatible shapes.
    #[error("shape error: {0}")]
    Shape(String),

    /// Misuse of the gradient tape (cross-tape operands, non-scalar loss,
    /// backprop through an untracked value).
    #[error("autodiff graph error: {0}")]
    Graph(String),

    /// Invalid configuration value or command-line argument.
    #[error("config error: {0}")]
    Config(String),

    /// Filesystem failure while reading or writing an artifact.
    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A binary or text artifact exists but its contents are malformed
    /// (bad magic, truncated payload, manifest mismatch, ...).
    #[error("format error: {0}")]
    Format(String),

    /// A numerical verification check failed.
    #[error("verification failed: {0}")]
    Verification(String),
}

impl SanmError {
    /// Construct an I/O error with path context.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SanmError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            SanmError::Shape(_) | SanmError::Graph(_) | SanmError::Config(_) => 1,
            SanmError::Verification(_) => 2,
            SanmError::Io { .. } | SanmError::Format(_) => 3,
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, SanmError>;
