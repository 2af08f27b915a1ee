//! Crate-wide error type.
//!
//! Variants are grouped by how an operator should react, and each group maps
//! to a stable process exit code: bad invocations and configs exit 1, broken
//! or mismatched data files exit 2, failed numerical checks exit 3.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller misuse: bad flag combinations, malformed batches, invalid ranges.
    #[error("usage: {0}")]
    Usage(String),

    /// Invalid or inconsistent configuration values.
    #[error("config: {0}")]
    Config(String),

    /// Operand shapes incompatible with the requested operation.
    #[error("shape mismatch in {op}: left {lhs:?}, right {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Corrupt, truncated, or mismatched data/checkpoint files.
    #[error("format: {0}")]
    Format(String),

    /// A numerical verification (e.g. gradient check) did not pass.
    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn check(msg: impl Into<String>) -> Self {
        Error::CheckFailed(msg.into())
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) | Error::ShapeMismatch { .. } => 1,
            Error::Format(_) | Error::Io(_) => 2,
            Error::CheckFailed(_) => 3,
        }
    }
}
