//! Crate-wide error type.

use std::fmt;

/// Errors produced by the LTDL toolkit.
#[derive(Debug)]
pub enum LtdlError {
    /// A caller-supplied argument violates a precondition.
    Argument(String),
    /// Shapes of operands are inconsistent.
    Shape(String),
    /// A file does not conform to an expected on-disk format.
    Format { message: String, offset: Option<u64> },
    /// A numerical invariant was violated (NaN/Inf, failed factorization).
    Numerical(String),
    /// An internal invariant that callers cannot trigger was violated.
    Internal(String),
    Io(std::io::Error),
}

impl fmt::Display for LtdlError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LtdlError::Argument(msg) => write!(f, "invalid argument: {msg}"),
            LtdlError::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            LtdlError::Format { message, offset } => match offset {
                Some(off) => write!(f, "format error at byte {off}: {message}"),
                None => write!(f, "format error: {message}"),
            },
            LtdlError::Numerical(msg) => write!(f, "numerical error: {msg}"),
            LtdlError::Internal(msg) => write!(f, "internal error: {msg}"),
            LtdlError::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for LtdlError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            LtdlError::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for LtdlError {
    fn from(err: std::io::Error) -> Self {
        LtdlError::Io(err)
    }
}

pub type Result<T> = std::result::Result<T, LtdlError>;
