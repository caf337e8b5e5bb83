//! Crate-wide error type.

use std::fmt;
use std::io;

/// Errors surfaced by the training lab.
#[derive(Debug)]
pub enum Error {
    /// Tensor or batch dimensions do not line up.
    Shape(String),
    /// A caller violated an operation contract (negative std, nonpositive
    /// score sum, batch too small for a variance estimate, ...).
    Contract(String),
    /// A config or manifest failed validation.
    Config(String),
    /// A dataset file could not be parsed.
    Data(String),
    /// A loss or gradient turned non-finite during training.
    NonFinite { tensor: String, step: usize },
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Config(msg) => write!(f, "invalid config: {msg}"),
            Error::Data(msg) => write!(f, "bad data: {msg}"),
            Error::NonFinite { tensor, step } => {
                write!(f, "non-finite value in `{tensor}` at step {step}")
            }
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
