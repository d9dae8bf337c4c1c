//! Crate-wide error type.

use std::fmt;

use crate::tensor::TensorError;

#[derive(Debug)]
pub enum Error {
    /// Matrix algebra or tape failure.
    Tensor(TensorError),
    /// A documented precondition was violated by the caller.
    Contract(String),
    /// Invalid configuration (bad field values, impossible combinations).
    Config(String),
    /// A computation produced a non-finite value.
    NonFinite { context: String, step: Option<usize> },
    /// Training loss exceeded the divergence ceiling.
    Diverged { iteration: usize, loss: f64 },
    /// Checkpoint or report I/O failure.
    Io(std::io::Error),
    /// Malformed checkpoint or data file.
    Format(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Tensor(e) => write!(f, "tensor error: {e}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::NonFinite { context, step } => match step {
                Some(s) => write!(f, "non-finite value in {context} at step {s}"),
                None => write!(f, "non-finite value in {context}"),
            },
            Error::Diverged { iteration, loss } => {
                write!(f, "training diverged at iteration {iteration} (loss {loss:e})")
            }
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Tensor(e) => Some(e),
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<TensorError> for Error {
    fn from(e: TensorError) -> Self {
        Error::Tensor(e)
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
