//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or axis mismatch between tensors participating in an op.
    #[error("dimension error in {op}: axis {axis}: {detail}")]
    Dimension {
        op: &'static str,
        axis: usize,
        detail: String,
    },

    /// A caller violated an operation's contract (preconditions).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite values or other numeric breakdown.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An object was used in a state it has not reached yet.
    #[error("state error: {0}")]
    State(String),

    /// Malformed on-disk data.
    #[error("format error: {0}")]
    Format(String),

    /// Bad run configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn dimension(op: &'static str, axis: usize, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            axis,
            detail: detail.into(),
        }
    }
}
