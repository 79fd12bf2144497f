//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform to a primitive's signature.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// An operation produced NaN or infinity. Values are never allowed to
    /// propagate silently.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// A precondition on an argument failed.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Misuse of the autodiff tape (unknown value, double backward, ...).
    #[error("tape error: {0}")]
    Tape(String),

    /// Training left the finite regime; carries partial progress context.
    #[error("divergence: {0}")]
    Divergence(String),

    /// A persisted artifact failed an integrity or version check.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}
