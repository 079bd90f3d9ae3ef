//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the estimation library and the simulation harness.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition (shape mismatch,
    /// out-of-range index, non-finite entry, empty input, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A factorization failed: the matrix was singular or not positive
    /// definite where the algorithm requires it.
    #[error("singular system: {0}")]
    Singular(String),

    /// A numerical failure inside the recursive update at a known time
    /// instance; carries enough context to locate the offending step.
    #[error("numerical failure at t={t}: {msg}")]
    Numerical { t: usize, msg: String },

    /// A scale factor left the representable floating-point range
    /// (e.g. forgetting-factor weights over a very long horizon).
    #[error("scale out of range: {0}")]
    Range(String),

    /// Configuration could not be parsed or failed validation.
    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand used throughout for precondition failures.
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
