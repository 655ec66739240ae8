//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A numeric-domain precondition was violated (non-finite input,
    /// out-of-range parameter, zero-norm vector, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Shapes or dimensions of inputs do not match a contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// Configuration rejected during validation. The message names the
    /// offending field.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset files missing or malformed.
    #[error("data error: {0}")]
    Data(String),

    /// Training aborted because a loss became non-finite. Carries a
    /// diagnostic snapshot of where it happened.
    #[error("non-finite loss at epoch {epoch}, batch {batch}: align={align}, kl={kl}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        align: f64,
        kl: f64,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
