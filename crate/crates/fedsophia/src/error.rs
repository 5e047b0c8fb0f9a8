//! Error type shared across the workbench.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible matrix/vector dimensions.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Numerically invalid input (non-finite values, division by zero, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed input file (bad magic, truncated payload, ...).
    #[error("format error: {0}")]
    Format(String),

    /// Mutually inconsistent inputs (e.g. image/label count mismatch).
    #[error("consistency error: {0}")]
    Consistency(String),

    /// Not enough data for the requested operation.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// An iterative solver left its stability region.
    #[error("divergence: {0}")]
    Divergence(String),

    /// Invalid experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
