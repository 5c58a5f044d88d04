//! Error type shared across the crate.
//!
//! Variants map onto the failure classes the CLI distinguishes by exit code:
//! configuration problems, data/ingestion problems, and numerical failures.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or graph shape mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// A public operation produced a NaN or infinity.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Invalid configuration (bad hyperparameter, unknown key, incompatible options).
    #[error("config error: {0}")]
    Config(String),

    /// Dataset ingestion failure (bad magic, truncated file, count mismatch, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Numerical failure during optimization (divergence, non-finite objective).
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
