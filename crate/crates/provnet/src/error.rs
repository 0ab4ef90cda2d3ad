//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Shape or dimension disagreement between tensors/layers.
    #[error("dimension error: {0}")]
    Dim(String),

    /// Invalid parameter value (probability out of range, σ ≤ 0, ...).
    #[error("parameter error: {0}")]
    Param(String),

    /// Dataset files missing, malformed, or inconsistent.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite loss or activation during training.
    #[error("numeric divergence: {0}")]
    Numeric(String),

    /// Configuration schema violation (unknown key, bad value).
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint container problems (magic, version, truncation, fingerprint).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
