use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library and the CLI.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),
    /// A caller violated an operation contract (shape mismatch, bad index, ...).
    #[error("contract error: {0}")]
    Contract(String),
    /// Non-finite input where finite values are required.
    #[error("invalid value: {0}")]
    InvalidValue(String),
    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Divergence(String),
    /// A pipeline stage needs an artifact that has not been produced yet.
    #[error("missing upstream artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    /// A file on disk does not follow the expected container layout.
    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
