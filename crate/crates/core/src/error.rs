use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },
    #[error("non-finite loss at step {step}: {diagnostics}")]
    NonFinite { step: usize, diagnostics: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Load {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}
