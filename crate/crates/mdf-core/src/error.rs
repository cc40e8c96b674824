//! Error type shared across the core library.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MdfError {
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("level error: {0}")]
    Level(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("empty-set error: {0}")]
    EmptySet(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MdfError>;
