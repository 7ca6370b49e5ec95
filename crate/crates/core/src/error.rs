use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum PlaError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("insufficient data: need {needed} identities, found {found}")]
    InsufficientData { needed: usize, found: usize },

    #[error("invalid measurement: {0}")]
    InvalidMeasurement(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = PlaError> = std::result::Result<T, E>;

impl PlaError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
