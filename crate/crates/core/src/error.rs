use std::path::PathBuf;

use thiserror::Error;

/// A single rejected configuration field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub key: String,
    pub message: String,
}

impl std::fmt::Display for FieldError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

#[derive(Debug, Error)]
pub enum FloraError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("averaging requires homogeneous ranks, got {ranks:?}")]
    UnsupportedHeterogeneousRanks { ranks: Vec<usize> },

    #[error("invalid configuration:\n{}", format_fields(.0))]
    Config(Vec<FieldError>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("internal consistency check failed: {0}")]
    Internal(String),
}

fn format_fields(fields: &[FieldError]) -> String {
    fields
        .iter()
        .map(|f| format!("  {f}"))
        .collect::<Vec<_>>()
        .join("\n")
}

pub type Result<T, E = FloraError> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> FloraError {
    FloraError::InvalidArgument(msg.into())
}
