use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: invalid JSON: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("annotation value {value} at byte {offset} is outside [0, 100]")]
    ValueRange { value: i64, offset: usize },

    #[error("malformed annotation at byte {offset}: {reason}")]
    MalformedAnnotation { offset: usize, reason: String },

    #[error("{0} out of range")]
    Range(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("feature error: {0}")]
    Feature(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("division by zero: {0}")]
    DivisionByZero(String),

    #[error("alignment error: missing keys {missing:?}")]
    Alignment { missing: Vec<String> },

    #[error("invalid format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the file system or byte streams rather than of
    /// the content being processed.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io(_) => true,
            Error::Csv(e) => matches!(e.kind(), csv::ErrorKind::Io(_)),
            _ => false,
        }
    }
}
