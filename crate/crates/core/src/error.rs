use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A feature or model file could not be decoded.
    #[error("malformed {what} at byte {offset}: {reason}")]
    Malformed {
        what: &'static str,
        offset: usize,
        reason: String,
    },

    #[error("checksum mismatch in {what}: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum {
        what: &'static str,
        stored: u64,
        computed: u64,
    },

    #[error("non-finite value in layer `{layer}` at row {row}, column {column}")]
    NonFinite {
        layer: String,
        row: usize,
        column: usize,
    },

    #[error("layer `{layer}` has {found} rows, expected {expected}")]
    RowCount {
        layer: String,
        expected: usize,
        found: usize,
    },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("layer mismatch: {0}")]
    LayerMismatch(String),

    /// A numeric precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } => 3,
            Error::Malformed { .. } | Error::Checksum { .. } | Error::Json(_) | Error::Csv(_) => 4,
            Error::NonFinite { .. } | Error::RowCount { .. } => 5,
            Error::Dimension { .. } | Error::LayerMismatch(_) => 6,
            Error::InvalidArgument(_) => 7,
        }
    }
}
