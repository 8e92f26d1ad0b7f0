//! Crate-wide error type and result alias.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GlapError>;

#[derive(Debug, Error)]
pub enum GlapError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A matrix entry that must be finite is NaN or infinite.
    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    /// Training-time numeric failure (non-finite loss or gradient).
    #[error("numeric abort: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    /// An error raised while processing one record, tagged with its id.
    #[error("record {id}: {source}")]
    Record {
        id: String,
        #[source]
        source: Box<GlapError>,
    },

    #[error("{}: payload checksum mismatch (stored {stored:#010x}, computed {computed:#010x})", path.display())]
    Checksum {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },

    #[error("{}: unsupported version {found} (this build reads up to {supported})", path.display())]
    Version {
        path: PathBuf,
        found: u32,
        supported: u32,
    },

    #[error("{}: corrupt file: {message}", path.display())]
    Corrupt { path: PathBuf, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl GlapError {
    pub fn record(id: impl Into<String>, source: GlapError) -> Self {
        GlapError::Record {
            id: id.into(),
            source: Box::new(source),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GlapError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the CLI: 3 for numeric aborts, 2 for
    /// everything else (configuration, shape, and I/O problems).
    pub fn exit_code(&self) -> i32 {
        match self {
            GlapError::NonFinite { .. } | GlapError::Numeric(_) => 3,
            GlapError::Record { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}
