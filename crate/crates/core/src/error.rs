use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DatError>;

#[derive(Debug, Error)]
pub enum DatError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported {kind} version {found} (expected {expected})")]
    Version {
        kind: &'static str,
        found: u16,
        expected: u16,
    },
    #[error("truncated {what}: expected {expected} bytes, found {actual}")]
    Truncated {
        what: String,
        expected: u64,
        actual: u64,
    },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("numeric error in {0}")]
    Numeric(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

impl DatError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DatError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the CLI: 2 for I/O, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            DatError::Io { .. } => 2,
            _ => 1,
        }
    }
}
