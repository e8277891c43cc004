//! Error types shared across the crate.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A file could not be read or written.
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file was readable but its contents could not be parsed.
    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    /// Parsed data violates a dataset invariant.
    #[error("invalid dataset: {0}")]
    Validation(String),

    /// A scenario mask cannot be applied.
    #[error("invalid scenario: {0}")]
    Scenario(String),

    /// A caller passed an argument outside an operation's domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    /// The training objective became NaN or infinite.
    #[error("non-finite loss at epoch {epoch}, domain {domain}: {term} = {value}")]
    NonFiniteLoss {
        epoch: usize,
        domain: String,
        term: &'static str,
        value: f64,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}

/// Failures specific to reading checkpoint files.
#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checkpoint dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("checkpoint was trained on a different dataset schema")]
    SchemaMismatch,
    #[error("malformed checkpoint header: {0}")]
    Header(String),
}
