use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed input: {0}")]
    Format(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("frequency count overflow on token {0:?}")]
    CountOverflow(String),

    #[error("vocabulary underfull: {shortfall} slot(s) could not be filled")]
    Underfull { shortfall: usize },

    #[error("non-finite value in {what} at row {row}")]
    NonFinite { what: &'static str, row: usize },

    #[error("row {row}: every token is masked")]
    AllMasked { row: usize },

    #[error("row {row}: degenerate embedding (norm below 1e-12)")]
    Degenerate { row: usize },

    #[error("row {row}: vector norm {norm} is not unit within tolerance")]
    NotUnitNorm { row: usize, norm: f64 },

    #[error("zero variance")]
    ZeroVariance,

    #[error("no words")]
    NoWords,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss at step {step} (last checkpoint: {last_checkpoint:?})")]
    NonFiniteLoss {
        step: u64,
        last_checkpoint: Option<PathBuf>,
    },
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    /// True for failures that originate in the filesystem.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::File { .. })
    }
}
