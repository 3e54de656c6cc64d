use std::path::PathBuf;

use thiserror::Error;

use crate::trainer::TrainReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated file: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },

    #[error("user {user} has {available} candidate negatives, {requested} requested")]
    Sampling {
        user: usize,
        available: usize,
        requested: usize,
    },

    #[error("{owner} has no triplets in the batch")]
    EmptyInstance { owner: String },

    #[error("exhaustive search refused for dimension {0} (limit 16)")]
    DimensionTooLarge(usize),

    #[error("variational state has {state} entries, batch has {batch} triplets")]
    Misaligned { state: usize, batch: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("training diverged at iteration {iteration}")]
    Diverged {
        iteration: usize,
        report: Box<TrainReport>,
    },

    #[error("synthetic generator produced a user without positives after {attempts} attempts")]
    DegenerateGeometry { attempts: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
