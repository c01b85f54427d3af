use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the enhancement pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input too short: need at least {needed} samples, got {got}")]
    InputTooShort { needed: usize, got: usize },

    #[error("filterbank wider than spectrum: {bands} bands for {bins} bins")]
    FilterbankTooWide { bands: usize, bins: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("inconsistent frame metadata: {0}")]
    FrameMetadata(String),

    #[error("unrecognized checkpoint format")]
    BadMagic,

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("checkpoint dimension mismatch: {0}")]
    CheckpointDims(String),

    #[error("malformed checkpoint header: {0}")]
    CheckpointHeader(String),

    #[error("{path}: {msg}")]
    Wav { path: PathBuf, msg: String },

    #[error("{path}:{line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("scorer timed out after {0:?}")]
    ScorerTimeout(std::time::Duration),

    #[error("malformed scorer response: {0:?}")]
    ScorerMalformed(String),

    #[error("scorer reported error: {0}")]
    ScorerRemote(String),

    #[error("scorer failed: {0}")]
    Scorer(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
