use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DanceError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported file version {0}")]
    BadVersion(u32),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("truncated file")]
    TruncatedFile,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("i/o failure on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no mirror pairing table for {0} joints")]
    UnsupportedSkeleton(usize),
    #[error("sequence too short: {0}")]
    TooShort(String),
    #[error("style {style} outside 0..{count}")]
    BadStyle { style: usize, count: usize },
    #[error("bad exemplar length: expected {expected}, got {got}")]
    BadLength { expected: usize, got: usize },
    #[error("insufficient history: need {need} frames, have {have}")]
    InsufficientHistory { need: usize, have: usize },
    #[error("no eligible clip: {0}")]
    NoEligibleClip(String),
    #[error("non-finite activation: {0}")]
    NonFiniteActivation(String),
    #[error("non-finite gradient at step {step}: {detail}")]
    NonFiniteGrad { step: u64, detail: String },
    #[error("empty beat set")]
    EmptyBeatSet,
    #[error("too few samples: {0}")]
    TooFew(String),
    #[error("too few clips: {0}")]
    TooFewClips(String),
    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Nn(#[from] dance_nn::NnError),
}

impl DanceError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DanceError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = DanceError> = std::result::Result<T, E>;
