use std::path::PathBuf;

use crate::memory::MemoryId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("embedding is the zero vector")]
    ZeroVector,

    #[error("embedding contains a non-finite component at index {index}")]
    NonFinite { index: usize },

    #[error("unknown memory id {0}")]
    UnknownMemory(MemoryId),

    #[error("invalid pattern text: {0}")]
    InvalidPattern(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid thresholds: tau_low={tau_low}, tau_high={tau_high}")]
    InvalidThresholds { tau_low: f64, tau_high: f64 },

    #[error("{path}: schema version {found} is not supported (expected {expected})")]
    SchemaVersion {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}:{line}: corrupted record: {reason}")]
    CorruptRecord {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("provider transport failure: {0}")]
    Transport(String),

    #[error("could not parse `{template}` response after {attempts} attempt(s): {reason}")]
    Parse {
        template: String,
        attempts: usize,
        reason: String,
        raw: String,
    },

    #[error("template `{0}` is missing placeholder values: {1}")]
    Template(String, String),

    #[error("insufficient item universe: need {needed} negatives, only {available} available")]
    InsufficientUniverse { needed: usize, available: usize },

    #[error("history of user `{user}` too short: {len} interaction(s)")]
    HistoryTooShort { user: String, len: usize },

    #[error("ground truth `{0}` not present in ranked list")]
    GroundTruthMissing(String),

    #[error("checkpoint config hash {found} does not match current config {expected}")]
    CheckpointMismatch { found: String, expected: String },

    #[error("training aborted at user `{user}`, window {window}: {source}")]
    TrainingAborted {
        user: String,
        window: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Transport failures are worth retrying; everything else is final.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Transport(_))
    }
}
