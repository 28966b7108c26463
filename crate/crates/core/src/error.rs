use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("cannot mask {n_rand} of {words} words in `{api}` (need 1 <= n_rand <= {max})", max = words.saturating_sub(1))]
    InvalidMask {
        api: String,
        n_rand: usize,
        words: usize,
    },

    #[error("vocab size {requested} is below the minimum of {minimum} (reserved + byte alphabet)")]
    VocabTooSmall { requested: usize, minimum: usize },

    #[error("unknown token id {0}")]
    UnknownTokenId(u32),

    #[error("vocab file line {line}: {reason}")]
    VocabFormat { line: usize, reason: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch in {op}: expected {expected}, found {found}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("non-finite loss at example {example}{}", batch.map(|b| format!(" of batch {b}")).unwrap_or_default())]
    NonFiniteLoss { batch: Option<usize>, example: usize },

    #[error("forward trace was already consumed by a backward pass")]
    TraceConsumed,

    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),

    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("malformed checkpoint: {0}")]
    CheckpointFormat(String),

    #[error("unsupported norm order q={0} (only 1 and 2)")]
    UnsupportedNorm(u32),

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("output directory is in use ({0} exists); remove it if no other run is active")]
    Locked(PathBuf),

    #[error("config {path}: {reason}")]
    ConfigParse { path: PathBuf, reason: String },

    #[error("requested top {k} exceeds beam width {width}; raise --beam-width")]
    BeamTooNarrow { k: usize, width: usize },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
