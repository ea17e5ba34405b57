use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("placement infeasible: {0}")]
    PlacementInfeasible(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("text spans overlap: {0}")]
    SpanConflict(String),
    #[error("invalid rotary split: {0}")]
    InvalidSplit(String),
    #[error("invalid LoRA rank {rank} for dimension {dim}")]
    InvalidRank { rank: usize, dim: usize },
    #[error("non-finite velocity at sampling step {step}")]
    NumericBlowup { step: usize },
    #[error("non-finite loss at training step {step}")]
    NonFiniteLoss { step: usize },
    #[error("need at least 2 samples per set, got {0}")]
    InsufficientSamples(usize),
    #[error("corrupt checkpoint at byte {offset}: {reason}")]
    CorruptCheckpoint { offset: u64, reason: String },
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("{0}")]
    Pipeline(String),
    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait PathContext<T> {
    fn with_path(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> PathContext<T> for std::io::Result<T> {
    fn with_path(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Path {
            path: path.into(),
            source,
        })
    }
}
