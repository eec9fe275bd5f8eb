use std::path::PathBuf;

/// Error type shared by every stage of the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid body parameters: {0}")]
    InvalidParams(String),

    #[error("invalid rotation: {0}")]
    InvalidRotation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("tokenizer fit failed: {0}")]
    Fit(String),

    #[error("invalid token index {index} (codebook size {size})")]
    InvalidToken { index: u32, size: u32 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("loss over an empty mask")]
    EmptyLoss,

    #[error("training diverged: non-finite gradient in parameter `{0}`")]
    Divergence(String),

    #[error("degenerate rotation input: {0}")]
    DegenerateRotation(String),

    #[error("degenerate point configuration: {0}")]
    DegeneratePoints(String),

    #[error("matrix is not positive semi-definite (eigenvalue {0:.3e})")]
    NotPsd(f64),

    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("sampling schedule error: {0}")]
    Schedule(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("checkpoint/config mismatch on field `{field}`: checkpoint has {found}, config wants {expected}")]
    CheckpointMismatch {
        field: String,
        found: u32,
        expected: u32,
    },

    #[error("corrupt dataset {path}: {reason}")]
    CorruptDataset { path: PathBuf, reason: String },

    #[error("corrupt tokenizer file {path}: {reason}")]
    CorruptTokenizer { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code 1 for validation failures, 2 for runtime failures.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Divergence(_) | Error::Io { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
