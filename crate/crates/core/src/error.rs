use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },

    #[error("loss must be a scalar tensor, got shape {0:?}")]
    NonScalarLoss([usize; 2]),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("object {0} does not exist in the scene")]
    UnknownObject(u8),

    #[error("object {0} is off-view and cannot be manipulated")]
    OffView(u8),

    #[error("scene sampling failed after {0} attempts")]
    SamplingFailed(usize),

    #[error("corpus line {line}: {msg}")]
    Corpus { line: usize, msg: String },

    #[error("format version mismatch: expected {expected}, found {found}")]
    Version { expected: String, found: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}
