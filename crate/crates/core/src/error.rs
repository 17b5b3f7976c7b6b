use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GaitError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GaitError {
    /// Extents of two operands (or of an operand and a configuration) disagree.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// The caller broke an API contract (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("GeM pooling got a negative input ({0})")]
    Domain(f64),

    #[error("frame rejected: {0}")]
    FrameRejected(String),

    #[error("no sequences found under {0}")]
    NoSequences(PathBuf),

    #[error("batch sampling failed: {0}")]
    Sampling(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at iteration {iteration} (batch {batch_id}); parameter norms: {norms}")]
    NonFinite {
        iteration: u64,
        batch_id: u64,
        norms: String,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GaitError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        GaitError::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
