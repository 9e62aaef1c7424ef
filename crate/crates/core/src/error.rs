use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    RejectedInput(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("checkpoint error ({path}): {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("degenerate text direction: source and target texts embed identically")]
    DegenerateText,

    #[error("degenerate similarity profile: {0}")]
    DegenerateSimilarity(String),

    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    #[error("no region grounded for '{text}'")]
    GroundingFailure { text: String },

    #[error("training diverged at step {step}: {term} is not finite")]
    TrainingDivergence {
        step: usize,
        term: String,
        last_good_checkpoint: Option<PathBuf>,
    },

    #[error("backend error: {0}")]
    Backend(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Configuration(msg.into())
    }
}
