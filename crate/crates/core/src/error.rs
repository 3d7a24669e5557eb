use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HatError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HatError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("evaluation has no valid queries")]
    EmptyEvaluation,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at epoch {epoch}, step {step}; snapshot written to {snapshot:?}")]
    NonFinite {
        epoch: usize,
        step: usize,
        snapshot: Option<PathBuf>,
    },

    #[error("image error at {path:?}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
