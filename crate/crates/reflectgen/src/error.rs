use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid regression coefficients: {0}")]
    InvalidCoefficients(String),

    #[error("empty region: {0}")]
    EmptyRegion(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("degenerate scene: {0}")]
    DegenerateScene(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("corrupt data in tuple `{tuple_id}`: {reason}")]
    CorruptData { tuple_id: String, reason: String },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("invalid split: {0}")]
    Split(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
