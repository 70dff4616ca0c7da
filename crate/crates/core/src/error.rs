use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range, contradictory, or unknown.
    #[error("invalid configuration `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// An internal precondition did not hold (e.g. a heatmap scale below the clamp).
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error(transparent)]
    Torch(#[from] tch::TchError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { key: key.into(), reason: reason.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
