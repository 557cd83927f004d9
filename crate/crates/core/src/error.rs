use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied value is outside the accepted range or has the wrong shape.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// A run was configured inconsistently (missing parameters, missing data roles).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset ingestion failed: {0}")]
    Ingest(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    /// A training-time contract (frozen parameters, gradient gate) was broken.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image codec: {0}")]
    Image(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn param<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Param(msg.into()))
}
