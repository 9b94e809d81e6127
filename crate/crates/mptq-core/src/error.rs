//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by tensor ops, quantizer fitting, allocation, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or channel counts do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Invalid input data (non-finite elements, empty calibration sets, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// A quantizer could not be fitted to the given statistics.
    #[error("quantizer fit failed: {0}")]
    Fit(String),

    /// A tapped or quantized site id does not exist in the model.
    #[error("unknown site: {0}")]
    UnknownSite(String),

    /// A bit-layout magnitude does not fit its field.
    #[error("encoding error: {0}")]
    Encoding(String),

    /// The greedy allocator cannot reach its target.
    #[error("allocation error: {0}")]
    Allocation(String),

    /// A pipeline stage failed; the stage name is part of the message.
    #[error("stage {stage}: {message}")]
    Stage { stage: String, message: String },

    #[error("container format error: {0}")]
    Container(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wrap any error with a pipeline stage tag.
    pub fn stage(stage: &str, err: impl std::fmt::Display) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            message: err.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
