use thiserror::Error;

use crate::embedding::EmbeddingError;
use crate::ids::{ImageId, SessionId};

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("input is empty")]
    EmptyInput,
    #[error("rank {0} is not positive")]
    NonPositiveRank(i64),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("image {0} is not in the pool")]
    UnknownImage(ImageId),
    #[error(transparent)]
    MissingEmbedding(#[from] EmbeddingError),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid survey rating: {0}")]
    InvalidRating(String),
    #[error("log record {session_id} is not schema-valid: {message}")]
    SchemaError { session_id: SessionId, message: String },
}
