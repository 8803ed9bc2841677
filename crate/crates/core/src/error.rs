//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's contract (bad shapes, non-one-hot
    /// targets, zero-length pooling windows, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// The backward tape is malformed (an op referenced a node created after it).
    #[error("graph error: {0}")]
    Graph(String),

    /// An utterance is too short for the model's receptive field.
    #[error("utterance '{id}' has {length} frames but the model needs at least {required}")]
    TooShortUtterance {
        id: String,
        length: usize,
        required: usize,
    },

    /// A binary file did not match the expected layout.
    #[error("format error: {0}")]
    Format(String),

    /// A file ended before all declared content was read.
    #[error("truncated file: {0}")]
    Truncated(String),

    /// Dataset contents failed validation (label ranges, duplicate ids, non-finite values).
    #[error("invalid dataset: {0}")]
    Validation(String),

    /// Train/validation/test splits share speakers.
    #[error("splits share speakers: {}", speakers.join(", "))]
    SplitOverlap { speakers: Vec<String> },

    /// A gradient or loss became NaN/Inf during training.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
