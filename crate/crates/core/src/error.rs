use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty audio")]
    EmptyAudio,

    #[error("insufficient batch for mixing: {0} item(s)")]
    InsufficientBatch(usize),

    #[error("unsupported audio in {path}: {reason}")]
    UnsupportedAudio { path: PathBuf, reason: String },

    #[error("input shorter than receptive field: {len} samples < {receptive_field}")]
    ShorterThanReceptiveField { len: usize, receptive_field: usize },

    #[error("mask span shorter than one frame (mask_time / stride_time = {0})")]
    MaskSpanTooShort(f64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no masked positions in batch")]
    NoMaskedPositions,

    #[error("divergence at step {step}: loss = {loss}")]
    Divergence { step: u64, loss: f64 },

    #[error("step {step} is past total_steps {total}")]
    StepOutOfRange { step: u64, total: u64 },

    #[error("all-zero histogram")]
    EmptyHistogram,

    #[error("config: {key}: {reason}")]
    Config { key: String, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
