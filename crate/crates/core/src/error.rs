use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("timestep {t} outside admissible range [{lo}, {hi})")]
    TimestepRange { t: usize, lo: usize, hi: usize },

    #[error("numeric range error at timestep {t}: {reason}")]
    NumericRange { t: usize, reason: String },

    #[error("invalid noise schedule: {0}")]
    Schedule(String),

    #[error("empty foreground mask: {0}")]
    EmptyMask(PathBuf),

    #[error("mask {path} has {channels} colour channels; expected a single-channel image")]
    MultiChannelMask { path: PathBuf, channels: u8 },

    #[error("cannot decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("cannot upsample mask from {from:?} to {to:?}")]
    Upsample { from: (usize, usize), to: (usize, usize) },

    #[error("prompt has no slot bound to concept `{0}`")]
    MissingSlot(String),

    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    EmbeddingDim { expected: usize, actual: usize },

    #[error("unknown low-rank target `{0}`")]
    UnknownTarget(String),

    #[error("unknown backbone `{0}`")]
    UnknownBackbone(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("missing stage I checkpoint: {0}")]
    MissingStageOne(String),

    #[error("template has {expected} slot(s) but {supplied} checkpoint(s) were supplied")]
    SlotCount { expected: usize, supplied: usize },

    #[error("backbone mismatch: checkpoint `{checkpoint}` was trained on `{expected}`, got `{actual}`")]
    BackboneMismatch {
        checkpoint: String,
        expected: String,
        actual: String,
    },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("client error: {0}")]
    Client(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
