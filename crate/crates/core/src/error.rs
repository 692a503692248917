use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GazeError>;

#[derive(Debug, Error)]
pub enum GazeError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("vision-language backend unavailable: {message}\n  hint: {remedy}")]
    BackendLoad { message: String, remedy: String },

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("non-finite loss at step {step}: l_gaze={l_gaze} l_mask={l_mask} l_align={l_align} total={total}")]
    NonFiniteLoss {
        step: usize,
        l_gaze: f64,
        l_mask: f64,
        l_align: f64,
        total: f64,
    },

    #[error("parameter {name} became non-finite by step {step}")]
    NonFiniteParameter { step: usize, name: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GazeError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Self::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }
}
