use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),
    #[error("invalid segmentation encoding: {0}")]
    InvalidMask(String),
    #[error("degenerate point cloud: all points coincide, scale is zero")]
    ZeroScale,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("undefined mIoU: every part is empty in both inputs")]
    EmptyIou,
    #[error("non-finite value during {stage} at step {step}")]
    NonFinite { stage: &'static str, step: usize },
    #[error("training diverged in {stage} at epoch {epoch}")]
    Diverged { stage: &'static str, epoch: usize },
    #[error("{path}: parse error at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },
    #[error("model is not trained: {0}")]
    Untrained(&'static str),
    #[error(transparent)]
    Param(#[from] partgda_tape::ParamError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
