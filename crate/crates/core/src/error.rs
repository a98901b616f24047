use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid intensity window: lo ({lo}) must be below hi ({hi})")]
    InvalidWindow { lo: f64, hi: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite voxel at flat index {index} in {path}")]
    NonFiniteVoxel { path: PathBuf, index: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("patch size {patch} does not divide view size {size} along axis {axis}")]
    Tokenization { axis: usize, size: usize, patch: usize },

    #[error("mask ratio {0} outside [0, 1)")]
    InvalidMaskRatio(f64),

    #[error("non-finite activations after encoder block {block}")]
    NonFiniteActivation { block: usize },

    #[error("non-finite loss term `{0}`")]
    NonFiniteLoss(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("parameter trees differ: {0}")]
    TreeMismatch(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
