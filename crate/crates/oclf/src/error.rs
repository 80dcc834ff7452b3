//! Crate-wide error type.

use std::path::PathBuf;

use crate::types::Split;

/// Errors produced by any oclf operation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid block geometry: {0}")]
    InvalidBlockGeometry(String),

    #[error("degenerate landmarks: {0}")]
    DegenerateLandmarks(String),

    #[error("invalid landmarks: {0}")]
    InvalidLandmarks(String),

    #[error("mask is {mask_h}x{mask_w} but image is {img_h}x{img_w}")]
    MaskShapeMismatch {
        mask_h: usize,
        mask_w: usize,
        img_h: usize,
        img_w: usize,
    },

    #[error("no face found in sample {0}")]
    FaceNotFound(String),

    #[error("missing annotation: {0}")]
    MissingAnnotation(String),

    #[error("numerical error: {0}")]
    NumericalError(String),

    #[error("invalid model config: {0}")]
    ConfigError(String),

    #[error("input shape error: {0}")]
    InputShapeError(String),

    #[error("dimension error: {0}")]
    DimensionError(String),

    #[error("checkpoint corrupt: {0}")]
    CheckpointCorrupt(String),

    #[error("checkpoint format version {found} not supported (expected {supported})")]
    VersionError { found: u32, supported: u32 },

    #[error("majority vote over an empty set of patches")]
    NoVoters,

    #[error("model not loaded: {0}")]
    ModelNotLoaded(String),

    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),

    #[error("training diverged: {0}")]
    DivergenceError(String),

    #[error("not found: {0}")]
    NotFound(PathBuf),

    #[error("manifest invalid at line {line}: {msg}")]
    ManifestInvalid { line: usize, msg: String },

    #[error("split {0:?} missing from manifest")]
    SplitMissing(Split),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image decode/encode error: {0}")]
    Image(String),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
