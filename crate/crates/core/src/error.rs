use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the matching pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed PGM header: {0}")]
    MalformedHeader(String),
    #[error("pixel count mismatch: expected {expected} samples, found {found}")]
    PixelCountMismatch { expected: usize, found: usize },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("singular transform (determinant {0})")]
    SingularTransform(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("image too small: {0}")]
    ImageTooSmall(String),
    #[error("patch window out of bounds")]
    OutOfBounds,
    #[error("not enough correspondences: {0}")]
    InsufficientCorrespondences(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),
    #[error("model file: {0}")]
    ModelFormat(String),
    #[error("dataset file: {0}")]
    DatasetFormat(String),
    #[error("not enough matches: {0}")]
    InsufficientMatches(String),
    #[error("no consensus: best support {best}, required {required}")]
    NoConsensus { best: usize, required: usize },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
