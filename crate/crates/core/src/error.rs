use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the landmark toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("invalid landmark set: {0}")]
    InvalidLandmarks(String),

    #[error("extent {extent} on axis {axis} is smaller than grid spacing {spacing}")]
    ExtentTooSmall {
        axis: usize,
        extent: usize,
        spacing: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("no valid landmarks in target field")]
    NoValidLandmarks,

    #[error("degenerate confidence: probability mass {mass:e} is not above {threshold:e}")]
    DegenerateConfidence { mass: f64, threshold: f64 },

    #[error("no feasible crop origin: {0}")]
    NoFeasibleCrop(String),

    #[error("synthetic structure {index} falls outside the image")]
    StructureOutOfBounds { index: usize },

    #[error("annotation error in {path}: {msg}")]
    Annotation { path: PathBuf, msg: String },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("landmark name mismatch: {0}")]
    NameMismatch(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("TIFF error: {0}")]
    Tiff(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
