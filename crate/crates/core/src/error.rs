//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum InvrenderError {
    #[error("shape mismatch in op `{op}`: expected {expected}, got {got}")]
    ShapeMismatch { op: String, expected: String, got: String },

    #[error("op `{op}` has no registered second-order rule")]
    UnsupportedSecondOrder { op: String },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("degenerate camera pose: {reason}")]
    DegeneratePose { reason: String },

    #[error("pixel coordinates ({x}, {y}) outside image bounds {width}x{height}")]
    PixelOutOfBounds { x: f64, y: f64, width: usize, height: usize },

    #[error("pose alignment needs at least 3 pose pairs, got {got}")]
    TooFewPoses { got: usize },

    #[error("pose alignment failed: {reason}")]
    DegenerateAlignment { reason: String },

    #[error("image dimension mismatch: {a_width}x{a_height} vs {b_width}x{b_height}")]
    ImageDimMismatch { a_width: usize, a_height: usize, b_width: usize, b_height: usize },

    #[error("image {width}x{height} smaller than the {window} pixel filter window")]
    ImageTooSmall { width: usize, height: usize, window: usize },

    #[error("no surface found: the density field never crosses the threshold")]
    NoSurface,

    #[error("dataset error in `{file}`: {reason}")]
    Dataset { file: String, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint is truncated or corrupt: {0}")]
    CheckpointCorrupt(String),

    #[error("checkpoint section `{0}` is missing")]
    CheckpointMissingSection(String),

    #[error("scene object extends outside the bounding volume")]
    ObjectOutOfBounds,

    #[error("training step {step} produced a non-finite loss; state rolled back")]
    NonFiniteStep { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image i/o error: {0}")]
    Image(String),
}

impl From<image::ImageError> for InvrenderError {
    fn from(e: image::ImageError) -> Self {
        InvrenderError::Image(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, InvrenderError>;
