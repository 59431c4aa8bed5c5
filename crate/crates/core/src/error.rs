use std::path::PathBuf;

/// Recoverable failures surfaced by the library.
///
/// Contract violations (callers breaking documented preconditions, e.g. an
/// out-of-range peg id) panic instead; they indicate bugs, not bad input.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown instrument preset `{0}` (expected A, B or C)")]
    UnknownPreset(String),

    #[error("calibration commands never reverse direction on axis {axis}; cannot identify the deadband")]
    InsufficientExcitation { axis: usize },

    #[error("calibration needs at least {needed} samples per axis, got {got}")]
    TooFewCalibrationSamples { needed: usize, got: usize },

    #[error("crop window {window} falls outside the {frame_w}x{frame_h} frame")]
    CropOutOfBounds {
        window: String,
        frame_w: usize,
        frame_h: usize,
    },

    #[error("{path}: {message}")]
    ImageFile { path: PathBuf, message: String },

    #[error("manifest record `{record}`: {message}")]
    Manifest { record: String, message: String },

    #[error("model checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("training dataset is empty or smaller than the requested split")]
    EmptySplit,

    #[error("config: {0}")]
    Config(String),

    #[error("planned target ({x:.2}, {y:.2}) mm lies outside the workspace")]
    TargetOutsideWorkspace { x: f64, y: f64 },

    #[error("method `{method}` requires {what}")]
    MissingArtifact {
        method: &'static str,
        what: &'static str,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
