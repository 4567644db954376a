//! Crate-wide error type. Variants carry enough context to name the offending
//! entity (pixel, sample index, layer, file) so callers never need a backtrace
//! to locate bad data.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("pixel ({row}, {col}) outside sensor bounds {width}x{height}")]
    PixelOutOfBounds {
        row: u32,
        col: u32,
        width: u32,
        height: u32,
    },

    #[error("view {view}: missing frame {frame} at {path}")]
    MissingFrame {
        view: String,
        frame: usize,
        path: PathBuf,
    },

    #[error("view {view}, frame {frame}: image is {got_w}x{got_h}, camera expects {want_w}x{want_h}")]
    FrameDimensionMismatch {
        view: String,
        frame: usize,
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },

    #[error("latent dimension mismatch: expected {expected}, got {got}")]
    LatentDimMismatch { expected: usize, got: usize },

    #[error("non-finite {quantity} at sample {index}")]
    NonFiniteSample {
        quantity: &'static str,
        index: usize,
    },

    #[error("non-finite activation in {layer}")]
    NonFiniteActivation { layer: String },

    #[error("non-finite gradient in {layer}")]
    NonFiniteGradient { layer: String },

    #[error("downsample factor {factor} does not divide image dimensions {width}x{height}")]
    BadDownsample {
        factor: u32,
        width: u32,
        height: u32,
    },

    #[error("emitter {index} leaves scene bounds at t = {t:.4}")]
    EmitterOutOfBounds { index: usize, t: f64 },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{0}")]
    Invalid(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Wraps an io::Error with the path or action that triggered it.
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
