use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("empty sample requested")]
    EmptySample,

    #[error("{what}: expected {expected} frames, found {found}")]
    FrameCount {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("inconsistent frame sizes: {first_w}x{first_h} then {w}x{h}")]
    InconsistentFrameSize {
        first_w: usize,
        first_h: usize,
        w: usize,
        h: usize,
    },

    #[error("shape mismatch: {context} ({a} vs {b})")]
    ShapeMismatch {
        context: String,
        a: String,
        b: String,
    },

    #[error("crop size {size} exceeds frame {h}x{w}")]
    CropTooLarge { size: usize, h: usize, w: usize },

    #[error("motion ({dx}, {dy}) over {t} frames exceeds canvas {h}x{w}")]
    MotionTooLarge {
        dx: f32,
        dy: f32,
        t: usize,
        h: usize,
        w: usize,
    },

    #[error("spatial size {h}x{w} not divisible by {divisor}")]
    Indivisible { h: usize, w: usize, divisor: usize },

    #[error("entropy model has {model} channels, latent has {latent}")]
    ChannelMismatch { model: usize, latent: usize },

    #[error("truncated bitstream")]
    Truncated,

    #[error("bad magic in {what}")]
    BadMagic { what: String },

    #[error("unsupported {what} version {found} (expected {expected})")]
    Version {
        what: String,
        found: u16,
        expected: u16,
    },

    #[error("model checksum mismatch: bitstream {stream:#010x}, checkpoint {model:#010x}")]
    ModelChecksum { stream: u32, model: u32 },

    #[error("stream integrity checksum mismatch")]
    StreamCorrupt,

    #[error("non-finite {term} loss at iteration {iteration}")]
    NonFiniteLoss { term: String, iteration: u64 },

    #[error("config error: {key}: {message}")]
    Config { key: String, message: String },

    #[error("iteration {iteration} outside schedule of {total} iterations")]
    IterationOutOfRange { iteration: u64, total: u64 },

    #[error("BD-rate needs >=2 points")]
    NeedTwoPoints,

    #[error("rate-quality curves do not overlap in quality")]
    NoOverlap,

    #[error("curve has duplicate or non-increasing quality values after sorting")]
    NonMonotoneCurve,

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("degenerate frame size {h}x{w} (need at least 4x4)")]
    DegenerateFrame { h: usize, w: usize },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
