use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("truncated input: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("frame dimensions {width}x{height} are not divisible by {multiple}; pad the frame first")]
    NotPadded {
        width: usize,
        height: usize,
        multiple: usize,
    },

    #[error("nonpositive likelihood {value} at element {index}")]
    NonPositiveLikelihood { index: usize, value: f64 },

    #[error("corrupt entropy payload: {0}")]
    CorruptPayload(String),

    #[error("bitstream error at byte {offset}: {message}")]
    Bitstream { offset: usize, message: String },

    #[error("model id mismatch: container was coded with {container:#010x}, checkpoint is {checkpoint:#010x}")]
    ModelMismatch { container: u32, checkpoint: u32 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("no overlap between rate-distortion curves: {0}")]
    NoOverlap(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
