use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the quantization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("arithmetic overflow in {0}")]
    Overflow(&'static str),

    #[error("teacher checkpoint was modified during student training")]
    TeacherModified,

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("missing input file {}", .0.display())]
    MissingInput(PathBuf),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Distinct failure modes when decoding a tensor container.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("file is {actual} bytes, too short for the declared header of {declared} bytes")]
    TruncatedHeader { declared: u64, actual: u64 },

    #[error("header is not valid JSON: {0}")]
    BadHeader(String),

    #[error("unsupported format version {found} (expected {expected})")]
    BadVersion { found: u32, expected: u32 },

    #[error("tensor `{name}` payload [{offset}, {end}) exceeds payload size {payload}")]
    TruncatedPayload {
        name: String,
        offset: u64,
        end: u64,
        payload: u64,
    },

    #[error("tensor `{name}` overlaps the previous tensor payload")]
    Overlap { name: String },

    #[error("tensor `{name}` declares {len} bytes but its shape needs {expected}")]
    LengthMismatch { name: String, len: u64, expected: u64 },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
