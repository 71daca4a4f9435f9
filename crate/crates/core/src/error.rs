use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("config: {0}")]
    Config(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("parameter `{name}` has shape {got}, expected {expected}")]
    ParamShape {
        name: String,
        expected: String,
        got: String,
    },

    #[error("weights: bad magic")]
    BadMagic,

    #[error("weights: unsupported format version {0}")]
    BadVersion(u32),

    #[error("weights: truncated file ({0})")]
    Truncated(String),

    #[error("weights: overlapping offsets at `{0}`")]
    OverlappingOffsets(String),

    #[error("weights: misaligned offset {offset} for `{name}`")]
    MisalignedOffset { name: String, offset: u64 },

    #[error("weights: malformed manifest: {0}")]
    Manifest(String),

    #[error("image: {0}")]
    Image(String),

    #[error("annotations line {line}: {msg}")]
    Annotation { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, dim: &'static str, expected: usize, got: usize) -> Self {
        Error::ShapeMismatch {
            op,
            dim,
            expected,
            got,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// True for failures of the filesystem rather than of the inputs.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}
