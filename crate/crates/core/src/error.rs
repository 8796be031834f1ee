use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("time step {t} outside 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("illegal condition set: {0}")]
    IllegalConditions(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("split leak: video {0} appears in more than one split")]
    SplitLeak(u64),

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },

    #[error("value out of range: {0}")]
    ValueOutOfRange(String),

    #[error("malformed header: {0}")]
    Header(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short code, used by the CLI for exit diagnostics.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::StepOutOfRange { .. } => "step-out-of-range",
            Error::InvalidParameter(_) => "invalid-parameter",
            Error::IllegalConditions(_) => "illegal-conditions",
            Error::EmptyDataset(_) => "empty-dataset",
            Error::InvalidDataset(_) => "invalid-dataset",
            Error::SplitLeak(_) => "split-leak",
            Error::BadMagic { .. } => "bad-magic",
            Error::UnsupportedVersion { .. } => "unsupported-version",
            Error::SizeMismatch(_) => "size-mismatch",
            Error::Crc { .. } => "crc",
            Error::ValueOutOfRange(_) => "value-out-of-range",
            Error::Header(_) => "header",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn shape(expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
