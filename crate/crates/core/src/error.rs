use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic { expected: u32, found: u32 },

    #[error("bad file tag {found:?} (expected {expected:?})")]
    BadTag { expected: &'static str, found: String },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("image/label count mismatch: {images} images, {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("class {0} is present in the first modality but absent from the second")]
    MissingClass(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("learning step requested before a winner wave was run")]
    WaveNotRun,

    #[error("{0}")]
    Config(String),

    #[error("{stage} stage failed: {source}")]
    Stage { stage: String, source: Box<Error> },
}

impl Error {
    /// The underlying error with any stage tags removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
