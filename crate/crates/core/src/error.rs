use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("decode error at byte {offset}: {reason}")]
    Decode { offset: usize, reason: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("all-zero vector cannot be normalized")]
    ZeroVector,

    #[error("descriptor has a negative or non-finite value at position {0}")]
    InvalidDescriptor(usize),

    #[error("corpus of {corpus} descriptors is smaller than k = {k}")]
    CorpusTooSmall { corpus: usize, k: usize },

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("fingerprint mismatch for {path}: expected {expected}, found {actual}")]
    Fingerprint {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("empty database")]
    EmptyDatabase,

    #[error("unknown image id {0}")]
    UnknownImage(u32),

    #[error("unknown query id {0}")]
    UnknownQuery(u32),

    #[error("candidate {0} has a local score but no weight")]
    MissingWeight(u32),

    #[error("empty positive set for query {0}")]
    EmptyPositives(u32),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("bad file format in {context}: {reason}")]
    Format { context: &'static str, reason: String },

    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn format(context: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            context,
            reason: reason.into(),
        }
    }

    /// Attaches a file path to an error.
    pub fn at(self, path: impl Into<PathBuf>) -> Self {
        Error::Path {
            path: path.into(),
            source: Box::new(self),
        }
    }
}
