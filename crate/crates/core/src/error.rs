//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape {shape:?} holds {expected} values but {actual} were supplied")]
    ShapeData {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f32 },

    /// Every logit in a softmax row was the -inf mask sentinel.
    #[error("softmax row {row} is fully masked")]
    DegenerateRow { row: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("sequence length {len} exceeds maximum length {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },

    #[error("token id {id} outside vocabulary of size {vocab_size}")]
    Vocabulary { id: usize, vocab_size: usize },

    #[error("attention row {row} sums to {sum}, expected 1")]
    NotStochastic { row: usize, sum: f64 },

    #[error("no eligible query rows to average for key position {position}")]
    EmptyAverage { position: usize },

    #[error("incomplete capture: missing {}", .0.join(", "))]
    IncompleteCapture(Vec<String>),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("tensor {name}: expected {expected} bytes, found {actual}")]
    LengthMismatch {
        name: String,
        expected: u64,
        actual: u64,
    },

    #[error("tensor {name}: unsupported dtype {dtype:?}")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("tensor {name}: missing file {}", .path.display())]
    MissingFile { name: String, path: PathBuf },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid experiment: {0}")]
    Usage(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line tool: 2 for usage and
    /// configuration problems, 1 for everything that failed at runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) => 2,
            _ => 1,
        }
    }
}
