//! Error taxonomy shared by every module.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("text is empty after normalization")]
    EmptyText,

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("memory contains no entries")]
    EmptyMemory,

    #[error("no candidate records besides the probe itself")]
    NoCandidate,

    #[error("retrieval produced no pairs to diversify")]
    EmptyRetrieval,

    #[error("degenerate supervision: {0}")]
    DegenerateSupervision(String),

    #[error("numerical instability in {context}")]
    NumericalInstability { context: String },

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("prompt of ~{estimated} tokens exceeds context limit {limit}")]
    ContextOverflow { estimated: usize, limit: usize },

    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),

    #[error("record {id} is missing head/tail entities required by {task}")]
    MissingEntities { id: String, task: String },

    #[error("prediction/gold lists are misaligned: {left} vs {right}")]
    AlignmentError { left: usize, right: usize },

    #[error("line {line}: {message}")]
    IngestError { line: usize, message: String },

    #[error("dataset contains zero valid records")]
    EmptyDataset,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("artifact format error in {path}: {message}")]
    FormatError { path: String, message: String },

    #[error("fingerprint mismatch: artifact was built with embedder {expected}, current config is {actual}")]
    FingerprintMismatch { expected: String, actual: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Wraps an i/o error with the path it concerns.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
