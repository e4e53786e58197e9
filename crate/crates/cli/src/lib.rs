//! Command-line harness over the retrieval-augmented extraction core:
//! configuration, ingestion, pipeline orchestration, baselines, sweeps,
//! synthetic corpus generation, and a small serving mode.

pub mod baseline;
pub mod config;
pub mod ingest;
pub mod pipeline;
pub mod serve;
pub mod sweep;
pub mod synthetic;

/// Errors split by exit code: configuration problems exit 1, runtime
/// failures exit 2.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}
