//! Chunk-length sweep: the full pipeline at each m, every cell either a
//! score or a tagged error, never silently missing.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::pipeline::{primary_f1, run_pipeline};
use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum SweepOutcome {
    Scored { f1: f64 },
    Error { message: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub chunk_len: usize,
    #[serde(flatten)]
    pub outcome: SweepOutcome,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    pub fn render_table(&self) -> String {
        let mut out = String::from("m       f1\n");
        for cell in &self.cells {
            match &cell.outcome {
                SweepOutcome::Scored { f1 } => {
                    out.push_str(&format!("{:<7} {f1:.4}\n", cell.chunk_len));
                }
                SweepOutcome::Error { message } => {
                    out.push_str(&format!("{:<7} error: {message}\n", cell.chunk_len));
                }
            }
        }
        out
    }
}

/// Runs the pipeline once per chunk length, each into its own artifact
/// subdirectory. Config errors abort; runtime errors tag their cell.
pub fn run_sweep(base: &RunConfig, chunk_lens: &[usize]) -> Result<SweepReport, CliError> {
    if chunk_lens.is_empty() {
        return Err(CliError::Config("sweep needs at least one chunk length".into()));
    }
    let mut cells = Vec::with_capacity(chunk_lens.len());
    for &m in chunk_lens {
        let mut cfg = base.clone();
        cfg.chunk_len = m;
        cfg.artifacts_dir = base.artifacts_dir.join(format!("m{m}"));
        let outcome = match run_pipeline(cfg) {
            Ok(summary) => SweepOutcome::Scored { f1: primary_f1(&summary.report) },
            Err(CliError::Config(msg)) => return Err(CliError::Config(msg)),
            Err(CliError::Runtime(msg)) => SweepOutcome::Error { message: msg },
        };
        cells.push(SweepCell { chunk_len: m, outcome });
    }
    Ok(SweepReport { cells })
}
