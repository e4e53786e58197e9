//! Nearest-neighbor retrieval baseline: prepend the top-n most similar
//! (sentence, label) training pairs to the prompt, with no scorer and no
//! diversity operation.

use chunkrag_core::{
    knn_baseline, parse_output, Error, MetricsReport, MicroScore, Provenance, SentenceRecord,
};
use serde::{Deserialize, Serialize};

use crate::pipeline::{score_run, ExtractRun, LoadedInputs, TraceRow};
use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum CellOutcome {
    Scored { f1: f64, score: MicroScore },
    ContextOverflow { estimated: usize, limit: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineRow {
    pub n: usize,
    #[serde(flatten)]
    pub outcome: CellOutcome,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BaselineReport {
    pub rows: Vec<BaselineRow>,
}

impl BaselineReport {
    pub fn render_table(&self) -> String {
        let mut out = String::from("n       f1\n");
        for row in &self.rows {
            match &row.outcome {
                CellOutcome::Scored { f1, .. } => {
                    out.push_str(&format!("{:<7} {f1:.4}\n", row.n));
                }
                CellOutcome::ContextOverflow { estimated, limit } => {
                    out.push_str(&format!(
                        "{:<7} context overflow ({estimated} > {limit} tokens)\n",
                        row.n
                    ));
                }
            }
        }
        out
    }
}

/// The prompt's example block for the baseline: n retrieved training pairs
/// rendered one per line; empty for n = 0 (the bare-LM row).
fn example_block(hits: &[(&SentenceRecord, f64)]) -> String {
    hits.iter()
        .map(|(r, _)| format!("{} {}", r.text, r.label.rendered()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Runs the baseline for every requested n. A context overflow tags that row
/// and the sweep continues; other errors abort.
pub fn run_baseline(li: &LoadedInputs, n_values: &[usize]) -> Result<BaselineReport, CliError> {
    let train = li.train_split();
    let test = li.test_split();
    if test.is_empty() {
        return Err(CliError::Runtime("stage baseline: test split is empty".into()));
    }
    let labels = li.parse_labels();
    let mut rows = Vec::with_capacity(n_values.len());
    'per_n: for &n in n_values {
        let mut trace_rows = Vec::with_capacity(test.len());
        for x in &test {
            let hits = if n == 0 {
                Vec::new()
            } else {
                knn_baseline(&train, x, n, &li.embedder)
                    .map_err(|e| CliError::Runtime(format!("stage baseline: {e}")))?
            };
            let example = chunkrag_core::DocumentCandidate {
                id: 0,
                text: example_block(&hits),
                provenance: Provenance::NearestExample,
            };
            let prompt = chunkrag_core::assemble_prompt(&li.template, &example, x)
                .map_err(|e| CliError::Runtime(format!("stage baseline: {e}")))?;
            match li.cfg.llm.generate(&prompt) {
                Ok(raw) => {
                    let parsed = parse_output(&raw, li.cfg.task, &labels);
                    trace_rows.push(TraceRow {
                        id: x.id.clone(),
                        chosen: example.clone(),
                        raw_completion: raw,
                        parsed,
                    });
                }
                Err(Error::ContextOverflow { estimated, limit }) => {
                    rows.push(BaselineRow {
                        n,
                        outcome: CellOutcome::ContextOverflow { estimated, limit },
                    });
                    continue 'per_n;
                }
                Err(e) => return Err(CliError::Runtime(format!("stage baseline: {e}"))),
            }
        }
        let run = ExtractRun { rows: trace_rows, gold: test.clone() };
        let report: MetricsReport = score_run(li.cfg.task, &run)
            .map_err(|e| CliError::Runtime(format!("stage baseline: {e}")))?;
        let primary = crate::pipeline::primary_f1(&report);
        let score = report
            .rows
            .iter()
            .find(|r| r.name == "triple" || r.name == "label")
            .map(|r| r.score)
            .unwrap_or_else(|| MicroScore::from_counts(0, 0, 0));
        rows.push(BaselineRow { n, outcome: CellOutcome::Scored { f1: primary, score } });
    }
    Ok(BaselineReport { rows })
}
