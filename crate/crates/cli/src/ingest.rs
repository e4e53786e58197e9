//! JSONL dataset loading with line-numbered diagnostics.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chunkrag_core::{Error, Label, LabelInventory, Result, SentenceRecord, Split, TaskKind};
use serde::Deserialize;

/// One dataset line. `text` may be omitted for link prediction, where the
/// sentence is derived from the entity pair.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    #[serde(default)]
    text: Option<String>,
    label: String,
    #[serde(default)]
    head: Option<String>,
    #[serde(default)]
    tail: Option<String>,
    split: Split,
}

#[derive(Debug)]
pub struct IngestReport {
    pub records: Vec<SentenceRecord>,
    pub counts: BTreeMap<Split, usize>,
}

impl IngestReport {
    pub fn of_split(&self, split: Split) -> Vec<SentenceRecord> {
        self.records.iter().filter(|r| r.split == split).cloned().collect()
    }

    pub fn count_line(&self) -> String {
        let c = |s: Split| self.counts.get(&s).copied().unwrap_or(0);
        format!(
            "{} records (train {}, dev {}, test {})",
            self.records.len(),
            c(Split::Train),
            c(Split::Dev),
            c(Split::Test)
        )
    }

    /// Labels seen across the dataset, with descriptions from the inventory
    /// when one was provided.
    pub fn observed_labels(&self) -> Vec<Label> {
        let mut seen = BTreeMap::new();
        for r in &self.records {
            seen.entry(r.label.canonical_id.clone()).or_insert_with(|| r.label.clone());
        }
        seen.into_values().collect()
    }
}

pub fn ingest(
    path: &Path,
    task: TaskKind,
    inventory: Option<&LabelInventory>,
) -> Result<IngestReport> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut records = Vec::new();
    let mut counts: BTreeMap<Split, usize> = BTreeMap::new();
    let mut seen_ids: BTreeSet<String> = BTreeSet::new();
    for (idx, line) in raw.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line)
            .map_err(|e| Error::IngestError { line: line_no, message: e.to_string() })?;
        if !seen_ids.insert(raw.id.clone()) {
            return Err(Error::IngestError {
                line: line_no,
                message: format!("duplicate record id {:?}", raw.id),
            });
        }
        let text = match (&raw.text, task) {
            (Some(t), _) => t.clone(),
            // Link prediction keys on the entity pair; the sentence is the
            // rendered pair itself.
            (None, TaskKind::LinkPrediction) => match (&raw.head, &raw.tail) {
                (Some(h), Some(t)) => format!("{h}, {t}"),
                _ => {
                    return Err(Error::IngestError {
                        line: line_no,
                        message: "missing \"text\" and no entity pair to derive it from".into(),
                    })
                }
            },
            (None, _) => {
                return Err(Error::IngestError {
                    line: line_no,
                    message: "missing \"text\"".into(),
                })
            }
        };
        let label = match inventory {
            Some(inv) => inv.resolve(&raw.label),
            None => Label::bare(&raw.label),
        };
        let record = SentenceRecord {
            id: raw.id,
            text,
            label,
            head_entity: raw.head,
            tail_entity: raw.tail,
            split: raw.split,
        };
        record.validate(task).map_err(|e| Error::IngestError {
            line: line_no,
            message: e.to_string(),
        })?;
        *counts.entry(record.split).or_insert(0) += 1;
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(IngestReport { records, counts })
}
