//! Shared domain types: tasks, records, labels, chunks, and triples.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four supported tasks. Chunk-level retrieval applies to the
/// noise-intensive ones; link prediction retrieves whole entries top-n.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    TripleExtraction,
    RelationExtraction,
    TextClassification,
    LinkPrediction,
}

impl TaskKind {
    /// True when only a small sub-span of the input determines the label,
    /// so whole-sentence retrieval admits noise. Fixed mapping.
    pub fn is_noise_intensive(self) -> bool {
        !matches!(self, TaskKind::LinkPrediction)
    }

    /// True when records must carry head and tail entities.
    pub fn requires_entities(self) -> bool {
        matches!(self, TaskKind::RelationExtraction | TaskKind::LinkPrediction)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            TaskKind::TripleExtraction => "triple-extraction",
            TaskKind::RelationExtraction => "relation-extraction",
            TaskKind::TextClassification => "text-classification",
            TaskKind::LinkPrediction => "link-prediction",
        };
        f.write_str(name)
    }
}

/// Dataset split a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => f.write_str("train"),
            Split::Dev => f.write_str("dev"),
            Split::Test => f.write_str("test"),
        }
    }
}

/// A label: stable id plus the description text fed to the embedder.
/// When no description is configured the id itself is the description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub canonical_id: String,
    pub description_text: String,
}

impl Label {
    pub fn new(canonical_id: impl Into<String>, description_text: impl Into<String>) -> Self {
        Label { canonical_id: canonical_id.into(), description_text: description_text.into() }
    }

    /// A label with no configured description falls back to its id.
    pub fn bare(canonical_id: impl Into<String>) -> Self {
        let id = canonical_id.into();
        Label { description_text: id.clone(), canonical_id: id }
    }

    /// Rendering used wherever a label is concatenated into document text.
    pub fn rendered(&self) -> &str {
        &self.canonical_id
    }
}

/// Map canonical_id -> description_text, loaded from a JSON object file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LabelInventory {
    #[serde(flatten)]
    pub descriptions: BTreeMap<String, String>,
}

impl LabelInventory {
    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::FormatError {
            path: "label inventory".into(),
            message: e.to_string(),
        })
    }

    /// Resolves an id to a Label, falling back to the id as description.
    pub fn resolve(&self, canonical_id: &str) -> Label {
        match self.descriptions.get(canonical_id) {
            Some(d) if !d.trim().is_empty() => Label::new(canonical_id, d.clone()),
            _ => Label::bare(canonical_id),
        }
    }

    /// All labels, in stable id order.
    pub fn labels(&self) -> Vec<Label> {
        self.descriptions.keys().map(|id| self.resolve(id)).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptions.is_empty()
    }
}

/// One labeled training/evaluation instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub id: String,
    /// Whitespace-normalized sentence text (s or x).
    pub text: String,
    pub label: Label,
    pub head_entity: Option<String>,
    pub tail_entity: Option<String>,
    pub split: Split,
}

impl SentenceRecord {
    /// Whitespace tokens of the text.
    pub fn words(&self) -> Vec<&str> {
        self.text.split_whitespace().collect()
    }

    /// Checks the task-specific invariants.
    pub fn validate(&self, task: TaskKind) -> Result<()> {
        if self.text.split_whitespace().next().is_none() {
            return Err(Error::EmptyText);
        }
        if task.requires_entities()
            && (none_or_blank(&self.head_entity) || none_or_blank(&self.tail_entity))
        {
            return Err(Error::MissingEntities { id: self.id.clone(), task: task.to_string() });
        }
        Ok(())
    }
}

fn none_or_blank(v: &Option<String>) -> bool {
    match v {
        None => true,
        Some(s) => s.trim().is_empty(),
    }
}

/// A contiguous run of at most m words from one sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub words: Vec<String>,
    pub source_id: String,
    /// Ordinal position within the source sentence.
    pub index: usize,
}

impl Chunk {
    pub fn joined(&self) -> String {
        self.words.join(" ")
    }
}

/// One (head, relation, tail) assertion, stored in normalized form.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triple {
    /// Normalizes each element (case-fold + whitespace collapse).
    pub fn normalized(head: &str, relation: &str, tail: &str) -> Self {
        Triple {
            head: normalize_match(head),
            relation: normalize_match(relation),
            tail: normalize_match(tail),
        }
    }

    pub fn rendered(&self) -> String {
        format!("({}, {}, {})", self.head, self.relation, self.tail)
    }
}

/// A set of normalized triples; duplicates collapse.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripleSet {
    triples: Vec<Triple>,
}

impl TripleSet {
    pub fn new() -> Self {
        TripleSet::default()
    }

    /// Inserts, keeping set semantics; returns false for a duplicate.
    pub fn insert(&mut self, t: Triple) -> bool {
        if self.triples.contains(&t) {
            return false;
        }
        self.triples.push(t);
        true
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.triples.contains(t)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Triple> {
        self.triples.iter()
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Renders as a space-separated list of "(h, r, t)" groups.
    pub fn rendered(&self) -> String {
        self.triples.iter().map(Triple::rendered).collect::<Vec<_>>().join(" ")
    }

    /// Structural equality as sets, ignoring insertion order.
    pub fn set_eq(&self, other: &TripleSet) -> bool {
        self.len() == other.len() && self.triples.iter().all(|t| other.contains(t))
    }
}

impl FromIterator<Triple> for TripleSet {
    fn from_iter<I: IntoIterator<Item = Triple>>(iter: I) -> Self {
        let mut s = TripleSet::new();
        for t in iter {
            s.insert(t);
        }
        s
    }
}

/// Splits on whitespace, dropping surrounding whitespace; interior
/// punctuation stays attached to its token.
pub fn normalize_text(raw: &str) -> Result<Vec<String>> {
    let words: Vec<String> = raw.split_whitespace().map(str::to_owned).collect();
    if words.is_empty() {
        return Err(Error::EmptyText);
    }
    Ok(words)
}

/// Normalization applied before any exact-match comparison:
/// case-fold plus whitespace collapse.
pub fn normalize_match(raw: &str) -> String {
    raw.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}
