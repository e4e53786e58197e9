//! Prompt assembly (instruction, example document, input) and parsing of LM
//! completions into typed predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Label, SentenceRecord, TaskKind, Triple, TripleSet};
use crate::retrieval::DocumentCandidate;

pub const EXAMPLE_SLOT: &str = "{example}";
pub const INPUT_SLOT: &str = "{input}";

/// The instruction text I with one example slot and one input slot, in that
/// order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub task: TaskKind,
    pub instruction_text: String,
}

impl PromptTemplate {
    pub fn new(task: TaskKind, instruction_text: impl Into<String>) -> Result<Self> {
        let instruction_text = instruction_text.into();
        let t = PromptTemplate { task, instruction_text };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let count = |slot: &str| self.instruction_text.matches(slot).count();
        if count(EXAMPLE_SLOT) != 1 {
            return Err(Error::InvalidConfig(format!(
                "template must contain {EXAMPLE_SLOT} exactly once"
            )));
        }
        if count(INPUT_SLOT) != 1 {
            return Err(Error::InvalidConfig(format!(
                "template must contain {INPUT_SLOT} exactly once"
            )));
        }
        let e = self.instruction_text.find(EXAMPLE_SLOT).expect("checked");
        let i = self.instruction_text.find(INPUT_SLOT).expect("checked");
        if e > i {
            return Err(Error::InvalidConfig(
                "template must render the example before the input".into(),
            ));
        }
        Ok(())
    }

    /// The instruction component alone, slots removed, whitespace collapsed.
    pub fn instruction_component(&self) -> String {
        let stripped = self.instruction_text.replace(EXAMPLE_SLOT, " ").replace(INPUT_SLOT, " ");
        stripped.split_whitespace().collect::<Vec<_>>().join(" ")
    }
}

/// The default editable instruction wording per task.
pub fn default_template(task: TaskKind) -> PromptTemplate {
    let text = match task {
        TaskKind::TripleExtraction => {
            "Extract every (head entity, relation, tail entity) triple from the input sentence. \
             Example: {example} Input: {input} Output:"
        }
        TaskKind::RelationExtraction => {
            "Name the relation between the given head and tail entities in the input sentence. \
             Example: {example} Input: {input} Relation:"
        }
        TaskKind::TextClassification => {
            "Assign the input sentence its class label. \
             Example: {example} Input: {input} Label:"
        }
        TaskKind::LinkPrediction => {
            "Predict the relation linking the given entity pair. \
             Example: {example} Input: {input} Relation:"
        }
    };
    PromptTemplate { task, instruction_text: text.into() }
}

/// The input component: x.text, plus the entity pair for tasks that carry
/// one.
pub fn render_input(task: TaskKind, x: &SentenceRecord) -> Result<String> {
    if !task.requires_entities() {
        return Ok(x.text.clone());
    }
    match (&x.head_entity, &x.tail_entity) {
        (Some(h), Some(t)) if !h.trim().is_empty() && !t.trim().is_empty() => {
            Ok(format!("{} (head: {h}; tail: {t})", x.text))
        }
        _ => Err(Error::MissingEntities { id: x.id.clone(), task: task.to_string() }),
    }
}

/// Fills the template slots: instruction with example.text and the rendered
/// input. Deterministic.
pub fn assemble_prompt(
    template: &PromptTemplate,
    example: &DocumentCandidate,
    x: &SentenceRecord,
) -> Result<String> {
    template.validate()?;
    let input = render_input(template.task, x)?;
    Ok(template
        .instruction_text
        .replacen(EXAMPLE_SLOT, &example.text, 1)
        .replacen(INPUT_SLOT, &input, 1))
}

/// A typed prediction parsed from the raw completion t.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionOutput {
    pub task: TaskKind,
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub triples: Option<TripleSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// True when a label task's completion contained no inventory label and
    /// the whole trimmed completion was kept instead.
    #[serde(default)]
    pub unparseable: bool,
}

/// Parses a completion. Triple extraction reads every nesting-free
/// parenthesized comma-separated group of exactly three parts; label tasks
/// take the earliest inventory label occurring in the text, longest match
/// first on position ties, case-insensitive. Never fails on arbitrary text.
pub fn parse_output(raw: &str, task: TaskKind, label_inventory: &[Label]) -> ExtractionOutput {
    match task {
        TaskKind::TripleExtraction => ExtractionOutput {
            task,
            raw_text: raw.to_string(),
            triples: Some(parse_triples(raw)),
            label: None,
            unparseable: false,
        },
        _ => {
            let (label, unparseable) = match find_inventory_label(raw, label_inventory) {
                Some(id) => (id, false),
                None => (raw.trim().to_string(), true),
            };
            ExtractionOutput { task, raw_text: raw.to_string(), triples: None, label: Some(label), unparseable }
        }
    }
}

/// Extracts "(h, r, t)" groups; malformed groups are skipped, duplicates
/// collapse.
pub fn parse_triples(raw: &str) -> TripleSet {
    let mut set = TripleSet::new();
    let mut open: Option<usize> = None;
    for (i, c) in raw.char_indices() {
        match c {
            '(' => open = Some(i + c.len_utf8()),
            ')' => {
                if let Some(start) = open.take() {
                    let inside = &raw[start..i];
                    let parts: Vec<&str> = inside.split(',').map(str::trim).collect();
                    if parts.len() == 3 && parts.iter().all(|p| !p.is_empty()) {
                        set.insert(Triple::normalized(parts[0], parts[1], parts[2]));
                    }
                }
            }
            _ => {}
        }
    }
    set
}

fn find_inventory_label(raw: &str, inventory: &[Label]) -> Option<String> {
    let hay = raw.to_lowercase();
    let mut best: Option<(usize, usize, &Label)> = None;
    for label in inventory {
        let needle = label.canonical_id.to_lowercase();
        if needle.is_empty() {
            continue;
        }
        if let Some(pos) = hay.find(&needle) {
            let candidate = (pos, needle.len(), label);
            best = match best {
                None => Some(candidate),
                Some((bp, bl, _)) if pos < bp || (pos == bp && needle.len() > bl) => {
                    Some(candidate)
                }
                keep => keep,
            };
        }
    }
    best.map(|(_, _, label)| label.canonical_id.clone())
}

/// One exported instruction-dataset row: the four prompt components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionRow {
    pub instruction: String,
    pub example: String,
    pub input: String,
    pub output: String,
}

pub fn instruction_row(
    template: &PromptTemplate,
    example: &DocumentCandidate,
    x: &SentenceRecord,
    output: &str,
) -> Result<InstructionRow> {
    Ok(InstructionRow {
        instruction: template.instruction_component(),
        example: example.text.clone(),
        input: render_input(template.task, x)?,
        output: output.to_string(),
    })
}
