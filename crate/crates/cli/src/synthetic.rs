//! Planted-marker synthetic corpus: a classification task whose signal is a
//! per-label marker phrase occupying exactly one chunk, with every other
//! chunk drawn from a shared filler vocabulary.
//!
//! The construction makes the retrieval problem solvable by design: each
//! label's description is its marker phrase, so memory keys include the
//! marker chunks; mock LM rules reward a prompt whose example document ends
//! a marker phrase directly before the label id, which is exactly the shape
//! of a retrieved marker chunk-key document.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chunkrag_core::{Label, MockRule, SentenceRecord, Split, TaskKind};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{MemorySplit, RunConfig, TrainSection};
use crate::CliError;

pub const MOCK_MARKER_PROBABILITY: f64 = 0.9;
pub const MOCK_FALLBACK_PROBABILITY: f64 = 0.1;
pub const FALLBACK_COMPLETION: &str = "NONE";

#[derive(Debug, Clone, clap::Args)]
pub struct SyntheticSpec {
    /// Number of labels (at most 10, keeping label ids prefix-free).
    #[arg(long, default_value_t = 5)]
    pub labels: usize,
    #[arg(long, default_value_t = 10)]
    pub train_per_label: usize,
    #[arg(long, default_value_t = 2)]
    pub dev_per_label: usize,
    #[arg(long, default_value_t = 4)]
    pub test_per_label: usize,
    /// Words per chunk; the marker phrase fills one chunk exactly.
    #[arg(long, default_value_t = 5)]
    pub chunk_len: usize,
    #[arg(long, default_value_t = 5)]
    pub chunks_per_sentence: usize,
    /// Size of the shared filler vocabulary.
    #[arg(long, default_value_t = 40)]
    pub filler_vocab: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Embedding dimension written into the generated run configuration.
    #[arg(long, default_value_t = 320)]
    pub embed_dim: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            labels: 5,
            train_per_label: 10,
            dev_per_label: 2,
            test_per_label: 4,
            chunk_len: 5,
            chunks_per_sentence: 5,
            filler_vocab: 40,
            seed: 0,
            embed_dim: 320,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(m.into()));
        if self.labels == 0 || self.labels > 10 {
            return bad("labels must be between 1 and 10 so label ids stay prefix-free");
        }
        if self.train_per_label == 0 || self.test_per_label == 0 {
            return bad("train_per_label and test_per_label must be at least 1");
        }
        if self.dev_per_label == 0 {
            return bad("dev_per_label must be at least 1 (the memory is built from dev)");
        }
        if self.chunk_len == 0 {
            return bad("chunk_len must be at least 1");
        }
        if self.chunks_per_sentence < 2 {
            return bad("chunks_per_sentence must be at least 2 so markers can avoid the end");
        }
        if self.filler_vocab < 2 {
            return bad("filler_vocab must be at least 2");
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct SyntheticCorpus {
    pub records: Vec<SentenceRecord>,
    /// label id → description text (= the marker phrase).
    pub descriptions: BTreeMap<String, String>,
    pub rules: Vec<MockRule>,
    /// label id → marker phrase, for test oracles.
    pub markers: BTreeMap<String, String>,
}

fn label_id(k: usize) -> String {
    format!("REL_{k}")
}

/// Marker token i of label k; character shape is disjoint from the filler
/// vocabulary ("fl…") and from label ids.
fn marker_token(k: usize, i: usize) -> String {
    format!("m{k}x{i}m")
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus, CliError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let fillers: Vec<String> = (0..spec.filler_vocab).map(|j| format!("fl{j}")).collect();

    let mut descriptions = BTreeMap::new();
    let mut markers = BTreeMap::new();
    let mut rules = Vec::new();
    for k in 0..spec.labels {
        let phrase: Vec<String> = (0..spec.chunk_len).map(|i| marker_token(k, i)).collect();
        let phrase_text = phrase.join(" ");
        descriptions.insert(label_id(k), phrase_text.clone());
        markers.insert(label_id(k), phrase_text);
        // The pattern is the marker-final word directly before the label id:
        // present exactly when the prompt's example document carries this
        // label's marker chunk as its key text.
        rules.push(MockRule {
            pattern: format!("{} {}", marker_token(k, spec.chunk_len - 1), label_id(k)),
            probability: MOCK_MARKER_PROBABILITY,
            completion: Some(label_id(k)),
        });
    }
    rules.push(MockRule {
        pattern: String::new(),
        probability: MOCK_FALLBACK_PROBABILITY,
        completion: Some(FALLBACK_COMPLETION.to_string()),
    });

    let mut records = Vec::new();
    for k in 0..spec.labels {
        let id = label_id(k);
        let phrase: Vec<String> = (0..spec.chunk_len).map(|i| marker_token(k, i)).collect();
        let total = spec.train_per_label + spec.dev_per_label + spec.test_per_label;
        for s in 0..total {
            let split = if s < spec.train_per_label {
                Split::Train
            } else if s < spec.train_per_label + spec.dev_per_label {
                Split::Dev
            } else {
                Split::Test
            };
            let c = spec.chunks_per_sentence;
            // Half the sentences end with the marker chunk; the rest bury it
            // earlier, so a nearest-sentence document only sometimes carries
            // the marker-before-label adjacency.
            let marker_chunk = if rng.random_bool(0.5) {
                c - 1
            } else {
                rng.random_range(0..c - 1)
            };
            let mut words: Vec<String> = Vec::with_capacity(c * spec.chunk_len);
            for chunk in 0..c {
                if chunk == marker_chunk {
                    words.extend(phrase.iter().cloned());
                } else {
                    for _ in 0..spec.chunk_len {
                        words.push(fillers.choose(&mut rng).expect("non-empty pool").clone());
                    }
                }
            }
            records.push(SentenceRecord {
                id: format!("syn-{}-{k}-{s}", split_tag(split)),
                text: words.join(" "),
                label: Label::new(&id, descriptions.get(&id).cloned().unwrap_or_default()),
                head_entity: None,
                tail_entity: None,
                split,
            });
        }
    }
    Ok(SyntheticCorpus { records, descriptions, rules, markers })
}

fn split_tag(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Dev => "dev",
        Split::Test => "test",
    }
}

#[derive(Serialize)]
struct DatasetLine<'a> {
    id: &'a str,
    text: &'a str,
    label: &'a str,
    split: &'a str,
}

pub struct WrittenCorpus {
    pub dataset: PathBuf,
    pub labels: PathBuf,
    pub rules: PathBuf,
    pub template: PathBuf,
    pub config: PathBuf,
    pub markers: PathBuf,
}

/// Writes the corpus and a ready-to-run configuration into `dir`.
pub fn write_corpus(dir: &Path, spec: &SyntheticSpec) -> Result<WrittenCorpus, CliError> {
    let corpus = generate(spec)?;
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    let write = |name: &str, content: String| -> Result<PathBuf, CliError> {
        let path = dir.join(name);
        std::fs::write(&path, content)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    };

    let mut dataset_lines = String::new();
    for r in &corpus.records {
        let line = DatasetLine {
            id: &r.id,
            text: &r.text,
            label: &r.label.canonical_id,
            split: split_tag(r.split),
        };
        dataset_lines.push_str(&serde_json::to_string(&line).expect("line serializes"));
        dataset_lines.push('\n');
    }
    let dataset = write("dataset.jsonl", dataset_lines)?;
    let labels = write(
        "labels.json",
        serde_json::to_string_pretty(&corpus.descriptions).expect("labels serialize") + "\n",
    )?;
    let rules = write(
        "rules.json",
        serde_json::to_string_pretty(&corpus.rules).expect("rules serialize") + "\n",
    )?;
    let template = write(
        "template.txt",
        chunkrag_core::default_template(TaskKind::TextClassification).instruction_text,
    )?;
    let markers = write(
        "markers.json",
        serde_json::to_string_pretty(&corpus.markers).expect("markers serialize") + "\n",
    )?;

    // The generated run configuration trains full-batch under the dense KL
    // loss: the max-absdiff loss only sharpens the current argmax and cannot
    // reorder candidates from an identity start.
    let train_count = spec.labels * spec.train_per_label;
    let run = RunConfig {
        task: TaskKind::TextClassification,
        dataset_path: dataset.clone(),
        chunk_len: spec.chunk_len,
        top_n: 10,
        diversity_cap: 4,
        embedder: chunkrag_core::EmbedderConfig::local_hash(spec.embed_dim),
        llm: chunkrag_core::LmScoringBackend::mock(corpus.rules.clone(), 4096),
        // Full-batch descent keeps the per-epoch mean-loss trace monotone.
        train: TrainSection {
            batch_size: train_count.max(1),
            learning_rate: 0.1,
            epochs: 200,
            loss_mode: chunkrag_core::LossMode::FullKl,
            eta: 0.1,
        },
        ablation: Default::default(),
        memory_split: MemorySplit::Dev,
        seed: spec.seed,
        label_inventory_path: Some(labels.clone()),
        template_path: Some(template.clone()),
        artifacts_dir: dir.join("artifacts"),
    };
    let config = write(
        "config.json",
        serde_json::to_string_pretty(&run).expect("config serializes") + "\n",
    )?;
    Ok(WrittenCorpus { dataset, labels, rules, template, config, markers })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_per_seed() {
        let spec = SyntheticSpec::default();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.records, b.records);
        let mut other = SyntheticSpec::default();
        other.seed = 1;
        let c = generate(&other).unwrap();
        assert_ne!(a.records, c.records, "a different seed must move the corpus");
    }

    #[test]
    fn every_sentence_carries_its_whole_marker_chunk() {
        let corpus = generate(&SyntheticSpec::default()).unwrap();
        assert_eq!(corpus.records.len(), 5 * (10 + 2 + 4));
        for r in &corpus.records {
            assert_eq!(r.text.split_whitespace().count(), 25);
            let phrase = &corpus.markers[&r.label.canonical_id];
            assert!(
                r.text.contains(phrase.as_str()),
                "record {} lost its marker phrase",
                r.id
            );
            // The description the memory keys on is the marker phrase itself.
            assert_eq!(&r.label.description_text, phrase);
        }
    }

    #[test]
    fn rules_reward_marker_label_adjacency() {
        let corpus = generate(&SyntheticSpec::default()).unwrap();
        assert_eq!(corpus.rules.len(), 6, "one rule per label plus the fallback");
        for (k, rule) in corpus.rules[..5].iter().enumerate() {
            let label = label_id(k);
            let last = marker_token(k, 4);
            assert_eq!(rule.pattern, format!("{last} {label}"));
            assert_eq!(rule.probability, MOCK_MARKER_PROBABILITY);
            assert_eq!(rule.completion.as_deref(), Some(label.as_str()));
        }
        let fallback = &corpus.rules[5];
        assert!(fallback.pattern.is_empty(), "the last rule catches everything");
        assert_eq!(fallback.probability, MOCK_FALLBACK_PROBABILITY);
        assert_eq!(fallback.completion.as_deref(), Some(FALLBACK_COMPLETION));
    }

    #[test]
    fn written_corpus_round_trips_through_the_config() {
        let dir = tempfile::tempdir().unwrap();
        let written = write_corpus(dir.path(), &SyntheticSpec::default()).unwrap();
        for path in [
            &written.dataset,
            &written.labels,
            &written.rules,
            &written.template,
            &written.config,
            &written.markers,
        ] {
            assert!(path.exists(), "missing {}", path.display());
        }
        let cfg = crate::config::RunConfig::from_file(&written.config).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.train.loss_mode, chunkrag_core::LossMode::FullKl);
        assert_eq!(cfg.embedder.dim, 320);
        assert_eq!(cfg.train.batch_size, 50, "full-batch training over the train split");
    }
}
