//! Run configuration: JSON file plus command-line overrides, every scalar
//! field reachable from either side.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use chunkrag_core::{
    EmbedderBackend, EmbedderConfig, LmScoringBackend, LossMode, MockRule, Split, TaskKind,
    TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Which ablation switches are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Ablation {
    /// Without the tailored chunk scorer: rank by raw cosine, skip training.
    #[serde(rename = "WTCS")]
    Wtcs,
    /// Without diversity: candidate documents never include ordered pairs.
    #[serde(rename = "WD")]
    Wd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemorySplit {
    Train,
    #[default]
    Dev,
}

impl MemorySplit {
    pub fn to_split(self) -> Split {
        match self {
            MemorySplit::Train => Split::Train,
            MemorySplit::Dev => Split::Dev,
        }
    }
}

/// Training section of the run configuration. The run-level seed feeds the
/// shuffle; everything else mirrors the core training knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub loss_mode: LossMode,
    pub eta: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch_size: 8,
            learning_rate: 0.01,
            epochs: 50,
            loss_mode: LossMode::PaperMaxAbsdiff,
            eta: 0.1,
        }
    }
}

impl TrainSection {
    pub fn to_core(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            seed,
            loss_mode: self.loss_mode,
        }
    }
}

fn default_chunk_len() -> usize {
    5
}
fn default_top_n() -> usize {
    10
}
fn default_diversity_cap() -> usize {
    4
}
fn default_embedder() -> EmbedderConfig {
    EmbedderConfig::local_hash(256)
}
fn default_llm() -> LmScoringBackend {
    // A single fallback-probability rule keeps a bare config runnable; real
    // runs configure rules in the file or via --mock-rules.
    LmScoringBackend::mock(
        vec![MockRule { pattern: String::new(), probability: 0.1, completion: None }],
        4096,
    )
}
fn default_artifacts_dir() -> PathBuf {
    PathBuf::from("artifacts")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskKind,
    pub dataset_path: PathBuf,
    #[serde(default = "default_chunk_len")]
    pub chunk_len: usize,
    #[serde(default = "default_top_n")]
    pub top_n: usize,
    #[serde(default = "default_diversity_cap")]
    pub diversity_cap: usize,
    #[serde(default = "default_embedder")]
    pub embedder: EmbedderConfig,
    #[serde(default = "default_llm")]
    pub llm: LmScoringBackend,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub ablation: BTreeSet<Ablation>,
    #[serde(default)]
    pub memory_split: MemorySplit,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub label_inventory_path: Option<PathBuf>,
    #[serde(default)]
    pub template_path: Option<PathBuf>,
    #[serde(default = "default_artifacts_dir")]
    pub artifacts_dir: PathBuf,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&raw)
            .map_err(|e| CliError::Config(format!("config {} is invalid: {e}", path.display())))
    }

    /// Structural checks plus existence of every referenced input path.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.chunk_len == 0 {
            return bad("chunk_len must be at least 1".into());
        }
        if self.top_n == 0 {
            return bad("top_n must be at least 1".into());
        }
        if self.diversity_cap == 0 {
            return bad("diversity_cap must be at least 1".into());
        }
        if !(self.train.eta > 0.0) {
            return bad("train.eta must be positive".into());
        }
        self.embedder.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.llm.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train.to_core(self.seed).validate().map_err(|e| CliError::Config(e.to_string()))?;
        for (name, path) in self.input_paths() {
            if !path.exists() {
                return bad(format!("{name} path does not exist: {}", path.display()));
            }
        }
        Ok(())
    }

    fn input_paths(&self) -> Vec<(&'static str, &Path)> {
        let mut v: Vec<(&'static str, &Path)> = vec![("dataset", &self.dataset_path)];
        if let Some(p) = &self.label_inventory_path {
            v.push(("label inventory", p));
        }
        if let Some(p) = &self.template_path {
            v.push(("template", p));
        }
        v
    }

    /// Hex SHA-256 of the canonical JSON rendering; the manifest records it.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(&bytes);
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn uses_wtcs(&self) -> bool {
        self.ablation.contains(&Ablation::Wtcs)
    }

    pub fn uses_wd(&self) -> bool {
        self.ablation.contains(&Ablation::Wd)
    }

    pub fn memory_path(&self) -> PathBuf {
        self.artifacts_dir.join("memory.bin")
    }

    pub fn scorer_path(&self) -> PathBuf {
        self.artifacts_dir.join("scorer.bin")
    }

    pub fn report_json_path(&self) -> PathBuf {
        self.artifacts_dir.join("report.json")
    }

    pub fn report_text_path(&self) -> PathBuf {
        self.artifacts_dir.join("report.txt")
    }

    pub fn traces_path(&self) -> PathBuf {
        self.artifacts_dir.join("traces.jsonl")
    }

    pub fn loss_trace_path(&self) -> PathBuf {
        self.artifacts_dir.join("loss_trace.csv")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.artifacts_dir.join("manifest.json")
    }
}

/// Loads mock rules from a JSON array file into the LM section.
pub fn apply_mock_rules_file(cfg: &mut RunConfig, path: &Path) -> Result<(), CliError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read mock rules {}: {e}", path.display())))?;
    let rules: Vec<MockRule> = serde_json::from_str(&raw)
        .map_err(|e| CliError::Config(format!("mock rules {} are invalid: {e}", path.display())))?;
    cfg.llm.mock_rules = Some(rules);
    Ok(())
}

/// Command-line overrides applied on top of the file (or defaults).
#[derive(Debug, Clone, Default, clap::Args)]
pub struct ConfigArgs {
    /// JSON run-configuration file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Task kind: triple-extraction, relation-extraction, text-classification, link-prediction.
    #[arg(long)]
    pub task: Option<String>,
    /// JSONL dataset path.
    #[arg(long, value_name = "FILE")]
    pub dataset: Option<PathBuf>,
    /// Words per chunk (m).
    #[arg(long)]
    pub chunk_len: Option<usize>,
    /// Retrieval width for link prediction and the KNN baseline.
    #[arg(long)]
    pub top_n: Option<usize>,
    /// Pair-expansion cap in the diversity operation.
    #[arg(long)]
    pub diversity_cap: Option<usize>,
    /// Which split the memory is built from: train or dev.
    #[arg(long)]
    pub memory_split: Option<String>,
    /// Master seed for every random draw in the run.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Ablation switches; repeatable (WTCS, WD).
    #[arg(long = "ablation")]
    pub ablation: Vec<String>,
    /// Directory artifacts are written to.
    #[arg(long, value_name = "DIR")]
    pub artifacts_dir: Option<PathBuf>,
    /// Label inventory JSON ({"LABEL": "description", ...}).
    #[arg(long = "labels", value_name = "FILE")]
    pub label_inventory: Option<PathBuf>,
    /// Prompt template file with {example} and {input} slots.
    #[arg(long, value_name = "FILE")]
    pub template: Option<PathBuf>,
    /// Mock LM rules JSON file.
    #[arg(long, value_name = "FILE")]
    pub mock_rules: Option<PathBuf>,
    /// Embedding dimension (local hash backend).
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Training batch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Gradient-descent learning rate.
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Softmax temperature of the scorer.
    #[arg(long)]
    pub eta: Option<f64>,
    /// Loss mode: paper-max-absdiff or full-kl.
    #[arg(long)]
    pub loss_mode: Option<String>,
}

fn parse_kebab<T: serde::de::DeserializeOwned>(what: &str, raw: &str) -> Result<T, CliError> {
    serde_json::from_value(serde_json::Value::String(raw.to_string()))
        .map_err(|_| CliError::Config(format!("invalid {what}: {raw}")))
}

impl ConfigArgs {
    /// File config (when given) with flag overrides, validated.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => {
                let task = self.task.as_deref().ok_or_else(|| {
                    CliError::Config("either --config or --task is required".into())
                })?;
                let dataset = self.dataset.clone().ok_or_else(|| {
                    CliError::Config("either --config or --dataset is required".into())
                })?;
                RunConfig {
                    task: parse_kebab("task", task)?,
                    dataset_path: dataset,
                    chunk_len: default_chunk_len(),
                    top_n: default_top_n(),
                    diversity_cap: default_diversity_cap(),
                    embedder: default_embedder(),
                    llm: default_llm(),
                    train: TrainSection::default(),
                    ablation: BTreeSet::new(),
                    memory_split: MemorySplit::default(),
                    seed: 0,
                    label_inventory_path: None,
                    template_path: None,
                    artifacts_dir: default_artifacts_dir(),
                }
            }
        };
        if let Some(raw) = &self.task {
            cfg.task = parse_kebab("task", raw)?;
        }
        if let Some(p) = &self.dataset {
            cfg.dataset_path = p.clone();
        }
        if let Some(v) = self.chunk_len {
            cfg.chunk_len = v;
        }
        if let Some(v) = self.top_n {
            cfg.top_n = v;
        }
        if let Some(v) = self.diversity_cap {
            cfg.diversity_cap = v;
        }
        if let Some(raw) = &self.memory_split {
            cfg.memory_split = parse_kebab("memory split", raw)?;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        for raw in &self.ablation {
            cfg.ablation.insert(parse_kebab("ablation", &raw.to_uppercase())?);
        }
        if let Some(p) = &self.artifacts_dir {
            cfg.artifacts_dir = p.clone();
        }
        if let Some(p) = &self.label_inventory {
            cfg.label_inventory_path = Some(p.clone());
        }
        if let Some(p) = &self.template {
            cfg.template_path = Some(p.clone());
        }
        if let Some(v) = self.embed_dim {
            if cfg.embedder.backend == EmbedderBackend::LocalHash {
                cfg.embedder.dim = v;
            } else {
                return Err(CliError::Config(
                    "--embed-dim only applies to the local hash embedder".into(),
                ));
            }
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.train.learning_rate = v;
        }
        if let Some(v) = self.eta {
            cfg.train.eta = v;
        }
        if let Some(raw) = &self.loss_mode {
            cfg.train.loss_mode = parse_kebab("loss mode", raw)?;
        }
        if let Some(p) = &self.mock_rules {
            apply_mock_rules_file(&mut cfg, p)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
