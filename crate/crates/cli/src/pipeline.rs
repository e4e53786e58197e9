//! Full-run orchestration: memory construction, scorer training, per-sentence
//! extraction, scoring, and the reproducibility manifest.

use std::collections::BTreeMap;
use std::path::Path;

use chunkrag_core::{
    build_candidates, build_memory, default_template, parse_output, score_elements, score_labels,
    score_triples, select_document, train_scorer, trace_to_csv, CandidateConfig, DiversityMode,
    DocumentCandidate, Element, Embedder, ExtractionOutput, Label, LabelInventory, Memory,
    MetricsReport, PromptTemplate, ScorerCheckpoint, ScorerParams, SelectionMode, SentenceRecord,
    Split, TaskKind, TripleSet,
};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::ingest::{ingest, IngestReport};
use crate::CliError;

fn staged<T, E: std::fmt::Display>(stage: &str, r: Result<T, E>) -> Result<T, CliError> {
    r.map_err(|e| CliError::Runtime(format!("stage {stage}: {e}")))
}

/// Everything read from disk before any stage runs.
pub struct LoadedInputs {
    pub cfg: RunConfig,
    pub inventory: Option<LabelInventory>,
    pub template: PromptTemplate,
    pub ingested: IngestReport,
    pub embedder: Embedder,
}

impl LoadedInputs {
    pub fn train_split(&self) -> Vec<SentenceRecord> {
        self.ingested.of_split(Split::Train)
    }

    pub fn memory_records(&self) -> Vec<SentenceRecord> {
        self.ingested.of_split(self.cfg.memory_split.to_split())
    }

    pub fn test_split(&self) -> Vec<SentenceRecord> {
        self.ingested.of_split(Split::Test)
    }

    pub fn candidate_config(&self) -> CandidateConfig {
        CandidateConfig {
            diversity_cap: self.cfg.diversity_cap,
            mode: if self.cfg.uses_wd() { DiversityMode::SinglesOnly } else { DiversityMode::Full },
            top_n: self.cfg.top_n,
        }
    }

    pub fn selection_mode(&self) -> SelectionMode {
        if self.cfg.uses_wtcs() { SelectionMode::RawCosine } else { SelectionMode::Trained }
    }

    /// Inventory labels for output parsing; falls back to labels observed in
    /// the dataset.
    pub fn parse_labels(&self) -> Vec<Label> {
        match &self.inventory {
            Some(inv) => inv.labels(),
            None => self.ingested.observed_labels(),
        }
    }
}

pub fn load_inputs(cfg: RunConfig) -> Result<LoadedInputs, CliError> {
    let inventory = match &cfg.label_inventory_path {
        Some(path) => {
            let raw = staged("ingest", std::fs::read_to_string(path).map_err(|e| {
                format!("cannot read label inventory {}: {e}", path.display())
            }))?;
            Some(staged("ingest", LabelInventory::from_json(&raw))?)
        }
        None => None,
    };
    let template = match &cfg.template_path {
        Some(path) => {
            let raw = staged("ingest", std::fs::read_to_string(path).map_err(|e| {
                format!("cannot read template {}: {e}", path.display())
            }))?;
            staged("ingest", PromptTemplate::new(cfg.task, raw.trim_end().to_string()))?
        }
        None => default_template(cfg.task),
    };
    let ingested = staged("ingest", ingest(&cfg.dataset_path, cfg.task, inventory.as_ref()))?;
    let embedder = staged("ingest", Embedder::new(cfg.embedder.clone()))?;
    Ok(LoadedInputs { cfg, inventory, template, ingested, embedder })
}

fn ensure_artifacts_dir(cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.artifacts_dir).map_err(|e| {
        CliError::Runtime(format!(
            "stage build-memory: cannot create {}: {e}",
            cfg.artifacts_dir.display()
        ))
    })
}

/// Interrupted writes leave a .partial file behind; completed writes are
/// renamed into place atomically.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let partial = path.with_extension("partial");
    std::fs::write(&partial, bytes)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", partial.display())))?;
    std::fs::rename(&partial, path)
        .map_err(|e| CliError::Runtime(format!("cannot finalize {}: {e}", path.display())))
}

pub fn build_memory_stage(li: &LoadedInputs) -> Result<Memory, CliError> {
    ensure_artifacts_dir(&li.cfg)?;
    let records = li.memory_records();
    let memory = staged(
        "build-memory",
        build_memory(&records, li.cfg.task, li.cfg.chunk_len, &li.embedder),
    )?;
    staged("build-memory", memory.save(&li.cfg.memory_path()))?;
    Ok(memory)
}

/// Trains the scorer, or writes the identity checkpoint when training is
/// ablated away (WTCS) so downstream stages always have parameters to load.
pub fn train_stage(li: &LoadedInputs, memory: &Memory) -> Result<ScorerCheckpoint, CliError> {
    ensure_artifacts_dir(&li.cfg)?;
    let (params, trace) = if li.cfg.uses_wtcs() {
        (ScorerParams::identity(memory.dim, li.cfg.train.eta), Vec::new())
    } else {
        let train_set = li.train_split();
        let outcome = staged(
            "train-scorer",
            train_scorer(
                &train_set,
                memory,
                &li.cfg.train.to_core(li.cfg.seed),
                li.cfg.train.eta,
                &li.embedder,
                &li.cfg.llm,
                &li.template,
                &li.candidate_config(),
            ),
        )?;
        (outcome.params, outcome.trace)
    };
    let ckpt = ScorerCheckpoint {
        params,
        loss_mode: li.cfg.train.loss_mode,
        embedder_fingerprint: li.embedder.fingerprint(),
    };
    staged("train-scorer", ckpt.save(&li.cfg.scorer_path()))?;
    write_atomic(&li.cfg.loss_trace_path(), trace_to_csv(&trace).as_bytes())?;
    Ok(ckpt)
}

/// One extraction trace row: the chosen document and what the LM did with it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub id: String,
    pub chosen: DocumentCandidate,
    pub raw_completion: String,
    pub parsed: ExtractionOutput,
}

pub struct ExtractRun {
    pub rows: Vec<TraceRow>,
    pub gold: Vec<SentenceRecord>,
}

pub fn extract_stage(
    li: &LoadedInputs,
    memory: &Memory,
    params: &ScorerParams,
) -> Result<ExtractRun, CliError> {
    ensure_artifacts_dir(&li.cfg)?;
    let test = li.test_split();
    if test.is_empty() {
        return Err(CliError::Runtime("stage extract: test split is empty".into()));
    }
    let train = li.train_split();
    let cc = li.candidate_config();
    let mode = li.selection_mode();
    let labels = li.parse_labels();
    let mut rows = Vec::with_capacity(test.len());
    for x in &test {
        let docs = staged("extract", build_candidates(x, memory, &train, &li.embedder, &cc))?;
        let chosen = staged("extract", select_document(x, &docs, params, &li.embedder, mode))?;
        let prompt =
            staged("extract", chunkrag_core::assemble_prompt(&li.template, chosen, x))?;
        let raw = staged("extract", li.cfg.llm.generate(&prompt))?;
        let parsed = parse_output(&raw, li.cfg.task, &labels);
        rows.push(TraceRow {
            id: x.id.clone(),
            chosen: chosen.clone(),
            raw_completion: raw,
            parsed,
        });
    }
    let mut jsonl = String::new();
    for row in &rows {
        jsonl.push_str(&serde_json::to_string(row).expect("trace row serializes"));
        jsonl.push('\n');
    }
    write_atomic(&li.cfg.traces_path(), jsonl.as_bytes())?;
    Ok(ExtractRun { rows, gold: test })
}

pub fn evaluate_stage(li: &LoadedInputs, run: &ExtractRun) -> Result<MetricsReport, CliError> {
    let report = staged("evaluate", score_run(li.cfg.task, run))?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write_atomic(&li.cfg.report_json_path(), json.as_bytes())?;
    write_atomic(&li.cfg.report_text_path(), report.render_table().as_bytes())?;
    Ok(report)
}

/// Scores parsed outputs against gold; triple tasks also get per-element
/// projections, single-label tasks get the accuracy-style label row.
pub fn score_run(task: TaskKind, run: &ExtractRun) -> chunkrag_core::Result<MetricsReport> {
    match task {
        TaskKind::TripleExtraction => {
            let pred: Vec<TripleSet> =
                run.rows.iter().map(|r| r.parsed.triples.clone().unwrap_or_default()).collect();
            let gold: Vec<TripleSet> = run.gold.iter().map(gold_triples).collect();
            let rows = vec![
                ("triple", score_triples(&pred, &gold)?),
                ("head", score_elements(&pred, &gold, Element::Head)?),
                ("relation", score_elements(&pred, &gold, Element::Relation)?),
                ("tail", score_elements(&pred, &gold, Element::Tail)?),
            ];
            Ok(MetricsReport::new(rows))
        }
        _ => {
            let pred: Vec<String> = run
                .rows
                .iter()
                .map(|r| r.parsed.label.clone().unwrap_or_default())
                .collect();
            let gold: Vec<String> =
                run.gold.iter().map(|g| g.label.canonical_id.clone()).collect();
            Ok(MetricsReport::new(vec![("label", score_labels(&pred, &gold)?)]))
        }
    }
}

/// Gold triples for a record: the labeled relation over its entity pair.
fn gold_triples(g: &SentenceRecord) -> TripleSet {
    match (&g.head_entity, &g.tail_entity) {
        (Some(h), Some(t)) => {
            [chunkrag_core::Triple::normalized(h, &g.label.canonical_id, t)].into_iter().collect()
        }
        _ => TripleSet::default(),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub embedder_fingerprint: String,
    pub split_counts: BTreeMap<String, usize>,
    /// artifact file name → hex SHA-256 of its bytes.
    pub artifact_hashes: BTreeMap<String, String>,
}

pub fn write_manifest(li: &LoadedInputs) -> Result<Manifest, CliError> {
    let mut artifact_hashes = BTreeMap::new();
    for path in [
        li.cfg.memory_path(),
        li.cfg.scorer_path(),
        li.cfg.report_json_path(),
        li.cfg.report_text_path(),
        li.cfg.traces_path(),
        li.cfg.loss_trace_path(),
    ] {
        if path.exists() {
            let bytes = std::fs::read(&path)
                .map_err(|e| CliError::Runtime(format!("cannot hash {}: {e}", path.display())))?;
            let name = path.file_name().expect("artifact has a name").to_string_lossy().into_owned();
            artifact_hashes.insert(name, sha256_hex(&bytes));
        }
    }
    let manifest = Manifest {
        config_hash: li.cfg.content_hash(),
        seed: li.cfg.seed,
        embedder_fingerprint: li.embedder.fingerprint(),
        split_counts: li
            .ingested
            .counts
            .iter()
            .map(|(s, n)| (format!("{s:?}").to_lowercase(), *n))
            .collect(),
        artifact_hashes,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_atomic(&li.cfg.manifest_path(), json.as_bytes())?;
    Ok(manifest)
}

pub struct PipelineSummary {
    pub report: MetricsReport,
    pub manifest: Manifest,
    pub test_count: usize,
}

/// The full run: build → train → extract → evaluate → manifest.
pub fn run_pipeline(cfg: RunConfig) -> Result<PipelineSummary, CliError> {
    let li = load_inputs(cfg)?;
    let memory = build_memory_stage(&li)?;
    let ckpt = train_stage(&li, &memory)?;
    let run = extract_stage(&li, &memory, &ckpt.params)?;
    let report = evaluate_stage(&li, &run)?;
    let manifest = write_manifest(&li)?;
    Ok(PipelineSummary { report, manifest, test_count: run.rows.len() })
}

/// The primary headline number of a report: triple F1 for triple tasks, the
/// label F1 otherwise.
pub fn primary_f1(report: &MetricsReport) -> f64 {
    report
        .rows
        .iter()
        .find(|r| r.name == "triple" || r.name == "label")
        .map(|r| r.score.f1)
        .unwrap_or(0.0)
}
