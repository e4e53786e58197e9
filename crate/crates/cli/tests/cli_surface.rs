//! Binary-level tests: exit codes, stderr diagnostics, subcommand outputs,
//! the frozen nearest-neighbor baseline table, and the chunk-length sweep.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_chunkrag"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("process not killed by signal")
}

fn toy_fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy").join(name)
}

/// The full planted-marker corpus evaluated end to end plus the default
/// baseline sweep, generated and run once through the binary.
struct FullRun {
    dir: TempDir,
    evaluate_stdout: String,
    baseline_stdout: String,
}

impl FullRun {
    fn config(&self) -> String {
        self.dir.path().join("config.json").to_string_lossy().into_owned()
    }
    fn artifact(&self, name: &str) -> PathBuf {
        self.dir.path().join("artifacts").join(name)
    }
}

fn full_run() -> &'static FullRun {
    static RUN: OnceLock<FullRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = TempDir::new().expect("tempdir");
        let out_flag = dir.path().to_string_lossy().into_owned();
        let gen = run(&["make-synthetic", "--out", &out_flag]);
        assert_eq!(code(&gen), 0, "make-synthetic failed: {}", stderr_of(&gen));
        let wrote_lines =
            stdout_of(&gen).lines().filter(|l| l.starts_with("wrote ")).count();
        assert_eq!(wrote_lines, 6, "make-synthetic announces each file it writes");
        for name in
            ["dataset.jsonl", "labels.json", "rules.json", "template.txt", "config.json", "markers.json"]
        {
            assert!(dir.path().join(name).exists(), "missing generated file {name}");
        }

        let cfg = dir.path().join("config.json").to_string_lossy().into_owned();
        let eval = run(&["evaluate", "--config", &cfg]);
        assert_eq!(code(&eval), 0, "evaluate failed: {}", stderr_of(&eval));

        let base = run(&["baseline-knn", "--config", &cfg]);
        assert_eq!(code(&base), 0, "baseline-knn failed: {}", stderr_of(&base));

        FullRun {
            dir,
            evaluate_stdout: stdout_of(&eval),
            baseline_stdout: stdout_of(&base),
        }
    })
}

/// A small two-label corpus for cheap per-subcommand checks.
fn make_small_corpus(dir: &Path) -> String {
    let out_flag = dir.to_string_lossy().into_owned();
    let gen = run(&[
        "make-synthetic",
        "--labels",
        "2",
        "--train-per-label",
        "3",
        "--dev-per-label",
        "1",
        "--test-per-label",
        "2",
        "--embed-dim",
        "64",
        "--out",
        &out_flag,
    ]);
    assert_eq!(code(&gen), 0, "small make-synthetic failed: {}", stderr_of(&gen));
    dir.join("config.json").to_string_lossy().into_owned()
}

/// Rewrites one generated config with a different LM context limit and its
/// own artifacts directory, returning the new config path.
fn with_context_limit(config: &str, limit: u64, artifacts: &Path) -> String {
    let raw = std::fs::read_to_string(config).expect("config readable");
    let mut v: serde_json::Value = serde_json::from_str(&raw).expect("config parses");
    v["llm"]["context_limit"] = serde_json::json!(limit);
    v["artifacts_dir"] = serde_json::json!(artifacts.to_string_lossy());
    let path = artifacts.join("config.json");
    std::fs::create_dir_all(artifacts).expect("artifacts dir");
    std::fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).expect("config written");
    path.to_string_lossy().into_owned()
}

#[test]
fn help_and_version_exit_zero() {
    let help = run(&["--help"]);
    assert_eq!(code(&help), 0);
    let text = stdout_of(&help);
    for sub in ["build-memory", "train-scorer", "extract", "evaluate", "baseline-knn", "sweep", "serve", "make-synthetic"]
    {
        assert!(text.contains(sub), "--help must list the {sub} subcommand");
    }
    let version = run(&["--version"]);
    assert_eq!(code(&version), 0);
    assert!(stdout_of(&version).contains("chunkrag"));
}

#[test]
fn usage_and_config_errors_exit_one() {
    // No subcommand at all.
    let bare = run(&[]);
    assert_eq!(code(&bare), 1);

    // Unknown flag.
    let unknown = run(&["evaluate", "--no-such-flag"]);
    assert_eq!(code(&unknown), 1);

    // Unparseable enum value.
    let dataset = toy_fixture("dataset.jsonl").to_string_lossy().into_owned();
    let bad_task = run(&["build-memory", "--task", "bogus", "--dataset", &dataset]);
    assert_eq!(code(&bad_task), 1);
    assert!(stderr_of(&bad_task).contains("configuration error"));

    // Config file that does not exist.
    let missing_cfg = run(&["evaluate", "--config", "/no/such/config.json"]);
    assert_eq!(code(&missing_cfg), 1);
    assert!(stderr_of(&missing_cfg).contains("configuration error"));

    // Valid flags pointing at a dataset that does not exist: caught by
    // validation before any stage runs.
    let missing_data = run(&[
        "build-memory",
        "--task",
        "triple-extraction",
        "--dataset",
        "/no/such/data.jsonl",
    ]);
    assert_eq!(code(&missing_data), 1);
    let err = stderr_of(&missing_data);
    assert!(
        err.contains("configuration error") && err.contains("/no/such/data.jsonl"),
        "stderr must name the missing path: {err}"
    );
}

#[test]
fn ingest_failures_exit_two_and_name_the_line() {
    let dir = TempDir::new().unwrap();
    let toy = std::fs::read_to_string(toy_fixture("dataset.jsonl")).unwrap();
    let lines: Vec<&str> = toy.lines().collect();
    let artifacts = dir.path().join("artifacts").to_string_lossy().into_owned();

    // Line 3 is not JSON.
    let bad_json = dir.path().join("bad_json.jsonl");
    std::fs::write(&bad_json, format!("{}\n{}\n{{not json\n", lines[0], lines[1])).unwrap();
    let out = run(&[
        "build-memory",
        "--task",
        "triple-extraction",
        "--dataset",
        &bad_json.to_string_lossy(),
        "--artifacts-dir",
        &artifacts,
    ]);
    assert_eq!(code(&out), 2, "data errors are runtime failures");
    let err = stderr_of(&out);
    assert!(
        err.contains("stage ingest") && err.contains("line 3"),
        "diagnostic must carry the stage and the line number: {err}"
    );

    // Line 2 drops the required text field.
    let mut v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    v.as_object_mut().unwrap().remove("text");
    v["id"] = serde_json::json!("no-text-record");
    let no_text = dir.path().join("no_text.jsonl");
    std::fs::write(&no_text, format!("{}\n{}\n", lines[0], v)).unwrap();
    let out = run(&[
        "build-memory",
        "--task",
        "triple-extraction",
        "--dataset",
        &no_text.to_string_lossy(),
        "--artifacts-dir",
        &artifacts,
    ]);
    assert_eq!(code(&out), 2);
    let err = stderr_of(&out);
    assert!(
        err.contains("line 2") && err.contains("text"),
        "diagnostic must name the line and the missing field: {err}"
    );

    // A dataset with zero records.
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let out = run(&[
        "build-memory",
        "--task",
        "triple-extraction",
        "--dataset",
        &empty.to_string_lossy(),
        "--artifacts-dir",
        &artifacts,
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr_of(&out).contains("zero valid records"));
}

#[test]
fn evaluate_full_corpus_reports_perfect_label_row() {
    let full = full_run();
    assert!(
        full.evaluate_stdout.contains("evaluated 20 test sentences"),
        "unexpected evaluate output: {}",
        full.evaluate_stdout
    );
    assert!(
        full.evaluate_stdout.contains("report ->") && full.evaluate_stdout.contains("manifest ->"),
        "evaluate must announce its artifact paths"
    );
    for name in ["memory.bin", "scorer.bin", "loss_trace.csv", "traces.jsonl", "report.json", "report.txt", "manifest.json"]
    {
        assert!(full.artifact(name).exists(), "evaluate must write {name}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(full.artifact("report.json")).unwrap())
            .unwrap();
    let label_row = report["rows"]
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["name"] == "label")
        .expect("label row present");
    // Frozen: the trained pipeline classifies the held-out split perfectly.
    assert_eq!(label_row["score"]["f1"].as_f64().unwrap(), 1.0);
    assert!(full.evaluate_stdout.contains("1.0000"), "table must show the label row");
}

#[test]
fn baseline_table_matches_frozen_measurements() {
    let full = full_run();
    // Frozen n-versus-F1 table for the default widths on the default corpus.
    for line in
        ["n       f1", "0       0.0000", "1       0.6000", "5       1.0000", "10      0.8500", "15      0.3500", "20      0.2000"]
    {
        assert!(
            full.baseline_stdout.contains(line),
            "baseline table missing {line:?}:\n{}",
            full.baseline_stdout
        );
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(full.artifact("baseline.json")).unwrap())
            .unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[0]["n"], 0);
    assert_eq!(rows[0]["status"], "scored");
    assert_eq!(rows[0]["f1"].as_f64().unwrap(), 0.0);
    assert_eq!(rows[1]["n"], 1);
    assert_eq!(rows[1]["f1"].as_f64().unwrap(), 0.6);
}

#[test]
fn trained_pipeline_beats_knn_top_one_by_frozen_margin() {
    let full = full_run();
    let pipeline: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(full.artifact("report.json")).unwrap())
            .unwrap();
    let pipeline_f1 = pipeline["rows"]
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["name"] == "label")
        .unwrap()["score"]["f1"]
        .as_f64()
        .unwrap();
    let baseline: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(full.artifact("baseline.json")).unwrap())
            .unwrap();
    let knn_top1 = baseline["rows"]
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["n"] == 1)
        .expect("n=1 row present")["f1"]
        .as_f64()
        .unwrap();
    // Frozen margin: 1.00 for the trained single-document pipeline against
    // 0.60 for nearest-neighbor prompting at n = 1.
    assert!(
        pipeline_f1 - knn_top1 >= 0.40 - 1e-9,
        "margin regressed: pipeline {pipeline_f1} vs knn top-1 {knn_top1}"
    );
    println!(
        "baseline margin: pipeline {pipeline_f1:.4} vs knn top-1 {knn_top1:.4}"
    );
}

#[test]
fn baseline_overflow_rows_are_tagged_and_sweep_continues() {
    let full = full_run();
    let artifacts = full.dir.path().join("overflow_artifacts");
    let cfg = with_context_limit(&full.config(), 300, &artifacts);
    let out = run(&["baseline-knn", "--config", &cfg, "--n-values", "0,1,20"]);
    assert_eq!(code(&out), 0, "tagged overflow rows are not a process failure");
    assert!(stdout_of(&out).contains("context overflow"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(artifacts.join("baseline.json")).unwrap())
            .unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3, "every requested n gets a row");
    assert_eq!(rows[0]["status"], "scored", "n=0 fits the shrunken context");
    assert_eq!(rows[1]["status"], "scored", "n=1 fits the shrunken context");
    assert_eq!(rows[2]["status"], "context-overflow");
    let estimated = rows[2]["estimated"].as_u64().unwrap();
    let limit = rows[2]["limit"].as_u64().unwrap();
    assert!(estimated > limit, "tag must carry the failing estimate");
    assert_eq!(limit, 300);
}

#[test]
fn stage_subcommands_write_their_artifacts() {
    let dir = TempDir::new().unwrap();
    let cfg = make_small_corpus(dir.path());
    let artifacts = dir.path().join("artifacts");

    let out = run(&["build-memory", "--config", &cfg]);
    assert_eq!(code(&out), 0, "build-memory failed: {}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("ingested") && text.contains("memory:"), "got: {text}");
    assert!(artifacts.join("memory.bin").exists());

    let out = run(&["train-scorer", "--config", &cfg, "--epochs", "5"]);
    assert_eq!(code(&out), 0, "train-scorer failed: {}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("scorer: dim 64 eta 0.1"), "got: {text}");
    assert!(artifacts.join("scorer.bin").exists());
    assert!(artifacts.join("loss_trace.csv").exists());

    let out = run(&["extract", "--config", &cfg]);
    assert_eq!(code(&out), 0, "extract failed: {}", stderr_of(&out));
    assert!(stdout_of(&out).contains("extracted 4 sentences"));
    assert!(artifacts.join("traces.jsonl").exists());

    // No stray partial files once every stage has finished.
    let partials: Vec<_> = std::fs::read_dir(&artifacts)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "partial"))
        .collect();
    assert!(partials.is_empty(), "leftover partial artifacts: {partials:?}");
}

#[test]
fn sweep_scores_every_cell_or_tags_it() {
    let dir = TempDir::new().unwrap();
    let cfg = make_small_corpus(dir.path());

    let out = run(&["sweep", "--config", &cfg, "--epochs", "5", "--chunk-lens", "3,5"]);
    assert_eq!(code(&out), 0, "sweep failed: {}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("m       f1"), "got: {text}");
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("artifacts/sweep.json")).unwrap(),
    )
    .unwrap();
    let cells = report["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 2);
    for (cell, m) in cells.iter().zip([3u64, 5]) {
        assert_eq!(cell["chunk_len"].as_u64().unwrap(), m);
        assert_eq!(cell["status"], "scored");
        assert!(cell["f1"].is_number());
        assert!(
            dir.path().join(format!("artifacts/m{m}/report.json")).exists(),
            "each cell runs into its own artifact directory"
        );
    }

    // A runtime failure inside one cell tags that cell instead of aborting.
    let broken_artifacts = dir.path().join("broken");
    let broken = with_context_limit(&cfg, 10, &broken_artifacts);
    let out = run(&["sweep", "--config", &broken, "--epochs", "5", "--chunk-lens", "4"]);
    assert_eq!(code(&out), 0, "tagged cells are not a process failure");
    assert!(stdout_of(&out).contains("error:"));
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(broken_artifacts.join("sweep.json")).unwrap(),
    )
    .unwrap();
    let cells = report["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 1);
    assert_eq!(cells[0]["status"], "error");
    // With a 10-token budget every scoring prompt overflows, overflowed
    // documents score zero, and the all-zero supervision aborts training.
    // The cell keeps the stage-tagged diagnostic instead of vanishing.
    assert!(
        cells[0]["message"].as_str().unwrap().contains("stage train-scorer"),
        "cell message names the failing stage: {}",
        cells[0]["message"]
    );
}
