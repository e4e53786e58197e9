use std::path::PathBuf;
use std::process::ExitCode;

use chunkrag_cli::config::ConfigArgs;
use chunkrag_cli::pipeline::{
    build_memory_stage, extract_stage, load_inputs, run_pipeline, train_stage,
};
use chunkrag_cli::synthetic::SyntheticSpec;
use chunkrag_cli::CliError;
use chunkrag_core::{Memory, ScorerCheckpoint};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "chunkrag",
    version,
    about = "Chunk-level retrieval-augmented structured extraction"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the key-value memory from the configured split and save it.
    BuildMemory(ConfigArgs),
    /// Train the chunk scorer against LM likelihoods and save the checkpoint.
    TrainScorer(ConfigArgs),
    /// Run retrieval + generation over the test split, writing traces only.
    Extract(ConfigArgs),
    /// Full pipeline: build, train, extract, score, manifest.
    Evaluate(ConfigArgs),
    /// Nearest-neighbor prompting baseline over a list of n values.
    BaselineKnn {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated retrieval widths; 0 means no retrieval.
        #[arg(long, value_delimiter = ',', default_value = "0,1,5,10,15,20")]
        n_values: Vec<usize>,
    },
    /// Full pipeline at each chunk length.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "3,4,5")]
        chunk_lens: Vec<usize>,
    },
    /// Serve /retrieve and /extract over built artifacts.
    Serve {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Port to bind on 127.0.0.1; 0 picks a free port.
        #[arg(long, default_value_t = 0)]
        port: u16,
    },
    /// Generate the planted-marker synthetic corpus and a ready-to-run config.
    MakeSynthetic {
        #[command(flatten)]
        spec: SyntheticSpec,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    // Die quietly when the reader closes the pipe, like any line tool.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Config(_)) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
        Err(e @ CliError::Runtime(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

/// Loads the memory artifact when present (fingerprint-checked), otherwise
/// builds and saves it.
fn load_or_build_memory(
    li: &chunkrag_cli::pipeline::LoadedInputs,
) -> Result<Memory, CliError> {
    let path = li.cfg.memory_path();
    if path.exists() {
        let memory = Memory::load(&path)
            .map_err(|e| CliError::Runtime(format!("stage build-memory: {e}")))?;
        memory
            .verify_fingerprint(&li.embedder)
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(memory)
    } else {
        build_memory_stage(li)
    }
}

fn load_or_train_scorer(
    li: &chunkrag_cli::pipeline::LoadedInputs,
    memory: &Memory,
) -> Result<ScorerCheckpoint, CliError> {
    let path = li.cfg.scorer_path();
    if path.exists() {
        let ckpt = ScorerCheckpoint::load(&path)
            .map_err(|e| CliError::Runtime(format!("stage train-scorer: {e}")))?;
        if ckpt.embedder_fingerprint != li.embedder.fingerprint() {
            return Err(CliError::Config(
                "scorer checkpoint was trained under a different embedder".into(),
            ));
        }
        Ok(ckpt)
    } else {
        train_stage(li, memory)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::BuildMemory(args) => {
            let li = load_inputs(args.resolve()?)?;
            println!("ingested {}", li.ingested.count_line());
            let memory = build_memory_stage(&li)?;
            println!(
                "memory: {} entries from the {:?} split -> {}",
                memory.entries.len(),
                li.cfg.memory_split,
                li.cfg.memory_path().display()
            );
            Ok(())
        }
        Cmd::TrainScorer(args) => {
            let li = load_inputs(args.resolve()?)?;
            println!("ingested {}", li.ingested.count_line());
            let memory = load_or_build_memory(&li)?;
            let ckpt = train_stage(&li, &memory)?;
            println!(
                "scorer: dim {} eta {} -> {}",
                ckpt.params.dim,
                ckpt.params.eta,
                li.cfg.scorer_path().display()
            );
            println!("loss trace -> {}", li.cfg.loss_trace_path().display());
            Ok(())
        }
        Cmd::Extract(args) => {
            let li = load_inputs(args.resolve()?)?;
            println!("ingested {}", li.ingested.count_line());
            let memory = load_or_build_memory(&li)?;
            let ckpt = load_or_train_scorer(&li, &memory)?;
            let run = extract_stage(&li, &memory, &ckpt.params)?;
            println!(
                "extracted {} sentences -> {}",
                run.rows.len(),
                li.cfg.traces_path().display()
            );
            Ok(())
        }
        Cmd::Evaluate(args) => {
            let cfg = args.resolve()?;
            let summary = run_pipeline(cfg.clone())?;
            println!("evaluated {} test sentences", summary.test_count);
            print!("{}", summary.report.render_table());
            println!("report -> {}", cfg.report_json_path().display());
            println!("manifest -> {}", cfg.manifest_path().display());
            Ok(())
        }
        Cmd::BaselineKnn { cfg, n_values } => {
            let li = load_inputs(cfg.resolve()?)?;
            println!("ingested {}", li.ingested.count_line());
            let report = chunkrag_cli::baseline::run_baseline(&li, &n_values)?;
            std::fs::create_dir_all(&li.cfg.artifacts_dir).map_err(|e| {
                CliError::Runtime(format!("cannot create artifacts directory: {e}"))
            })?;
            let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
            let path = li.cfg.artifacts_dir.join("baseline.json");
            std::fs::write(&path, json)
                .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
            print!("{}", report.render_table());
            println!("baseline report -> {}", path.display());
            Ok(())
        }
        Cmd::Sweep { cfg, chunk_lens } => {
            let base = cfg.resolve()?;
            let report = chunkrag_cli::sweep::run_sweep(&base, &chunk_lens)?;
            std::fs::create_dir_all(&base.artifacts_dir).map_err(|e| {
                CliError::Runtime(format!("cannot create artifacts directory: {e}"))
            })?;
            let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
            let path = base.artifacts_dir.join("sweep.json");
            std::fs::write(&path, json)
                .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
            print!("{}", report.render_table());
            println!("sweep report -> {}", path.display());
            Ok(())
        }
        Cmd::Serve { cfg, port } => chunkrag_cli::serve::run(cfg.resolve()?, port),
        Cmd::MakeSynthetic { spec, out } => {
            let written = chunkrag_cli::synthetic::write_corpus(&out, &spec)?;
            for path in [
                &written.dataset,
                &written.labels,
                &written.rules,
                &written.template,
                &written.config,
                &written.markers,
            ] {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
    }
}
