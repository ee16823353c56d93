use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use r4_core::evaluator::{self, AliasTable, EvalSettings, GroundTruth};
use r4_core::pipeline::{open_store, to_jsonl};
use r4_core::simulate::{simulate, write_csv, ErrorModel};
use r4_core::{load_cases, Backend, BatchSummary, Config, MemoryStore, MockBackend, Pipeline};

/// Grounded report generation with routing, multi-pass drafting,
/// reflection and repair.
#[derive(Parser)]
#[command(name = "r4", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline over a JSONL file of cases.
    Run(RunArgs),
    /// Score pipeline outputs against box and/or report ground truth.
    Eval(EvalArgs),
    /// Inspect or manage the exemplar memory.
    Memory(MemoryArgs),
    /// Seeded best-of-k simulation under an issue error model; writes CSV.
    Simulate(SimulateArgs),
    /// Load a config and everything it references, then report problems.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    /// Cases as JSONL, one record per line.
    #[arg(long)]
    cases: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Replace the configured backend with this mock script.
    #[arg(long)]
    mock_script: Option<PathBuf>,
    /// Per-case output JSONL. The summary goes next to it as `.summary.json`.
    #[arg(long, default_value = "outputs.jsonl")]
    out: PathBuf,
    /// Memory store path, overriding the config.
    #[arg(long)]
    memory: Option<PathBuf>,
    /// Do not add exemplars to memory.
    #[arg(long)]
    no_curate: bool,
    /// Base seed, overriding `pipeline.base_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Cases processed concurrently per group, overriding `pipeline.jobs`.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    outputs: PathBuf,
    /// CSV with case_id,class_id,x_min,y_min,x_max,y_max.
    #[arg(long)]
    gt_boxes: Option<PathBuf>,
    /// JSONL with {case_id, report}.
    #[arg(long)]
    gt_reports: Option<PathBuf>,
    /// Also score reports with the configured judge backend.
    #[arg(long)]
    judge: bool,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct MemoryArgs {
    /// Read the store path from this config.
    #[arg(long, conflicts_with = "store", required_unless_present = "store")]
    config: Option<PathBuf>,
    /// Store file.
    #[arg(long)]
    store: Option<PathBuf>,
    #[command(subcommand)]
    action: MemoryAction,
}

#[derive(Subcommand)]
enum MemoryAction {
    /// One row per item: seq, task, specialization, cue, tags.
    List,
    /// Print one item as JSON.
    Show { id: u64 },
    /// Keep only the N most recent items.
    Prune {
        #[arg(long)]
        keep: usize,
    },
    /// Write a copy of the store to PATH.
    Export { path: PathBuf },
}

#[derive(clap::Args)]
struct SimulateArgs {
    /// JSON object of issue type to per-pass probability.
    #[arg(long)]
    error_model: PathBuf,
    #[arg(long, default_value_t = 3)]
    k_max: usize,
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Take scoring weights from this config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// `Err` is an input or configuration problem and exits with 2.
type Outcome = Result<ExitCode>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Memory(args) => cmd_memory(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::ValidateConfig { config } => cmd_validate(&config),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: &Path) -> Result<Config> {
    Config::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn cmd_run(args: RunArgs) -> Outcome {
    let mut config = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.pipeline.base_seed = seed;
    }
    if let Some(jobs) = args.jobs {
        if jobs == 0 {
            bail!("--jobs must be at least 1");
        }
        config.pipeline.jobs = jobs;
    }
    if args.no_curate {
        config.pipeline.curate = false;
    }
    let backend = match &args.mock_script {
        Some(p) => Some(Box::new(
            MockBackend::load(p).with_context(|| format!("loading mock script {}", p.display()))?,
        ) as Box<dyn Backend>),
        None => None,
    };
    let pipeline = Pipeline::from_config(&config, backend)?;
    let cases = load_cases(&args.cases).with_context(|| format!("loading cases {}", args.cases.display()))?;

    let memory_path = args.memory.clone().or_else(|| config.memory_path());
    let mut store = open_store(memory_path.as_deref(), config.memory.capacity)?;
    let (outputs, summary) = pipeline.run_batch(&cases, &mut store, |s| match &memory_path {
        Some(p) => s.persist(p),
        None => Ok(()),
    })?;

    write_file(&args.out, to_jsonl(&outputs).as_bytes())?;
    let summary_path = args.out.with_extension("summary.json");
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    write_file(&summary_path, json.as_bytes())?;
    print_summary(&summary);

    Ok(if summary.failed > 0 {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    })
}

fn print_summary(s: &BatchSummary) {
    println!("{:<14}{}", "cases", s.total);
    println!("{:<14}{}", "succeeded", s.succeeded);
    println!("{:<14}{}", "failed", s.failed);
    println!(
        "{:<14}total {}, max {}, mean {:.2}",
        "repairs",
        s.repairs_total,
        s.repairs_max,
        s.mean_repairs()
    );
    println!("{:<14}{}", "stopped early", s.stopped_early);
    println!("{:<14}{}", "curated", s.curated);
    println!("{:<14}{}", "store size", s.store_size);
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn cmd_eval(args: EvalArgs) -> Outcome {
    let config = match &args.config {
        Some(p) => load_config(p)?,
        None => Config::default(),
    };
    let outputs = evaluator::load_outputs(&args.outputs)?;
    let boxes = args
        .gt_boxes
        .as_deref()
        .map(GroundTruth::load)
        .transpose()?;
    let references = args
        .gt_reports
        .as_deref()
        .map(evaluator::load_references)
        .transpose()?;
    let judge = if args.judge {
        let cfg = config
            .judge
            .as_ref()
            .ok_or_else(|| anyhow!("--judge given but the config has no [judge] backend"))?;
        Some(cfg.build(&config.base_dir)?)
    } else {
        None
    };
    let aliases = match &config.evaluation.aliases {
        Some(p) => AliasTable::load(&config.path(p))?,
        None => AliasTable::default(),
    };
    let settings = EvalSettings {
        iou_threshold: config.evaluation.iou_threshold,
        fp_threshold: config.evaluation.fp_threshold,
        aliases,
        judge_seed: config.pipeline.base_seed,
    };
    let report = evaluator::evaluate(
        &outputs,
        boxes.as_ref(),
        references.as_ref(),
        judge.as_deref(),
        &settings,
    )?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    match &args.out {
        Some(p) => write_file(p, json.as_bytes())?,
        None => io::stdout().write_all(json.as_bytes())?,
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_memory(args: MemoryArgs) -> Outcome {
    let path = match (&args.store, &args.config) {
        (Some(p), _) => p.clone(),
        (None, Some(c)) => load_config(c)?
            .memory_path()
            .ok_or_else(|| anyhow!("config has no memory.path"))?,
        (None, None) => unreachable!("clap requires one of --store/--config"),
    };
    if !path.exists() {
        bail!("memory store {} does not exist", path.display());
    }
    let mut store = MemoryStore::load(&path)?;
    let mut out = io::stdout().lock();
    match args.action {
        MemoryAction::List => {
            writeln!(out, "seq\ttask\tspecialization\tcue\ttags")?;
            for item in store.items() {
                let tags: Vec<&str> = item.tags.iter().map(String::as_str).collect();
                writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}",
                    item.created_seq,
                    item.task,
                    item.specialization,
                    item.cue,
                    tags.join(",")
                )?;
            }
        }
        MemoryAction::Show { id } => {
            let item = store
                .get(id)
                .ok_or_else(|| anyhow!("no memory item with seq {id}"))?;
            writeln!(out, "{}", serde_json::to_string_pretty(item)?)?;
        }
        MemoryAction::Prune { keep } => {
            let before = store.len();
            store.prune_keep(keep);
            store.persist(&path)?;
            writeln!(out, "pruned {} of {} items", before - store.len(), before)?;
        }
        MemoryAction::Export { path: target } => {
            store.persist(&target)?;
            writeln!(out, "exported {} items to {}", store.len(), target.display())?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_simulate(args: SimulateArgs) -> Outcome {
    let model = ErrorModel::load(&args.error_model)?;
    let weights = match &args.config {
        Some(p) => load_config(p)?.scoring.weights,
        None => Default::default(),
    };
    let rows = simulate(&model, &weights, args.k_max, args.trials, args.seed)?;
    let mut buf = Vec::new();
    write_csv(&rows, &mut buf)?;
    match &args.out {
        Some(p) => write_file(p, &buf)?,
        None => io::stdout().write_all(&buf)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_validate(path: &Path) -> Outcome {
    let config = load_config(path)?;
    Pipeline::from_config(&config, None)?;
    if let Some(judge) = &config.judge {
        judge.build(&config.base_dir).context("judge backend")?;
    }
    if let Some(p) = &config.evaluation.aliases {
        AliasTable::load(&config.path(p))?;
    }
    println!("config ok: {}", path.display());
    Ok(ExitCode::SUCCESS)
}
