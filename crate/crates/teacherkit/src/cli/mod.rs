//! Command-line front end.
//!
//! One binary, one subcommand per pipeline stage, plus `pipeline` to run
//! them all from a config file and `stub-serve` for a deterministic local
//! generation server. Exit codes: 0 success, 1 runtime failure, 2 bad
//! configuration or arguments.

mod config;
mod io;
mod pipeline;

pub use config::{IngestFormat, PipelineConfig};
pub use io::{read_augmented, write_augmented, AugmentedRecord, WireExplanation};
pub use pipeline::{run_pipeline, RunManifest, StageEntry};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::compose::CompositionVariant;
use crate::core::TokenizerKind;
use crate::curate::{curate, CurationConfig, SplitRatios};
use crate::eval::{aggregate, CandidateForm, ItemRecord, TaskResult};
use crate::ingest::{adapter_mmlu, load_jsonl};
use crate::pack::OverlongPolicy;
use crate::report::{dataset_stats, render_results, render_stats, ReportFormat};
use crate::teacher::{parse_kinds, HttpBackend, StarConfig, StubBehavior, StubServer};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config file, or validation failure. Exit 2.
    Config(String),
    /// The work itself failed: IO, data, backend. Exit 1.
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) | CliError::Runtime(msg) => f.write_str(msg),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Parser)]
#[command(name = "teacherkit", version, about = "Explanation-augmented training data pipeline")]
struct Cli {
    /// error, warn, info, debug, or trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize a raw corpus into samples.jsonl.
    Ingest(IngestArgs),
    /// Filter, cap, and split a corpus.
    Curate(CurateArgs),
    /// Generate teacher explanations for each sample.
    Augment(AugmentArgs),
    /// Splice explanations into training texts.
    Compose(ComposeArgs),
    /// Pack texts into fixed-length token sequences.
    Pack(PackArgs),
    /// Rank-classification accuracy against an endpoint.
    Eval(EvalArgs),
    /// Render corpus statistics or evaluation results.
    Report(ReportArgs),
    /// Run every stage from a config file.
    Pipeline(PipelineArgs),
    /// Serve the deterministic generation stub over HTTP.
    StubServe(StubServeArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// samples.jsonl file, or a CSV directory with --format mmlu-csv.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "jsonl")]
    format: IngestFormat,
    /// Reject lines with unknown keys instead of stripping them.
    #[arg(long)]
    strict: bool,
    /// Normalized samples.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Also write the rendered prompt/answer view of each sample.
    #[arg(long)]
    rendered: Option<PathBuf>,
}

#[derive(Args)]
struct CurateArgs {
    #[arg(long)]
    input: PathBuf,
    /// Per-task sample cap.
    #[arg(long, default_value_t = 3000)]
    cap: usize,
    /// Keep only samples rendering to fewer than this many tokens.
    #[arg(long, default_value_t = 1200)]
    max_tokens: usize,
    #[arg(long, default_value = "whitespace")]
    tokenizer: TokenizerKind,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// train:validation:test integer ratio, e.g. 8:1:1.
    #[arg(long)]
    split: Option<SplitRatios>,
    /// Per-task curation metrics (default: curation_report.json next to --out).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    input: PathBuf,
    /// Generation endpoint; TEACHERKIT_ENDPOINT is the fallback.
    #[arg(long)]
    endpoint: Option<String>,
    /// Comma list of cot, fundamental, mistakes.
    #[arg(long, default_value = "cot,fundamental,mistakes")]
    kinds: String,
    #[arg(long, default_value_t = 8)]
    concurrency: usize,
    /// Verify CoT conclusions and rationalize failures with a hint.
    #[arg(long)]
    star: bool,
    #[arg(long, default_value_t = 2)]
    max_attempts: u32,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 512)]
    max_new_tokens: u32,
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[arg(long)]
    out: PathBuf,
    /// Failed (sample, kind) pairs (default: augment_ledger.jsonl next to --out).
    #[arg(long)]
    ledger: Option<PathBuf>,
}

#[derive(Args)]
struct ComposeArgs {
    /// augmented.jsonl from the augment stage.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    variant: CompositionVariant,
    /// Per-sample field order seed, used only by SHUFFLE.
    #[arg(long, default_value_t = 7)]
    shuffle_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PackArgs {
    /// composed.jsonl from the compose stage.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 2048)]
    max_len: usize,
    /// byte round-trips any text; whitespace collapses runs of spaces.
    #[arg(long, default_value = "byte")]
    tokenizer: TokenizerKind,
    /// Pad the final pack to max_len with loss-excluded terminators.
    #[arg(long)]
    pad_final: bool,
    #[arg(long, default_value = "error")]
    on_overlong: OverlongPolicy,
    /// Opaque labels copied into the manifest.
    #[arg(long = "training-hint")]
    training_hints: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// samples.jsonl, or an MMLU-style CSV directory.
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long)]
    endpoint: Option<String>,
    /// Prefix each prompt with the task-subject framing sentence.
    #[arg(long)]
    subject_prefix: bool,
    #[arg(long, default_value = "sentence")]
    candidate_form: CandidateForm,
    /// results.csv: per-task accuracy plus the macro average.
    #[arg(long)]
    out: PathBuf,
    /// Per-item choices and scores as JSONL.
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// augmented.jsonl to summarize into corpus statistics.
    #[arg(long, conflicts_with = "results")]
    stats: Option<PathBuf>,
    /// results.csv to re-render.
    #[arg(long)]
    results: Option<PathBuf>,
    /// Tokenizer for token averages (stats mode).
    #[arg(long, default_value = "whitespace")]
    tokenizer: TokenizerKind,
    #[arg(long, default_value = "md")]
    format: ReportFormat,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Pipeline TOML config.
    #[arg(long)]
    config: PathBuf,
    /// Override pipeline.endpoint.
    #[arg(long)]
    endpoint: Option<String>,
    /// Override pipeline.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override pipeline.out_dir.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override pipeline.input.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Override augment.concurrency.
    #[arg(long)]
    concurrency: Option<usize>,
}

#[derive(Args)]
struct StubServeArgs {
    /// 0 picks a free port.
    #[arg(long, default_value_t = 7311)]
    port: u16,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON file of scripted responses, failure rules, and logprob boosts.
    #[arg(long)]
    behavior: Option<PathBuf>,
}

/// Parses argv and runs. Returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    init_logging(&cli.log_level);
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn init_logging(level: &str) {
    let mut builder = env_logger::Builder::new();
    builder.parse_filters(level);
    builder.target(env_logger::Target::Stderr);
    let _ = builder.try_init();
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Ingest(args) => cmd_ingest(args),
        Command::Curate(args) => cmd_curate(args),
        Command::Augment(args) => cmd_augment(args),
        Command::Compose(args) => cmd_compose(args),
        Command::Pack(args) => cmd_pack(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Report(args) => cmd_report(args),
        Command::Pipeline(args) => cmd_pipeline(args),
        Command::StubServe(args) => cmd_stub_serve(args),
    }
}

fn read_samples(path: &Path) -> Result<Vec<crate::core::Sample>, CliError> {
    let outcome = load_jsonl(path, true).map_err(runtime)?;
    if let Some(first) = outcome.rejects.first() {
        return Err(CliError::Runtime(format!(
            "{}: {} bad line(s); first: {first}",
            path.display(),
            outcome.rejects.len()
        )));
    }
    Ok(outcome.samples)
}

fn sibling(out: &std::path::Path, name: &str) -> PathBuf {
    out.parent().map(|p| p.join(name)).unwrap_or_else(|| PathBuf::from(name))
}

fn cmd_ingest(args: IngestArgs) -> Result<(), CliError> {
    let samples = match args.format {
        IngestFormat::Jsonl => {
            let outcome = load_jsonl(&args.input, args.strict).map_err(runtime)?;
            for reject in &outcome.rejects {
                log::warn!("rejected: {reject}");
            }
            if args.strict && !outcome.rejects.is_empty() {
                return Err(CliError::Runtime(format!(
                    "{} line(s) rejected in strict mode",
                    outcome.rejects.len()
                )));
            }
            outcome.samples
        }
        IngestFormat::MmluCsv => adapter_mmlu(&args.input).map_err(runtime)?,
    };
    io::write_jsonl(&args.out, &samples).map_err(runtime)?;
    log::info!("wrote {} samples to {}", samples.len(), args.out.display());

    if let Some(rendered_path) = args.rendered {
        let rendered: Vec<crate::ingest::RenderedSample> = samples
            .iter()
            .map(|s| crate::ingest::render(s).map_err(runtime))
            .collect::<Result<_, _>>()?;
        io::write_jsonl(&rendered_path, &rendered).map_err(runtime)?;
    }
    Ok(())
}

fn cmd_curate(args: CurateArgs) -> Result<(), CliError> {
    let cfg = CurationConfig {
        max_tokens: args.max_tokens,
        per_task_cap: args.cap,
        seed: args.seed,
        tokenizer: args.tokenizer,
    };
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let samples = read_samples(&args.input)?;
    let (curated, report) = curate(samples, &cfg, args.split.as_ref()).map_err(runtime)?;
    io::write_jsonl(&args.out, &curated).map_err(runtime)?;
    let report_path = args.report.unwrap_or_else(|| sibling(&args.out, "curation_report.json"));
    io::write_json_pretty(&report_path, &report).map_err(runtime)?;
    log::info!("kept {} samples", curated.len());
    Ok(())
}

fn cmd_augment(args: AugmentArgs) -> Result<(), CliError> {
    let kinds = parse_kinds(&args.kinds).map_err(CliError::Config)?;
    if args.concurrency == 0 {
        return Err(CliError::Config("--concurrency must be >= 1".into()));
    }
    let endpoint = pipeline::resolve_endpoint(args.endpoint.as_deref())?;
    let backend = HttpBackend::new(&endpoint);
    let samples = read_samples(&args.input)?;
    let params = crate::core::GenParams {
        max_new_tokens: args.max_new_tokens,
        temperature: args.temperature,
        seed: Some(args.seed),
        ..Default::default()
    };
    let star = StarConfig {
        enabled: args.star,
        max_attempts: args.max_attempts,
        ..StarConfig::default()
    };
    let (augs, ledger) =
        crate::teacher::augment_corpus(samples, &kinds, &backend, &params, args.concurrency, &star)
            .map_err(runtime)?;
    io::write_augmented(&args.out, &augs).map_err(runtime)?;
    let ledger_path = args.ledger.unwrap_or_else(|| sibling(&args.out, "augment_ledger.jsonl"));
    io::write_jsonl(&ledger_path, &ledger).map_err(runtime)?;
    log::info!("augmented {} samples ({} failures)", augs.len(), ledger.len());
    Ok(())
}

fn cmd_compose(args: ComposeArgs) -> Result<(), CliError> {
    let augs = io::read_augmented(&args.input).map_err(runtime)?;
    let (records, skips) = crate::compose::build_variant_corpus(&augs, args.variant, args.shuffle_seed);
    io::write_jsonl(&args.out, &records).map_err(runtime)?;
    if !skips.is_empty() {
        let skips_path = sibling(&args.out, "compose_skips.jsonl");
        io::write_jsonl(&skips_path, &skips).map_err(runtime)?;
        log::warn!("{} sample(s) skipped; see {}", skips.len(), skips_path.display());
    }
    log::info!("composed {} records as {}", records.len(), args.variant.name());
    Ok(())
}

fn cmd_pack(args: PackArgs) -> Result<(), CliError> {
    let cfg = crate::pack::PackConfig {
        max_len: args.max_len,
        tokenizer: args.tokenizer,
        pad_final: args.pad_final,
        on_overlong: args.on_overlong,
    };
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let records: Vec<crate::compose::ComposedRecord> = io::read_jsonl(&args.input).map_err(runtime)?;
    let texts: Vec<(String, String)> = records.into_iter().map(|r| (r.id, r.text)).collect();
    let tokenizer = cfg.tokenizer.create();
    let (packs, skips) = crate::pack::pack(&texts, &cfg, tokenizer.as_ref()).map_err(runtime)?;
    let manifest = crate::pack::manifest(&packs, &skips, &cfg, args.training_hints);
    io::write_jsonl(&args.out, &packs).map_err(runtime)?;
    io::write_json_pretty(&args.manifest, &manifest).map_err(runtime)?;
    log::info!(
        "{} packs from {} texts, utilization {:.3}",
        manifest.n_packs,
        manifest.n_packed,
        manifest.utilization
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let endpoint = pipeline::resolve_endpoint(args.endpoint.as_deref())?;
    let backend = HttpBackend::new(&endpoint);
    let samples = if args.tasks.is_dir() {
        adapter_mmlu(&args.tasks).map_err(runtime)?
    } else {
        read_samples(&args.tasks)?
    };
    let (items, n_unrankable) = pipeline::eval_items_from_corpus(&samples, args.candidate_form)?;
    if n_unrankable > 0 {
        log::warn!("{n_unrankable} free-form sample(s) cannot be rank-classified");
    }

    let mut results: Vec<TaskResult> = Vec::new();
    let mut records: Vec<ItemRecord> = Vec::new();
    for (task, task_items) in &items {
        let eval = crate::eval::evaluate_task(task_items, &backend, args.subject_prefix)
            .map_err(|abort| {
                if let Some(records_path) = &args.records {
                    let mut partial = records.clone();
                    partial.extend(abort.partial.iter().cloned());
                    let _ = io::write_jsonl(records_path, &partial);
                }
                CliError::Runtime(format!("task {task}: {abort}"))
            })?;
        log::info!("{task}: {}/{}", eval.result.n_correct, eval.result.n_items);
        results.push(eval.result);
        records.extend(eval.records);
    }
    if results.is_empty() {
        return Err(CliError::Runtime("no rankable items found".into()));
    }

    std::fs::write(&args.out, render_results(&results, ReportFormat::Csv)).map_err(runtime)?;
    if let Some(records_path) = &args.records {
        io::write_jsonl(records_path, &records).map_err(runtime)?;
    }
    let macro_average = aggregate(&results).map_err(runtime)?;
    log::info!("macro average: {:.2}", macro_average * 100.0);
    println!("macro_average {:.2}", macro_average * 100.0);
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    let text = match (&args.stats, &args.results) {
        (Some(augmented_path), None) => {
            let augs = io::read_augmented(augmented_path).map_err(runtime)?;
            let tokenizer = args.tokenizer.create();
            render_stats(&dataset_stats(&augs, tokenizer.as_ref()), args.format)
        }
        (None, Some(results_path)) => {
            let results = read_results_csv(results_path)?;
            render_results(&results, args.format)
        }
        _ => {
            return Err(CliError::Config(
                "pass exactly one of --stats <augmented.jsonl> or --results <results.csv>".into(),
            ))
        }
    };
    match &args.out {
        Some(path) => std::fs::write(path, text).map_err(runtime)?,
        None => print!("{text}"),
    }
    Ok(())
}

/// Reads a results.csv back into task results, ignoring the macro row
/// (it is recomputed on render).
fn read_results_csv(path: &PathBuf) -> Result<Vec<TaskResult>, CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(runtime)?;
    let mut results = Vec::new();
    for row in reader.deserialize::<BTreeMap<String, String>>() {
        let row = row.map_err(runtime)?;
        let field = |k: &str| {
            row.get(k).cloned().ok_or_else(|| CliError::Runtime(format!("missing column {k}")))
        };
        let task = field("task")?;
        if task == "macro_average" {
            continue;
        }
        let parse = |k: &str, v: String| {
            v.parse::<f64>().map_err(|e| CliError::Runtime(format!("column {k}: {e}")))
        };
        let n_items = parse("n_items", field("n_items")?)? as usize;
        let n_correct = parse("n_correct", field("n_correct")?)? as usize;
        let accuracy = parse("accuracy", field("accuracy")?)?;
        results.push(TaskResult { task, n_items, n_correct, accuracy });
    }
    Ok(results)
}

fn cmd_pipeline(args: PipelineArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.config.display())))?;
    let mut cfg = PipelineConfig::from_toml(&text).map_err(CliError::Config)?;
    if let Some(endpoint) = args.endpoint {
        cfg.pipeline.endpoint = Some(endpoint);
    }
    if let Some(seed) = args.seed {
        cfg.pipeline.seed = seed;
    }
    if let Some(input) = args.input {
        cfg.pipeline.input = input;
    }
    if let Some(concurrency) = args.concurrency {
        cfg.augment.concurrency = concurrency;
    }
    run_pipeline(&cfg, args.out_dir.as_deref())
}

fn cmd_stub_serve(args: StubServeArgs) -> Result<(), CliError> {
    let behavior = match &args.behavior {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<StubBehavior>(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => StubBehavior::default(),
    };
    let server = StubServer::spawn(args.port, args.seed, behavior).map_err(runtime)?;
    // Printed (not logged) so scripts can scrape the bound address.
    println!("listening on {}", server.endpoint());
    server.wait();
    Ok(())
}
