//! Command-line front end for the earlkit labeling pipelines.
//!
//! Four workflows: `prepare` loads and validates a dataset and prints its
//! statistics, `run` executes a labeling method into a fresh run directory,
//! `eval` scores predictions against gold annotations, and `detect` predicts
//! an event type per image. A run is described by a TOML config file; every
//! flag below overrides the matching config field, so quick experiments need
//! no file at all.
//!
//! Run directories are append-only: `run` and `detect` create a fresh
//! directory named by timestamp and config digest, and `eval` on that
//! directory reproduces the same report bytes every time.
//!
//! Exit codes are classed: 0 success, 2 the run description is unusable
//! (bad flags, malformed config, unknown provider), 3 the described inputs
//! fail validation (missing files, ontology mismatches, incompatible method
//! settings), 4 the backends failed outright and left no usable output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};

use earlkit::backends::ModelBackend;
use earlkit::baseline::run_clip_event_detection;
use earlkit::config::{
    build_backends, create_run_dir, prepare_run, resolve_ontology, BackendSet, ConfigError,
    PreparedRun, RunConfig,
};
use earlkit::dataset::{load_dataset_with, DatasetError, LoadOptions, LoadReport};
use earlkit::evaluator::{render_table, score_combined, score_earl, EvalError, GoldView};
use earlkit::methods::MethodRegistry;
use earlkit::pipeline::{
    run_event_detection, PipelineError, PredictionSet, RunMetadata,
};
use earlkit::templates::PromptMode;

const EXIT_CONFIG: u8 = 2;
const EXIT_VALIDATION: u8 = 3;
const EXIT_BACKEND: u8 = 4;

#[derive(Parser)]
#[command(
    name = "earlkit",
    version,
    about = "Training-free event argument role labeling for images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate a dataset, printing its statistics.
    Prepare(PrepareArgs),
    /// Execute a labeling method into a fresh run directory.
    Run(RunArgs),
    /// Score a prediction file against gold annotations.
    Eval(EvalArgs),
    /// Predict an event type for every image.
    Detect(DetectArgs),
}

/// Config-file selection plus the per-field overrides shared by `prepare`,
/// `run`, and `detect`.
#[derive(Args)]
struct ConfigArgs {
    /// Run description TOML; the flags below override its fields.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Dataset document to label.
    #[arg(long, value_name = "FILE")]
    dataset: Option<PathBuf>,

    /// Ontology to label against: m2e2, swig, or a JSON file path.
    #[arg(long, value_name = "NAME|FILE")]
    ontology: Option<String>,

    /// Labeling method to run.
    #[arg(long)]
    method: Option<String>,

    /// In-context exemplar count for methods that accept one.
    #[arg(long)]
    shots: Option<usize>,

    /// Exemplar sampling seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Description-stage ablation mode.
    #[arg(long, value_name = "full|no-event-image|object-caption", value_parser = parse_mode)]
    mode: Option<PromptMode>,

    /// Content-addressed response cache shared across runs.
    #[arg(long, value_name = "DIR")]
    cache_dir: Option<PathBuf>,

    /// Parent directory receiving run directories.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Score sampled exemplar images instead of excluding them.
    #[arg(long)]
    include_exemplars_in_eval: bool,
}

impl ConfigArgs {
    /// Loads the config file (or the defaults) and applies every flag that
    /// was given.
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut config = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(dataset) = &self.dataset {
            config.dataset = Some(dataset.clone());
        }
        if let Some(ontology) = &self.ontology {
            config.ontology = Some(ontology.clone());
        }
        if let Some(method) = &self.method {
            config.method = method.clone();
        }
        if let Some(shots) = self.shots {
            config.shots = shots;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(mode) = self.mode {
            config.mode = mode;
        }
        if let Some(dir) = &self.cache_dir {
            config.cache_dir = Some(dir.clone());
        }
        if let Some(out) = &self.out {
            config.out = out.clone();
        }
        if self.include_exemplars_in_eval {
            config.include_exemplars_in_eval = true;
        }
        Ok(config)
    }
}

fn parse_mode(text: &str) -> Result<PromptMode, String> {
    PromptMode::parse(text).ok_or_else(|| {
        format!("unknown mode {text:?} (expected full, no-event-image, or object-caption)")
    })
}

#[derive(Args)]
struct PrepareArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,

    /// Also predict an event type per image; evaluation then gates role
    /// credit on the event being right.
    #[arg(long)]
    detect: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory holding predictions.json and config.toml.
    #[arg(long, value_name = "DIR", conflicts_with = "predictions")]
    run_dir: Option<PathBuf>,

    /// Prediction file to score; requires --dataset and --ontology.
    #[arg(long, value_name = "FILE")]
    predictions: Option<PathBuf>,

    /// Dataset document with gold annotations; overrides the run config.
    #[arg(long, value_name = "FILE")]
    dataset: Option<PathBuf>,

    /// Ontology the predictions were made against; overrides the run config.
    #[arg(long, value_name = "NAME|FILE")]
    ontology: Option<String>,

    /// File receiving the JSON report; defaults to metrics.json inside the
    /// run directory when --run-dir is given.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,

    /// Score exemplar images even when the run excluded them.
    #[arg(long)]
    include_exemplars_in_eval: bool,
}

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    config: ConfigArgs,

    /// Detection strategy.
    #[arg(long, value_enum, default_value_t = Detector::Generative)]
    detector: Detector,
}

/// How `detect` turns an image into an event name.
#[derive(Clone, Copy, ValueEnum)]
enum Detector {
    /// Caption the image, then ask the text model to pick an event.
    Generative,
    /// Embed the image and pick the nearest event template sentence.
    Clip,
}

// ==========================================================================
// Failure classification
// ==========================================================================

/// A command failure carrying the exit class it maps to.
#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> CliError {
        CliError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    fn validation(message: impl Into<String>) -> CliError {
        CliError {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(err: ConfigError) -> CliError {
        let code = match &err {
            ConfigError::Ontology(_) | ConfigError::Dataset(_) | ConfigError::Template(_) => {
                EXIT_VALIDATION
            }
            _ => EXIT_CONFIG,
        };
        CliError {
            code,
            message: err.to_string(),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(err: PipelineError) -> CliError {
        let code = match &err {
            PipelineError::Validation(_) | PipelineError::Dataset(_) | PipelineError::Template(_) => {
                EXIT_VALIDATION
            }
            PipelineError::Backend { .. }
            | PipelineError::MissingEmbeddings { .. }
            | PipelineError::TotalFailure { .. } => EXIT_BACKEND,
        };
        CliError {
            code,
            message: err.to_string(),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(err: DatasetError) -> CliError {
        CliError::validation(err.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(err: EvalError) -> CliError {
        CliError::validation(err.to_string())
    }
}

// ==========================================================================
// Entry point
// ==========================================================================

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Prepare(args) => cmd_prepare(args),
        Command::Run(args) => cmd_run(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Detect(args) => cmd_detect(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message);
            ExitCode::from(err.code)
        }
    }
}

// ==========================================================================
// prepare
// ==========================================================================

fn cmd_prepare(args: &PrepareArgs) -> Result<(), CliError> {
    let config = args.config.resolve()?;
    let dataset_path = config
        .dataset
        .as_ref()
        .ok_or_else(|| CliError::config("a dataset path is required"))?;
    let ontology_spec = config
        .ontology
        .as_ref()
        .ok_or_else(|| CliError::config("an ontology name or path is required"))?;

    // Headline statistics against the full ontology, before any filtering.
    let full = resolve_ontology(ontology_spec)?;
    let options = match &config.image_manifest {
        Some(path) => LoadOptions::with_manifest_file(path)?,
        None => LoadOptions::default(),
    };
    let (_, raw) = load_dataset_with(dataset_path, &full, &options)?;
    println!("dataset: {}", counts_line(&raw));

    let prepared = prepare_run(&config)?;
    let excluded = if config.excluded_roles.is_empty() {
        "none".to_string()
    } else {
        config.excluded_roles.join(", ")
    };
    println!(
        "after filtering (min {} roles, excluding: {}): {}",
        config.min_roles,
        excluded,
        counts_line(&prepared.report)
    );
    println!("events: {}", prepared.ontology.event_names().join(", "));
    print_exclusions(&prepared.report);
    print_warnings(&prepared.report.warnings);
    Ok(())
}

fn counts_line(report: &LoadReport) -> String {
    format!(
        "{} images, {} objects, {} events",
        report.images, report.objects, report.events
    )
}

fn print_exclusions(report: &LoadReport) {
    if report.excluded_images > 0 || report.excluded_objects > 0 {
        println!(
            "excluded: {} images with events outside the ontology, {} objects with off-event roles",
            report.excluded_images, report.excluded_objects
        );
    }
    if report.unlisted_images > 0 {
        println!("unlisted: {} images dropped by the manifest", report.unlisted_images);
    }
}

fn print_warnings(warnings: &[String]) {
    if warnings.is_empty() {
        return;
    }
    println!("warnings ({}):", warnings.len());
    for warning in warnings {
        println!("  {warning}");
    }
}

// ==========================================================================
// run
// ==========================================================================

fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    let mut config = args.config.resolve()?;
    if args.detect {
        config.detect = true;
    }
    let prepared = prepare_run(&config)?;
    let run_dir = create_run_dir(&config)?;
    let backends = build_backends(&config, &prepared.dataset, Some(&run_dir))?;
    let ctx = prepared.context(&config, &backends);

    let registry = MethodRegistry::with_builtins();
    let mut set = registry.run(&config.method, &ctx)?;
    if config.detect {
        let (events, warnings) = run_event_detection(&ctx)?;
        set.event_predictions = Some(events);
        set.warnings.extend(warnings);
    }
    write_predictions(&run_dir, &set)?;

    println!("run directory: {}", run_dir.display());
    println!("dataset: {}", counts_line(&prepared.report));
    println!(
        "method: {}   shots: {}   seed: {}   mode: {}",
        set.metadata.method,
        set.metadata.shots,
        set.metadata.seed,
        set.metadata.mode.as_str()
    );
    for (slot, id) in &set.metadata.backends {
        println!("backend {slot}: {id}");
    }
    if !set.metadata.exemplar_images.is_empty() {
        println!("exemplars: {}", set.metadata.exemplar_images.join(", "));
    }
    println!("predictions: {}", set.predictions.len());
    if let Some(events) = &set.event_predictions {
        println!("event predictions: {}", events.len());
    }
    println!("model dispatches: {}", backends.dispatch_counter.count());
    print_warnings(&set.warnings);
    Ok(())
}

fn write_predictions(run_dir: &Path, set: &PredictionSet) -> Result<(), CliError> {
    let path = run_dir.join("predictions.json");
    let mut text = set.to_json();
    text.push('\n');
    fs::write(&path, text)
        .map_err(|err| CliError::config(format!("cannot write {}: {err}", path.display())))
}

// ==========================================================================
// eval
// ==========================================================================

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let (set, mut config) = match (&args.run_dir, &args.predictions) {
        (Some(dir), _) => {
            let set = read_predictions(&dir.join("predictions.json"))?;
            let config = RunConfig::from_file(dir.join("config.toml"))?;
            (set, config)
        }
        (None, Some(path)) => (read_predictions(path)?, RunConfig::default()),
        (None, None) => {
            return Err(CliError::config(
                "eval needs --run-dir or --predictions",
            ))
        }
    };
    if let Some(dataset) = &args.dataset {
        config.dataset = Some(dataset.clone());
    }
    if let Some(ontology) = &args.ontology {
        config.ontology = Some(ontology.clone());
    }

    let prepared = prepare_run(&config)?;
    let mut metadata = set.metadata.clone();
    if args.include_exemplars_in_eval {
        metadata.include_exemplars_in_eval = true;
    }
    let gold = GoldView::for_run(&prepared.dataset, &metadata);
    let report = if set.event_predictions.is_some() {
        score_combined(&set, &gold)?
    } else {
        score_earl(&set, &gold)?
    };

    let table = render_table(&report);
    print!("{table}");

    let mut json = serde_json::to_string_pretty(&report)
        .map_err(|err| CliError::config(format!("cannot serialize report: {err}")))?;
    json.push('\n');
    let json_path = match (&args.out, &args.run_dir) {
        (Some(path), _) => Some(path.clone()),
        (None, Some(dir)) => Some(dir.join("metrics.json")),
        (None, None) => None,
    };
    if let Some(path) = json_path {
        fs::write(&path, &json)
            .map_err(|err| CliError::config(format!("cannot write {}: {err}", path.display())))?;
    }
    if let Some(dir) = &args.run_dir {
        let path = dir.join("metrics.txt");
        fs::write(&path, &table)
            .map_err(|err| CliError::config(format!("cannot write {}: {err}", path.display())))?;
    }
    Ok(())
}

fn read_predictions(path: &Path) -> Result<PredictionSet, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|err| CliError::validation(format!("cannot read {}: {err}", path.display())))?;
    PredictionSet::from_json(&text).map_err(|err| {
        CliError::validation(format!("malformed predictions {}: {err}", path.display()))
    })
}

// ==========================================================================
// detect
// ==========================================================================

fn cmd_detect(args: &DetectArgs) -> Result<(), CliError> {
    let config = args.config.resolve()?;
    let prepared = prepare_run(&config)?;
    let run_dir = create_run_dir(&config)?;
    let backends = build_backends(&config, &prepared.dataset, Some(&run_dir))?;
    let ctx = prepared.context(&config, &backends);

    let (events, warnings, method) = match args.detector {
        Detector::Generative => {
            let (events, warnings) = run_event_detection(&ctx)?;
            (events, warnings, "detect-generative")
        }
        Detector::Clip => (run_clip_event_detection(&ctx)?, Vec::new(), "detect-clip"),
    };
    let set = PredictionSet {
        metadata: detection_metadata(method, &config, &prepared, &backends),
        predictions: Vec::new(),
        event_predictions: Some(events),
        warnings,
    };
    write_predictions(&run_dir, &set)?;

    println!("run directory: {}", run_dir.display());
    println!("dataset: {}", counts_line(&prepared.report));
    println!("detector: {method}");
    for (slot, id) in &set.metadata.backends {
        println!("backend {slot}: {id}");
    }
    println!(
        "event predictions: {}",
        set.event_predictions.as_ref().map_or(0, BTreeMap::len)
    );
    println!("model dispatches: {}", backends.dispatch_counter.count());
    print_warnings(&set.warnings);
    Ok(())
}

/// Detection runs bypass the labeling methods, so their metadata is
/// assembled here rather than by the pipeline.
fn detection_metadata(
    method: &str,
    config: &RunConfig,
    prepared: &PreparedRun,
    backends: &BackendSet,
) -> RunMetadata {
    let mut ids = BTreeMap::new();
    if let Some(backend) = &backends.gvlm {
        ids.insert("gvlm".to_string(), backend.id());
    }
    if let Some(backend) = &backends.llm {
        ids.insert("llm".to_string(), backend.id());
    }
    if let Some(backend) = &backends.scorer {
        ids.insert("scorer".to_string(), backend.id());
    }
    if let Some(backend) = &backends.embedder {
        ids.insert("embedder".to_string(), backend.id());
    }
    RunMetadata {
        method: method.to_string(),
        shots: 0,
        seed: config.seed,
        mode: config.mode,
        ontology: prepared.ontology.name.clone(),
        backends: ids,
        exemplar_images: Vec::new(),
        include_exemplars_in_eval: config.include_exemplars_in_eval,
        timestamp_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    }
}
