//! End-to-end tests driving the compiled binary the way a user would:
//! spawning it with flags, checking exit classes, and inspecting the run
//! directories it leaves behind.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use earlkit::pipeline::PredictionSet;
use earlkit::templates::PromptMode;
use tempfile::TempDir;

fn testdata(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../earlkit/testdata")
        .join(rel)
}

fn synthetic_dataset() -> String {
    testdata("synthetic/dataset.json").display().to_string()
}

fn synthetic_ontology() -> String {
    testdata("synthetic/ontology.json").display().to_string()
}

fn earlkit_cmd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_earlkit"))
        .args(args)
        .output()
        .expect("the binary runs")
}

fn stdout_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

#[track_caller]
fn assert_exit(output: &Output, code: i32) {
    assert_eq!(
        output.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        stdout_of(output),
        stderr_of(output)
    );
}

/// Writes a config wiring every capability slot to the gold-answering mock.
fn oracle_config(dir: &Path) -> String {
    let path = dir.join("oracle.toml");
    fs::write(
        &path,
        r#"
[backends.gvlm]
provider = "oracle"
model = "vision"

[backends.llm]
provider = "oracle"
model = "chat"

[backends.scorer]
provider = "oracle"
model = "scorer"

[backends.embed]
provider = "oracle"
model = "embed"
"#,
    )
    .unwrap();
    path.display().to_string()
}

/// Extracts the run directory path from a `run`/`detect` summary.
fn run_dir_from(stdout: &str) -> PathBuf {
    let line = stdout
        .lines()
        .find_map(|line| line.strip_prefix("run directory: "))
        .expect("summary names the run directory");
    PathBuf::from(line)
}

fn read_prediction_set(run_dir: &Path) -> PredictionSet {
    let text = fs::read_to_string(run_dir.join("predictions.json")).unwrap();
    PredictionSet::from_json(&text).unwrap()
}

// ==========================================================================
// prepare
// ==========================================================================

#[test]
fn prepare_reports_dataset_statistics() {
    let output = earlkit_cmd(&[
        "prepare",
        "--dataset",
        &synthetic_dataset(),
        "--ontology",
        &synthetic_ontology(),
    ]);
    assert_exit(&output, 0);
    let stdout = stdout_of(&output);
    assert!(stdout.contains("20 images, 60 objects, 4 events"), "{stdout}");
    assert!(stdout.contains("Conflict.Attack"), "{stdout}");
}

#[test]
fn prepare_handles_an_empty_dataset() {
    let tmp = TempDir::new().unwrap();
    let dataset = tmp.path().join("empty.json");
    fs::write(&dataset, r#"{"images": []}"#).unwrap();
    let output = earlkit_cmd(&[
        "prepare",
        "--dataset",
        &dataset.display().to_string(),
        "--ontology",
        &synthetic_ontology(),
    ]);
    assert_exit(&output, 0);
    assert!(stdout_of(&output).contains("0 images, 0 objects, 0 events"));
}

#[test]
fn missing_dataset_files_exit_with_the_validation_class() {
    let output = earlkit_cmd(&[
        "prepare",
        "--dataset",
        "/nonexistent/dataset.json",
        "--ontology",
        "m2e2",
    ]);
    assert_exit(&output, 3);
    assert!(stderr_of(&output).starts_with("error:"));
}

#[test]
fn missing_required_settings_exit_with_the_config_class() {
    let output = earlkit_cmd(&["prepare", "--ontology", "m2e2"]);
    assert_exit(&output, 2);
    assert!(stderr_of(&output).contains("dataset"));
}

#[test]
fn unusable_configs_exit_with_the_config_class() {
    let tmp = TempDir::new().unwrap();
    let broken = tmp.path().join("broken.toml");
    fs::write(&broken, "method = [this is not toml").unwrap();
    let output = earlkit_cmd(&[
        "prepare",
        "--config",
        &broken.display().to_string(),
        "--dataset",
        &synthetic_dataset(),
        "--ontology",
        &synthetic_ontology(),
    ]);
    assert_exit(&output, 2);

    let unknown_provider = tmp.path().join("unknown.toml");
    fs::write(&unknown_provider, "[backends.gvlm]\nprovider = \"psychic\"\n").unwrap();
    let output = earlkit_cmd(&[
        "run",
        "--config",
        &unknown_provider.display().to_string(),
        "--dataset",
        &synthetic_dataset(),
        "--ontology",
        &synthetic_ontology(),
        "--out",
        &tmp.path().join("runs").display().to_string(),
    ]);
    assert_exit(&output, 2);
    assert!(stderr_of(&output).contains("psychic"));
}

// ==========================================================================
// run
// ==========================================================================

#[test]
fn run_labels_the_synthetic_dataset_with_the_oracle() {
    let tmp = TempDir::new().unwrap();
    let config = oracle_config(tmp.path());
    let out = tmp.path().join("runs").display().to_string();
    let output = earlkit_cmd(&[
        "run",
        "--config",
        &config,
        "--dataset",
        &synthetic_dataset(),
        "--ontology",
        &synthetic_ontology(),
        "--method",
        "genearl",
        "--out",
        &out,
    ]);
    assert_exit(&output, 0);
    let stdout = stdout_of(&output);
    assert!(stdout.contains("predictions: 60"), "{stdout}");

    let run_dir = run_dir_from(&stdout);
    assert!(run_dir.join("config.toml").is_file());
    let set = read_prediction_set(&run_dir);
    assert_eq!(set.predictions.len(), 60);
    assert!(set.predictions.iter().all(|p| p.method == "genearl"));
    assert!(set.warnings.is_empty());

    let archived = |name: &str| fs::read_dir(run_dir.join(name)).unwrap().count();
    assert!(archived("prompts") > 0, "prompt archive is populated");
    assert!(archived("responses") > 0, "response archive is populated");
}

#[test]
fn reruns_answer_entirely_from_cache() {
    let tmp = TempDir::new().unwrap();
    let config = oracle_config(tmp.path());
    let args = [
        "run",
        "--config",
        &config,
        "--dataset",
        &synthetic_dataset(),
        "--ontology",
        &synthetic_ontology(),
        "--method",
        "genearl",
        "--out",
        &tmp.path().join("runs").display().to_string(),
        "--cache-dir",
        &tmp.path().join("cache").display().to_string(),
    ];

    let first = earlkit_cmd(&args);
    assert_exit(&first, 0);
    let first_stdout = stdout_of(&first);
    assert!(
        !first_stdout.contains("model dispatches: 0"),
        "{first_stdout}"
    );

    let second = earlkit_cmd(&args);
    assert_exit(&second, 0);
    let second_stdout = stdout_of(&second);
    assert!(
        second_stdout.contains("model dispatches: 0"),
        "{second_stdout}"
    );

    let first_set = read_prediction_set(&run_dir_from(&first_stdout));
    let second_set = read_prediction_set(&run_dir_from(&second_stdout));
    assert_eq!(first_set.canonical_json(), second_set.canonical_json());
}

#[test]
fn exemplar_runs_record_their_sampling_and_shrink_the_eval_pool() {
    let tmp = TempDir::new().unwrap();
    let config = oracle_config(tmp.path());
    let output = earlkit_cmd(&[
        "run",
        "--config",
        &config,
        "--dataset",
        &synthetic_dataset(),
        "--ontology",
        &synthetic_ontology(),
        "--method",
        "genearl",
        "--shots",
        "3",
        "--seed",
        "9",
        "--out",
        &tmp.path().join("runs").display().to_string(),
    ]);
    assert_exit(&output, 0);
    let stdout = stdout_of(&output);
    assert!(stdout.contains("predictions: 51"), "{stdout}");

    let run_dir = run_dir_from(&stdout);
    let set = read_prediction_set(&run_dir);
    assert_eq!(set.metadata.shots, 3);
    assert_eq!(set.metadata.seed, 9);
    assert_eq!(set.metadata.exemplar_images.len(), 3);

    // Exemplar images are out of the gold pool by default, so the oracle
    // still scores perfectly.
    let eval = earlkit_cmd(&["eval", "--run-dir", &run_dir.display().to_string()]);
    assert_exit(&eval, 0);
    assert!(stdout_of(&eval).contains("100.00"));

    // Forcing them back in leaves their objects unpredicted: 51 of 60.
    let eval = earlkit_cmd(&[
        "eval",
        "--run-dir",
        &run_dir.display().to_string(),
        "--include-exemplars-in-eval",
    ]);
    assert_exit(&eval, 0);
    let table = stdout_of(&eval);
    assert!(table.contains("85.00"), "{table}");
}

#[test]
fn flag_overrides_beat_config_file_fields() {
    let tmp = TempDir::new().unwrap();
    let config_path = tmp.path().join("run.toml");
    fs::write(
        &config_path,
        r#"
method = "alpaca"
shots = 0

[backends.gvlm]
provider = "oracle"
model = "vision"

[backends.llm]
provider = "oracle"
model = "chat"
"#,
    )
    .unwrap();
    let output = earlkit_cmd(&[
        "run",
        "--config",
        &config_path.display().to_string(),
        "--dataset",
        &synthetic_dataset(),
        "--ontology",
        &synthetic_ontology(),
        "--method",
        "genearl",
        "--shots",
        "1",
        "--mode",
        "object-caption",
        "--out",
        &tmp.path().join("runs").display().to_string(),
    ]);
    assert_exit(&output, 0);

    let set = read_prediction_set(&run_dir_from(&stdout_of(&output)));
    assert_eq!(set.metadata.method, "genearl");
    assert_eq!(set.metadata.shots, 1);
    assert_eq!(set.metadata.mode, PromptMode::ObjectCaptionOnly);
}

#[test]
fn unknown_modes_are_rejected_by_flag_parsing() {
    let output = earlkit_cmd(&[
        "run",
        "--dataset",
        &synthetic_dataset(),
        "--ontology",
        &synthetic_ontology(),
        "--mode",
        "sideways",
    ]);
    assert_exit(&output, 2);
    assert!(stderr_of(&output).contains("sideways"));
}

#[test]
fn unknown_methods_and_incompatible_settings_are_validation_failures() {
    let tmp = TempDir::new().unwrap();
    let config = oracle_config(tmp.path());
    let out = tmp.path().join("runs").display().to_string();

    let unknown = earlkit_cmd(&[
        "run",
        "--config",
        &config,
        "--dataset",
        &synthetic_dataset(),
        "--ontology",
        &synthetic_ontology(),
        "--method",
        "nope",
        "--out",
        &out,
    ]);
    assert_exit(&unknown, 3);
    assert!(stderr_of(&unknown).contains("genearl"), "lists what exists");

    let shots_rejected = earlkit_cmd(&[
        "run",
        "--config",
        &config,
        "--dataset",
        &synthetic_dataset(),
        "--ontology",
        &synthetic_ontology(),
        "--method",
        "alpaca",
        "--shots",
        "2",
        "--out",
        &out,
    ]);
    assert_exit(&shots_rejected, 3);

    // No backends configured at all: genearl cannot start.
    let no_backends = earlkit_cmd(&[
        "run",
        "--dataset",
        &synthetic_dataset(),
        "--ontology",
        &synthetic_ontology(),
        "--method",
        "genearl",
        "--out",
        &out,
    ]);
    assert_exit(&no_backends, 3);
    assert!(stderr_of(&no_backends).contains("gvlm"));
}

#[test]
fn dead_endpoints_exit_with_the_backend_class() {
    let tmp = TempDir::new().unwrap();
    let config_path = tmp.path().join("dead.toml");
    fs::write(
        &config_path,
        r#"
[backends.gvlm]
provider = "http"
model = "nobody-home"
base_url = "http://127.0.0.1:1"
retry_attempts = 1
retry_base_ms = 0

[backends.llm]
provider = "http"
model = "nobody-home"
base_url = "http://127.0.0.1:1"
retry_attempts = 1
retry_base_ms = 0
"#,
    )
    .unwrap();
    let output = earlkit_cmd(&[
        "run",
        "--config",
        &config_path.display().to_string(),
        "--dataset",
        &synthetic_dataset(),
        "--ontology",
        &synthetic_ontology(),
        "--method",
        "genearl",
        "--out",
        &tmp.path().join("runs").display().to_string(),
    ]);
    assert_exit(&output, 4);
    assert!(stderr_of(&output).contains("failed"));
}

// ==========================================================================
// eval
// ==========================================================================

#[test]
fn eval_reproduces_identical_report_bytes() {
    let tmp = TempDir::new().unwrap();
    let config = oracle_config(tmp.path());
    let run = earlkit_cmd(&[
        "run",
        "--config",
        &config,
        "--dataset",
        &synthetic_dataset(),
        "--ontology",
        &synthetic_ontology(),
        "--method",
        "direct-gvlm",
        "--out",
        &tmp.path().join("runs").display().to_string(),
    ]);
    assert_exit(&run, 0);
    let run_dir = run_dir_from(&stdout_of(&run));
    let dir_flag = run_dir.display().to_string();

    let first = earlkit_cmd(&["eval", "--run-dir", &dir_flag]);
    assert_exit(&first, 0);
    assert!(stdout_of(&first).contains("100.00"));
    let first_json = fs::read(run_dir.join("metrics.json")).unwrap();
    let first_table = fs::read(run_dir.join("metrics.txt")).unwrap();

    let second = earlkit_cmd(&["eval", "--run-dir", &dir_flag]);
    assert_exit(&second, 0);
    assert_eq!(stdout_of(&first), stdout_of(&second));
    assert_eq!(first_json, fs::read(run_dir.join("metrics.json")).unwrap());
    assert_eq!(first_table, fs::read(run_dir.join("metrics.txt")).unwrap());
}

#[test]
fn eval_scores_a_bare_prediction_file() {
    let tmp = TempDir::new().unwrap();
    let config = oracle_config(tmp.path());
    let run = earlkit_cmd(&[
        "run",
        "--config",
        &config,
        "--dataset",
        &synthetic_dataset(),
        "--ontology",
        &synthetic_ontology(),
        "--method",
        "alpaca",
        "--out",
        &tmp.path().join("runs").display().to_string(),
    ]);
    assert_exit(&run, 0);
    let predictions = run_dir_from(&stdout_of(&run)).join("predictions.json");

    let report_path = tmp.path().join("report.json");
    let eval = earlkit_cmd(&[
        "eval",
        "--predictions",
        &predictions.display().to_string(),
        "--dataset",
        &synthetic_dataset(),
        "--ontology",
        &synthetic_ontology(),
        "--out",
        &report_path.display().to_string(),
    ]);
    assert_exit(&eval, 0);
    assert!(stdout_of(&eval).contains("method: alpaca"));
    assert!(report_path.is_file());
}

#[test]
fn eval_without_predictions_is_a_validation_failure() {
    let tmp = TempDir::new().unwrap();
    let output = earlkit_cmd(&["eval", "--run-dir", &tmp.path().display().to_string()]);
    assert_exit(&output, 3);
    assert!(stderr_of(&output).contains("predictions.json"));

    let no_source = earlkit_cmd(&["eval"]);
    assert_exit(&no_source, 2);
}

// ==========================================================================
// detect
// ==========================================================================

#[test]
fn detect_writes_an_evaluable_run_directory() {
    let tmp = TempDir::new().unwrap();
    let config = oracle_config(tmp.path());
    let output = earlkit_cmd(&[
        "detect",
        "--config",
        &config,
        "--dataset",
        &synthetic_dataset(),
        "--ontology",
        &synthetic_ontology(),
        "--out",
        &tmp.path().join("runs").display().to_string(),
    ]);
    assert_exit(&output, 0);
    let stdout = stdout_of(&output);
    assert!(stdout.contains("event predictions: 20"), "{stdout}");

    let run_dir = run_dir_from(&stdout);
    let set = read_prediction_set(&run_dir);
    assert_eq!(set.metadata.method, "detect-generative");
    assert_eq!(set.event_predictions.as_ref().map(|e| e.len()), Some(20));

    let eval = earlkit_cmd(&["eval", "--run-dir", &run_dir.display().to_string()]);
    assert_exit(&eval, 0);
    assert!(stdout_of(&eval).contains("event detection accuracy: 100.00"));
}

#[test]
fn the_clip_detector_matches_embeddings_instead() {
    let tmp = TempDir::new().unwrap();
    let config = oracle_config(tmp.path());
    let output = earlkit_cmd(&[
        "detect",
        "--config",
        &config,
        "--dataset",
        &synthetic_dataset(),
        "--ontology",
        &synthetic_ontology(),
        "--detector",
        "clip",
        "--out",
        &tmp.path().join("runs").display().to_string(),
    ]);
    assert_exit(&output, 0);

    let run_dir = run_dir_from(&stdout_of(&output));
    let set = read_prediction_set(&run_dir);
    assert_eq!(set.metadata.method, "detect-clip");

    let eval = earlkit_cmd(&["eval", "--run-dir", &run_dir.display().to_string()]);
    assert_exit(&eval, 0);
    assert!(stdout_of(&eval).contains("event detection accuracy: 100.00"));
}

#[test]
fn run_with_detect_gates_role_credit_on_events() {
    let tmp = TempDir::new().unwrap();
    let config = oracle_config(tmp.path());
    let output = earlkit_cmd(&[
        "run",
        "--config",
        &config,
        "--dataset",
        &synthetic_dataset(),
        "--ontology",
        &synthetic_ontology(),
        "--method",
        "genearl",
        "--detect",
        "--out",
        &tmp.path().join("runs").display().to_string(),
    ]);
    assert_exit(&output, 0);
    assert!(stdout_of(&output).contains("event predictions: 20"));

    let run_dir = run_dir_from(&stdout_of(&output));
    let eval = earlkit_cmd(&["eval", "--run-dir", &run_dir.display().to_string()]);
    assert_exit(&eval, 0);
    let table = stdout_of(&eval);
    assert!(table.contains("event detection accuracy: 100.00"), "{table}");
    assert!(table.contains("overall"), "{table}");
}
