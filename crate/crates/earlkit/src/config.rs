//! Run configuration and backend assembly.
//!
//! A run is described by a single TOML document: which dataset and ontology
//! to load, which labeling method to apply, and which backend fills each of
//! the four capability slots (`gvlm`, `llm`, `scorer`, `embed`). The same
//! document drives both the CLI and programmatic use, and a resolved copy is
//! written into every run directory so results stay reproducible.
//!
//! Backends are assembled as a fixed wrapper stack around the configured
//! provider:
//!
//! ```text
//! archive(cache(retry(counting(guard(base)))))
//! ```
//!
//! The archive sits outermost so every logical request is recorded even when
//! the cache answers it; the dispatch counter sits under the cache so cache
//! hits are never mistaken for live traffic.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    sha256_hex, with_cache, ArchivingBackend, BackendError, CallCounter, ConstantBackend,
    ContextGuard, CountingBackend, EndpointConfig, HttpBackend, ModelBackend, OracleBackend,
    RetryBackend, RetryPolicy, ScriptedBackend, SidecarEmbedder,
};
use crate::dataset::{load_dataset_with, Dataset, DatasetError, LoadOptions, LoadReport};
use crate::ontology::{
    fixtures, load_ontology, narrow_for_run, parse_ontology, Ontology, OntologyError,
};
use crate::pipeline::RunContext;
use crate::templates::{PromptMode, TemplateError, TemplateSet};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Ontology(#[from] OntologyError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("backend setup failed: {0}")]
    Backend(#[from] BackendError),
}

// ==========================================================================
// TOML schema
// ==========================================================================

/// Top-level run description. Every field has a default so a config file
/// only needs to state what differs from an ordinary zero-shot run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Path to the dataset document.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Ontology to label against: the builtin names `m2e2` or `swig`, or a
    /// path to an ontology JSON file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ontology: Option<String>,
    /// Labeling method name, resolved through the method registry.
    pub method: String,
    /// Number of in-context exemplars for methods that accept them.
    pub shots: usize,
    /// Seed for exemplar sampling.
    pub seed: u64,
    /// Description-stage ablation mode.
    pub mode: PromptMode,
    /// Events with fewer roles than this (after exclusions) are dropped.
    pub min_roles: usize,
    /// Role names removed from every event before the run.
    pub excluded_roles: Vec<String>,
    /// Content-addressed response cache shared across runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    /// Parent directory for run artifacts.
    pub out: PathBuf,
    /// Worker threads for per-image and per-object stages.
    pub parallelism: usize,
    /// Score sampled exemplar images instead of excluding them.
    pub include_exemplars_in_eval: bool,
    /// Optional manifest restricting the dataset to listed image ids.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_manifest: Option<PathBuf>,
    /// Also predict an event type per image and gate role credit on it.
    pub detect: bool,
    /// Directory of prompt templates overriding the builtin set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub template_dir: Option<PathBuf>,
    pub backends: BackendSections,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            dataset: None,
            ontology: None,
            method: "genearl".to_string(),
            shots: 0,
            seed: 0,
            mode: PromptMode::Full,
            min_roles: 3,
            excluded_roles: vec!["place".to_string()],
            cache_dir: None,
            out: PathBuf::from("runs"),
            parallelism: 4,
            include_exemplars_in_eval: false,
            image_manifest: None,
            detect: false,
            template_dir: None,
            backends: BackendSections::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<RunConfig, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes to TOML")
    }

    /// Stable digest of the resolved configuration, used to name run
    /// directories. Excludes nothing: two digests match only when every
    /// setting matches.
    pub fn digest(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }
}

/// One optional backend description per capability slot.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendSections {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gvlm: Option<BackendConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub llm: Option<BackendConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scorer: Option<BackendConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embed: Option<BackendConfig>,
}

/// Description of a single backend: the provider to instantiate plus the
/// wrapper settings applied around it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    /// One of `http`, `oracle`, `constant`, `scripted`, or `sidecar`.
    pub provider: String,
    pub model: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    /// Environment variable holding the bearer token for `http`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub credential_env: Option<String>,
    pub temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    /// Estimated-token budget enforced before dispatch; unset disables the
    /// guard.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub context_budget: Option<usize>,
    pub chars_per_token: f64,
    pub retry_attempts: usize,
    pub retry_base_ms: u64,
    pub retry_max_ms: u64,
    /// Fixed reply for the `constant` provider.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
    /// Fixed per-candidate score for the `constant` provider.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    /// Reply script for the `scripted` provider.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
    /// Embedding sidecar for the `sidecar` provider.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sidecar: Option<PathBuf>,
    /// Padding fraction applied around object crops sent over HTTP.
    pub crop_padding: f64,
}

impl Default for BackendConfig {
    fn default() -> BackendConfig {
        BackendConfig {
            provider: String::new(),
            model: "default".to_string(),
            base_url: None,
            credential_env: None,
            temperature: 0.0,
            max_tokens: None,
            context_budget: None,
            chars_per_token: 4.0,
            retry_attempts: 3,
            retry_base_ms: 100,
            retry_max_ms: 2_000,
            reply: None,
            score: None,
            script: None,
            sidecar: None,
            crop_padding: 0.0,
        }
    }
}

// ==========================================================================
// Run preparation
// ==========================================================================

/// Everything loaded and validated ahead of a run.
pub struct PreparedRun {
    pub ontology: Ontology,
    pub dataset: Dataset,
    pub report: LoadReport,
    pub templates: TemplateSet,
}

/// Resolves an ontology spec: a builtin name or a path to a JSON file.
pub fn resolve_ontology(spec: &str) -> Result<Ontology, ConfigError> {
    match spec {
        "m2e2" => Ok(parse_ontology(fixtures::M2E2_ONTOLOGY)?),
        "swig" => Ok(parse_ontology(fixtures::SWIG_ONTOLOGY)?),
        path => Ok(load_ontology(path)?),
    }
}

/// Loads the ontology and dataset named by `config`, applies role exclusions
/// and the minimum-role filter, and selects the template set.
pub fn prepare_run(config: &RunConfig) -> Result<PreparedRun, ConfigError> {
    let dataset_path = config
        .dataset
        .as_ref()
        .ok_or_else(|| ConfigError::Invalid("a dataset path is required".to_string()))?;
    let ontology_spec = config
        .ontology
        .as_ref()
        .ok_or_else(|| ConfigError::Invalid("an ontology name or path is required".to_string()))?;

    let full = resolve_ontology(ontology_spec)?;
    let ontology = narrow_for_run(&full, &config.excluded_roles, config.min_roles);
    if ontology.events.is_empty() {
        return Err(ConfigError::Invalid(format!(
            "no event in {ontology_spec:?} has {} or more roles after excluding {:?}",
            config.min_roles, config.excluded_roles
        )));
    }

    let options = match &config.image_manifest {
        Some(path) => LoadOptions::with_manifest_file(path)?,
        None => LoadOptions::default(),
    };
    let (dataset, report) = load_dataset_with(dataset_path, &ontology, &options)?;

    let templates = match &config.template_dir {
        Some(dir) => TemplateSet::from_dir(dir)?,
        None => TemplateSet::builtin(),
    };

    Ok(PreparedRun {
        ontology,
        dataset,
        report,
        templates,
    })
}

impl PreparedRun {
    /// Builds a run context wired to `backends`, carrying the settings from
    /// `config` that the pipeline consumes.
    pub fn context<'a>(&'a self, config: &RunConfig, backends: &'a BackendSet) -> RunContext<'a> {
        let mut ctx = RunContext::new(&self.dataset, &self.ontology, &self.templates);
        ctx.gvlm = backends.gvlm.as_deref();
        ctx.llm = backends.llm.as_deref();
        ctx.scorer = backends.scorer.as_deref();
        ctx.embedder = backends.embedder.as_deref();
        ctx.shots = config.shots;
        ctx.seed = config.seed;
        ctx.mode = config.mode;
        ctx.parallelism = config.parallelism.max(1);
        ctx.include_exemplars_in_eval = config.include_exemplars_in_eval;
        ctx
    }
}

// ==========================================================================
// Backend assembly
// ==========================================================================

/// The instantiated backend for each configured capability slot, plus the
/// counter that every slot reports live dispatches to.
pub struct BackendSet {
    pub gvlm: Option<Box<dyn ModelBackend>>,
    pub llm: Option<Box<dyn ModelBackend>>,
    pub scorer: Option<Box<dyn ModelBackend>>,
    pub embedder: Option<Box<dyn ModelBackend>>,
    pub dispatch_counter: CallCounter,
}

/// Instantiates every configured backend slot.
///
/// `run_dir`, when given, receives a prompt and response archive; the cache
/// directory comes from the config. The oracle provider needs the dataset to
/// answer from, so assembly happens after the dataset is loaded.
pub fn build_backends(
    config: &RunConfig,
    dataset: &Dataset,
    run_dir: Option<&Path>,
) -> Result<BackendSet, ConfigError> {
    let counter = CallCounter::new();
    let build = |section: &Option<BackendConfig>,
                 slot: &str|
     -> Result<Option<Box<dyn ModelBackend>>, ConfigError> {
        match section {
            None => Ok(None),
            Some(cfg) => build_backend(cfg, slot, dataset, config.cache_dir.as_deref(), run_dir, &counter)
                .map(Some),
        }
    };

    Ok(BackendSet {
        gvlm: build(&config.backends.gvlm, "gvlm")?,
        llm: build(&config.backends.llm, "llm")?,
        scorer: build(&config.backends.scorer, "scorer")?,
        embedder: build(&config.backends.embed, "embed")?,
        dispatch_counter: counter,
    })
}

fn build_backend(
    cfg: &BackendConfig,
    slot: &str,
    dataset: &Dataset,
    cache_dir: Option<&Path>,
    run_dir: Option<&Path>,
    counter: &CallCounter,
) -> Result<Box<dyn ModelBackend>, ConfigError> {
    let base: Box<dyn ModelBackend> = match cfg.provider.as_str() {
        "http" => {
            let endpoint = EndpointConfig {
                model: cfg.model.clone(),
                base_url: cfg.base_url.clone(),
                credential_env: cfg.credential_env.clone(),
                temperature: cfg.temperature,
                max_tokens: cfg.max_tokens,
                context_budget: cfg.context_budget,
                chars_per_token: cfg.chars_per_token,
            };
            Box::new(HttpBackend::new(endpoint)?.with_crop_padding(cfg.crop_padding))
        }
        "oracle" => Box::new(OracleBackend::from_dataset(cfg.model.clone(), dataset)),
        "constant" => {
            let reply = cfg.reply.clone().unwrap_or_default();
            let mut backend = ConstantBackend::new(cfg.model.clone(), reply);
            if let Some(score) = cfg.score {
                backend = backend.with_score(score);
            }
            Box::new(backend)
        }
        "scripted" => {
            let path = cfg.script.as_ref().ok_or_else(|| {
                ConfigError::Invalid(format!(
                    "backends.{slot}: the scripted provider needs script = <path>"
                ))
            })?;
            Box::new(load_script(path, &cfg.model)?)
        }
        "sidecar" => {
            let path = cfg.sidecar.as_ref().ok_or_else(|| {
                ConfigError::Invalid(format!(
                    "backends.{slot}: the sidecar provider needs sidecar = <path>"
                ))
            })?;
            let mut embedder = SidecarEmbedder::load(path)?;
            embedder.index_dataset(dataset);
            Box::new(embedder)
        }
        "" => {
            return Err(ConfigError::Invalid(format!(
                "backends.{slot}: provider is required"
            )))
        }
        other => {
            return Err(ConfigError::Invalid(format!(
                "backends.{slot}: unknown provider {other:?} \
                 (expected http, oracle, constant, scripted, or sidecar)"
            )))
        }
    };

    let guarded: Box<dyn ModelBackend> = match cfg.context_budget {
        Some(budget) => Box::new(ContextGuard::new(base, budget, cfg.chars_per_token)),
        None => base,
    };
    let counted = CountingBackend::new(guarded, counter.clone());
    let policy = RetryPolicy {
        max_attempts: cfg.retry_attempts.max(1),
        base_delay_ms: cfg.retry_base_ms,
        max_delay_ms: cfg.retry_max_ms,
    };
    let retried = RetryBackend::new(counted, policy);
    let cached: Box<dyn ModelBackend> = match cache_dir {
        Some(dir) => Box::new(with_cache(retried, dir).map_err(|source| ConfigError::Io {
            path: dir.display().to_string(),
            source,
        })?),
        None => Box::new(retried),
    };
    let archived: Box<dyn ModelBackend> = match run_dir {
        Some(dir) => Box::new(ArchivingBackend::new(cached, dir).map_err(|source| {
            ConfigError::Io {
                path: dir.display().to_string(),
                source,
            }
        })?),
        None => cached,
    };
    Ok(archived)
}

/// On-disk format for the `scripted` provider: replies and score vectors
/// keyed by prompt digest.
#[derive(Debug, Default, Deserialize)]
struct ScriptFile {
    #[serde(default)]
    replies: BTreeMap<String, String>,
    #[serde(default)]
    scores: BTreeMap<String, Vec<f64>>,
}

fn load_script(path: &Path, model: &str) -> Result<ScriptedBackend, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: ScriptFile = serde_json::from_str(&text).map_err(|err| {
        ConfigError::Invalid(format!("malformed script {}: {err}", path.display()))
    })?;
    let mut backend = ScriptedBackend::new(model.to_string());
    for (digest, reply) in file.replies {
        backend = backend.script(digest, reply);
    }
    for (digest, scores) in file.scores {
        backend = backend.script_scores(digest, scores);
    }
    Ok(backend)
}

// ==========================================================================
// Run directories
// ==========================================================================

/// Creates a fresh directory under `config.out` named
/// `{unix-seconds}-{config-digest-8}` and writes the resolved config into
/// it. A numeric suffix keeps the name unique when the same config runs
/// twice within a second.
pub fn create_run_dir(config: &RunConfig) -> Result<PathBuf, ConfigError> {
    let rendered = config.to_toml();
    let digest = &config.digest()[..8];
    let seconds = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    fs::create_dir_all(&config.out).map_err(|source| ConfigError::Io {
        path: config.out.display().to_string(),
        source,
    })?;

    let mut attempt = 0u32;
    let dir = loop {
        let name = if attempt == 0 {
            format!("{seconds}-{digest}")
        } else {
            format!("{seconds}-{digest}-{attempt}")
        };
        let candidate = config.out.join(name);
        match fs::create_dir(&candidate) {
            Ok(()) => break candidate,
            Err(err) if err.kind() == std::io::ErrorKind::AlreadyExists => attempt += 1,
            Err(source) => {
                return Err(ConfigError::Io {
                    path: candidate.display().to_string(),
                    source,
                })
            }
        }
    };

    fs::write(dir.join("config.toml"), rendered).map_err(|source| ConfigError::Io {
        path: dir.join("config.toml").display().to_string(),
        source,
    })?;
    Ok(dir)
}
