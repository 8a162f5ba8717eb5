//! The two-stage labeling pipeline and its single-stage variants.
//!
//! Stage one prompts a generative vision-language model for an image caption
//! and per-object role descriptions; stage two batches one image's
//! descriptions into a single language-model call and parses one role per
//! object. The single-stage variants label straight from the multimodal
//! prompt (`direct-gvlm`) or score candidate roles one object at a time
//! (`alpaca`). Generative event detection reuses stage one's captions.
//!
//! Work is dispatched per image batch with bounded parallelism; results are
//! reassembled in dataset order, so output is deterministic for
//! deterministic backends regardless of scheduling.

mod parse;

pub use parse::{normalize_label, parse_labels, ParsedLabels};

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{prompt_digest_multimodal, BackendError, ModelBackend};
use crate::dataset::{
    build_instances, group_by_image, sample_few_shot, Dataset, DatasetError, ExemplarImage,
    ImageBatch, ImageRecord, Instance,
};
use crate::ontology::{role_definition_block, Ontology, OTHER_LABEL};
use crate::templates::{PromptMode, SolvedExemplar, TemplateError, TemplateSet};

/// Event name reported when detection cannot map a response onto the
/// ontology. Ontologies should avoid naming a real event this.
pub const UNKNOWN_EVENT: &str = "Unknown";

/// Placeholder description recorded when the vision model fails on one
/// object; the batch still goes out so the other objects get labeled.
pub const DESCRIPTION_UNAVAILABLE: &str = "(description unavailable)";

// ===================================================================
// Run artifacts
// ===================================================================

/// One whole-image caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub text: String,
    pub prompt_digest: String,
}

/// One object's generated role description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionRecord {
    pub image_id: String,
    pub object_id: String,
    pub mode: PromptMode,
    pub text: String,
    pub prompt_digest: String,
    /// Set when the backend failed and `text` is a placeholder.
    pub failed: bool,
}

/// One object's predicted argument role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    pub object_id: String,
    pub predicted_role: String,
    /// Excerpt of the raw model output the label was parsed from.
    pub raw_response: String,
    pub method: String,
    pub shots: usize,
}

/// Reproducibility metadata carried by every run output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub method: String,
    pub shots: usize,
    pub seed: u64,
    pub mode: PromptMode,
    pub ontology: String,
    /// Capability name to backend identity.
    pub backends: BTreeMap<String, String>,
    /// Images consumed as in-context exemplars, in draw order.
    pub exemplar_images: Vec<String>,
    pub include_exemplars_in_eval: bool,
    pub timestamp_unix: u64,
}

/// The canonical run output: per-object predictions plus metadata, with
/// optional per-image event predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub metadata: RunMetadata,
    pub predictions: Vec<Prediction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_predictions: Option<BTreeMap<String, String>>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl PredictionSet {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("prediction sets serialize")
    }

    pub fn from_json(text: &str) -> Result<PredictionSet, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Serialization with the timestamp zeroed, for comparing reruns.
    pub fn canonical_json(&self) -> String {
        let mut copy = self.clone();
        copy.metadata.timestamp_unix = 0;
        serde_json::to_string_pretty(&copy).expect("prediction sets serialize")
    }

    pub fn prediction(&self, image_id: &str, object_id: &str) -> Option<&Prediction> {
        self.predictions
            .iter()
            .find(|p| p.image_id == image_id && p.object_id == object_id)
    }
}

/// Failures that abort a run. Partial failures do not: they surface as
/// warnings in the [`PredictionSet`].
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{context}: {source}")]
    Backend {
        context: String,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{0}")]
    Validation(String),
    #[error("missing embeddings for {} keys: {}", keys.len(), keys.join(", "))]
    MissingEmbeddings { keys: Vec<String> },
    #[error("all {units} work units failed; first failure: {first}")]
    TotalFailure { units: usize, first: String },
}

// ===================================================================
// Run context
// ===================================================================

/// Everything a labeling method needs to execute, prepared by the caller:
/// loaded data, narrowed ontology, templates, and whichever backends the
/// method requires.
pub struct RunContext<'a> {
    pub dataset: &'a Dataset,
    pub ontology: &'a Ontology,
    pub templates: &'a TemplateSet,
    pub gvlm: Option<&'a dyn ModelBackend>,
    pub llm: Option<&'a dyn ModelBackend>,
    pub scorer: Option<&'a dyn ModelBackend>,
    pub embedder: Option<&'a dyn ModelBackend>,
    pub shots: usize,
    pub seed: u64,
    pub mode: PromptMode,
    pub parallelism: usize,
    pub include_exemplars_in_eval: bool,
}

impl<'a> RunContext<'a> {
    pub fn new(
        dataset: &'a Dataset,
        ontology: &'a Ontology,
        templates: &'a TemplateSet,
    ) -> RunContext<'a> {
        RunContext {
            dataset,
            ontology,
            templates,
            gvlm: None,
            llm: None,
            scorer: None,
            embedder: None,
            shots: 0,
            seed: 0,
            mode: PromptMode::Full,
            parallelism: 1,
            include_exemplars_in_eval: false,
        }
    }

    pub fn require_gvlm(&self) -> Result<&'a dyn ModelBackend, PipelineError> {
        self.gvlm
            .ok_or_else(|| PipelineError::Validation("this method requires a gvlm backend".into()))
    }

    pub fn require_llm(&self) -> Result<&'a dyn ModelBackend, PipelineError> {
        self.llm
            .ok_or_else(|| PipelineError::Validation("this method requires an llm backend".into()))
    }

    pub fn require_scorer(&self) -> Result<&'a dyn ModelBackend, PipelineError> {
        self.scorer.ok_or_else(|| {
            PipelineError::Validation("this method requires a scoring backend".into())
        })
    }

    pub fn require_embedder(&self) -> Result<&'a dyn ModelBackend, PipelineError> {
        self.embedder.ok_or_else(|| {
            PipelineError::Validation("this method requires an embedding backend".into())
        })
    }

    fn backend_ids(&self) -> BTreeMap<String, String> {
        let mut ids = BTreeMap::new();
        if let Some(b) = self.gvlm {
            ids.insert("gvlm".to_string(), b.id());
        }
        if let Some(b) = self.llm {
            ids.insert("llm".to_string(), b.id());
        }
        if let Some(b) = self.scorer {
            ids.insert("scorer".to_string(), b.id());
        }
        if let Some(b) = self.embedder {
            ids.insert("embedder".to_string(), b.id());
        }
        ids
    }

    pub(crate) fn metadata(&self, method: &str, exemplar_images: Vec<String>) -> RunMetadata {
        RunMetadata {
            method: method.to_string(),
            shots: self.shots,
            seed: self.seed,
            mode: self.mode,
            ontology: self.ontology.name.clone(),
            backends: self.backend_ids(),
            exemplar_images,
            include_exemplars_in_eval: self.include_exemplars_in_eval,
            timestamp_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }
}

/// Applies `work` to every item with at most `parallelism` worker threads,
/// returning results in input order.
pub(crate) fn parallel_map<T, R, F>(items: &[T], parallelism: usize, work: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let workers = parallelism.max(1).min(items.len());
    if workers <= 1 {
        return items
            .iter()
            .enumerate()
            .map(|(index, item)| work(index, item))
            .collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = (0..items.len()).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::Relaxed);
                if index >= items.len() {
                    break;
                }
                let result = work(index, &items[index]);
                *slots[index].lock().unwrap() = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .unwrap()
                .expect("every work unit produces a result")
        })
        .collect()
}

/// First 500 characters of a response, kept for audit in predictions.
fn excerpt(text: &str) -> String {
    const LIMIT: usize = 500;
    if text.chars().count() <= LIMIT {
        return text.to_string();
    }
    let cut: String = text.chars().take(LIMIT).collect();
    format!("{cut}...")
}

fn render_scores(candidates: &[String], scores: &[f64]) -> String {
    candidates
        .iter()
        .zip(scores)
        .map(|(name, score)| format!("{name}={score}"))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Index of the highest score. Ties resolve to the lowest index; NaN scores
/// never win. `None` when no score is comparable.
pub fn argmax_lowest_index(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (index, &score) in scores.iter().enumerate() {
        if score.is_nan() {
            continue;
        }
        match best {
            None => best = Some((index, score)),
            Some((_, top)) if score > top => best = Some((index, score)),
            _ => {}
        }
    }
    best.map(|(index, _)| index)
}

// ===================================================================
// Stage operations
// ===================================================================

/// Captions every image, in order. A backend failure aborts with the image
/// id attached; callers that want partial progress drive batches themselves.
pub fn caption_images(
    images: &[ImageRecord],
    gvlm: &dyn ModelBackend,
    templates: &TemplateSet,
    parallelism: usize,
) -> Result<Vec<CaptionRecord>, PipelineError> {
    let results = parallel_map(images, parallelism, |_, image| {
        caption_one(image, gvlm, templates)
    });
    results.into_iter().collect()
}

fn caption_one(
    image: &ImageRecord,
    gvlm: &dyn ModelBackend,
    templates: &TemplateSet,
) -> Result<CaptionRecord, PipelineError> {
    let prompt = templates.render_image_caption_prompt(image);
    let prompt_digest = prompt_digest_multimodal(&prompt);
    let text = gvlm
        .generate(&prompt)
        .map_err(|source| PipelineError::Backend {
            context: format!("captioning image {:?}", image.id),
            source,
        })?;
    Ok(CaptionRecord {
        image_id: image.id.clone(),
        text,
        prompt_digest,
    })
}

/// Generates one role description per instance, one object at a time, in
/// instance order. Failures are recorded on the record (placeholder text,
/// `failed` flag) and never abort the pass.
pub fn describe_objects(
    instances: &[Instance],
    gvlm: &dyn ModelBackend,
    templates: &TemplateSet,
    mode: PromptMode,
    parallelism: usize,
) -> Vec<DescriptionRecord> {
    parallel_map(instances, parallelism, |_, instance| {
        let role_block = role_definition_block(&instance.event);
        let prompt = templates.render_gvlm_description_prompt(instance, mode, &role_block);
        let prompt_digest = prompt_digest_multimodal(&prompt);
        let (text, failed) = match gvlm.generate(&prompt) {
            Ok(text) if !text.trim().is_empty() => (text, false),
            Ok(_) => (DESCRIPTION_UNAVAILABLE.to_string(), true),
            Err(error) => {
                log::warn!(
                    "description failed for {}/{}: {error}",
                    instance.image_id,
                    instance.object_id
                );
                (DESCRIPTION_UNAVAILABLE.to_string(), true)
            }
        };
        DescriptionRecord {
            image_id: instance.image_id.clone(),
            object_id: instance.object_id.clone(),
            mode,
            text,
            prompt_digest,
            failed,
        }
    })
}

/// Labels one image's objects with a single chat call. Returns the
/// predictions in object order plus any parse warnings.
pub fn label_batch(
    batch: &ImageBatch,
    caption: &str,
    descriptions: &[String],
    exemplars: &[SolvedExemplar],
    llm: &dyn ModelBackend,
    templates: &TemplateSet,
) -> Result<(Vec<Prediction>, Vec<String>), PipelineError> {
    assert_eq!(
        descriptions.len(),
        batch.instances.len(),
        "one description per batched object"
    );
    let role_block = role_definition_block(&batch.event);
    let prompt =
        templates.render_llm_labeling_prompt(caption, &batch.event, &role_block, descriptions, exemplars);
    let response = llm.chat(&prompt).map_err(|source| PipelineError::Backend {
        context: format!("labeling image {:?}", batch.image_id),
        source,
    })?;
    let parsed = parse_labels(&response, prompt.expected_object_count, &prompt.role_vocabulary);
    let warnings = parsed
        .warnings
        .into_iter()
        .map(|warning| format!("image {}: {warning}", batch.image_id))
        .collect();
    let predictions = batch
        .instances
        .iter()
        .zip(parsed.labels)
        .map(|(instance, predicted_role)| Prediction {
            image_id: instance.image_id.clone(),
            object_id: instance.object_id.clone(),
            predicted_role,
            raw_response: excerpt(&response),
            method: "genearl".to_string(),
            shots: exemplars.len(),
        })
        .collect();
    Ok((predictions, warnings))
}

/// Labels one object by scoring every candidate role (abstention included)
/// under the single-object prompt.
pub fn label_alpaca(
    instance: &Instance,
    caption: &str,
    description: &str,
    scorer: &dyn ModelBackend,
    templates: &TemplateSet,
) -> Result<Prediction, PipelineError> {
    let role_block = role_definition_block(&instance.event);
    let prompt = templates.render_alpaca_prompt(caption, &instance.event, &role_block, description)?;
    let candidates = prompt.role_vocabulary.clone();
    let context = || {
        format!(
            "scoring object {:?} in image {:?}",
            instance.object_id, instance.image_id
        )
    };
    let scores = scorer
        .score_text(&prompt, &candidates)
        .map_err(|source| PipelineError::Backend {
            context: context(),
            source,
        })?;
    let best = pick_best(&candidates, &scores, &scorer.id(), context)?;
    Ok(Prediction {
        image_id: instance.image_id.clone(),
        object_id: instance.object_id.clone(),
        predicted_role: candidates[best].clone(),
        raw_response: render_scores(&candidates, &scores),
        method: "alpaca".to_string(),
        shots: 0,
    })
}

/// Labels one object straight from the multimodal prompt: candidate scoring
/// when the backend supports it, generation plus normalization otherwise.
pub fn label_direct_gvlm(
    instance: &Instance,
    gvlm: &dyn ModelBackend,
    templates: &TemplateSet,
) -> Result<Prediction, PipelineError> {
    let role_block = role_definition_block(&instance.event);
    let prompt = templates.render_gvlm_direct_earl_prompt(instance, &role_block);
    let mut candidates = instance.event.role_names();
    candidates.push(OTHER_LABEL.to_string());
    let context = || {
        format!(
            "labeling object {:?} in image {:?}",
            instance.object_id, instance.image_id
        )
    };
    let (predicted_role, raw_response) = match gvlm.score_multimodal(&prompt, &candidates) {
        Ok(scores) => {
            let best = pick_best(&candidates, &scores, &gvlm.id(), context)?;
            (candidates[best].clone(), render_scores(&candidates, &scores))
        }
        Err(BackendError::Unsupported { .. }) => {
            let response = gvlm
                .generate(&prompt)
                .map_err(|source| PipelineError::Backend {
                    context: context(),
                    source,
                })?;
            let label = normalize_label(&response, &instance.event.role_names());
            (label, excerpt(&response))
        }
        Err(source) => {
            return Err(PipelineError::Backend {
                context: context(),
                source,
            })
        }
    };
    Ok(Prediction {
        image_id: instance.image_id.clone(),
        object_id: instance.object_id.clone(),
        predicted_role,
        raw_response,
        method: "direct-gvlm".to_string(),
        shots: 0,
    })
}

fn pick_best(
    candidates: &[String],
    scores: &[f64],
    backend_id: &str,
    context: impl Fn() -> String,
) -> Result<usize, PipelineError> {
    if scores.len() != candidates.len() {
        return Err(PipelineError::Backend {
            context: context(),
            source: BackendError::Contract {
                backend: backend_id.to_string(),
                message: format!(
                    "returned {} scores for {} candidates",
                    scores.len(),
                    candidates.len()
                ),
            },
        });
    }
    argmax_lowest_index(scores).ok_or_else(|| {
        PipelineError::Backend {
            context: context(),
            source: BackendError::Contract {
                backend: backend_id.to_string(),
                message: "no comparable candidate score".into(),
            },
        }
    })
}

/// Predicts the event type for one caption. Responses that map onto no
/// ontology event yield [`UNKNOWN_EVENT`].
pub fn detect_event_generative(
    caption: &str,
    ontology: &Ontology,
    llm: &dyn ModelBackend,
    templates: &TemplateSet,
) -> Result<String, PipelineError> {
    let prompt = templates.render_event_detection_prompt(caption, ontology);
    let response = llm.chat(&prompt).map_err(|source| PipelineError::Backend {
        context: "detecting event from caption".to_string(),
        source,
    })?;
    let normalized = normalize_label(&response, &prompt.role_vocabulary);
    if normalized == OTHER_LABEL {
        Ok(UNKNOWN_EVENT.to_string())
    } else {
        Ok(normalized)
    }
}

// ===================================================================
// Whole-run drivers
// ===================================================================

/// Fully captions and describes each drawn exemplar so it can be pasted
/// into labeling prompts as a solved instance. Exemplar failures are fatal:
/// a run with corrupted context is not worth completing.
fn prepare_exemplars(
    raw: &[ExemplarImage],
    ctx: &RunContext,
    gvlm: &dyn ModelBackend,
) -> Result<Vec<SolvedExemplar>, PipelineError> {
    let mut solved = Vec::with_capacity(raw.len());
    for exemplar in raw {
        let image = &exemplar.image;
        let event = ctx.ontology.event(&image.event_name).ok_or_else(|| {
            PipelineError::Validation(format!(
                "exemplar image {:?} names event {:?} outside the ontology",
                image.id, image.event_name
            ))
        })?;
        let role_block = role_definition_block(event);

        let mini = Dataset {
            images: vec![image.clone()],
        };
        let instances = build_instances(&mini, ctx.ontology);
        if instances.len() != image.objects.len() || instances.is_empty() {
            return Err(PipelineError::Validation(format!(
                "exemplar image {:?} yields no usable labeling instances",
                image.id
            )));
        }

        let caption = match &exemplar.caption {
            Some(text) => text.clone(),
            None => caption_one(image, gvlm, ctx.templates)?.text,
        };
        let descriptions = match &exemplar.descriptions {
            Some(texts) => texts.clone(),
            None => {
                let mut texts = Vec::with_capacity(instances.len());
                for instance in &instances {
                    let prompt = ctx
                        .templates
                        .render_gvlm_description_prompt(instance, ctx.mode, &role_block);
                    let text =
                        gvlm.generate(&prompt)
                            .map_err(|source| PipelineError::Backend {
                                context: format!(
                                    "describing exemplar object {:?} in image {:?}",
                                    instance.object_id, instance.image_id
                                ),
                                source,
                            })?;
                    texts.push(text);
                }
                texts
            }
        };
        let gold_roles = instances
            .iter()
            .map(|instance| {
                instance
                    .gold_role
                    .clone()
                    .expect("exemplar labels were verified at sampling")
            })
            .collect();

        solved.push(SolvedExemplar {
            caption,
            event_name: event.name.clone(),
            role_block,
            descriptions,
            gold_roles,
        });
    }
    Ok(solved)
}

enum BatchOutcome {
    Done {
        predictions: Vec<Prediction>,
        warnings: Vec<String>,
    },
    Failed {
        unit: String,
        error: String,
    },
}

fn settle(
    outcomes: Vec<BatchOutcome>,
    total_units: usize,
) -> Result<(Vec<Prediction>, Vec<String>), PipelineError> {
    let mut predictions = Vec::new();
    let mut warnings = Vec::new();
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            BatchOutcome::Done {
                predictions: batch,
                warnings: notes,
            } => {
                predictions.extend(batch);
                warnings.extend(notes);
            }
            BatchOutcome::Failed { unit, error } => {
                warnings.push(format!("{unit} failed: {error}"));
                failures.push(error);
            }
        }
    }
    if total_units > 0 && failures.len() == total_units {
        return Err(PipelineError::TotalFailure {
            units: total_units,
            first: failures[0].clone(),
        });
    }
    Ok((predictions, warnings))
}

/// Runs the full two-stage pipeline over the context's dataset.
///
/// Exemplars are drawn first with the seeded sampler and prepared with the
/// same prompt mode as the queries; unless the context says otherwise,
/// exemplar images are removed from the query pool. Each remaining image is
/// an independent work unit: caption, describe each object, one labeling
/// call. Failed units surface as warnings; a run where every unit failed is
/// an error.
pub fn run_earl(ctx: &RunContext) -> Result<PredictionSet, PipelineError> {
    let gvlm = ctx.require_gvlm()?;
    let llm = ctx.require_llm()?;

    let drawn = sample_few_shot(ctx.dataset, ctx.shots, ctx.seed)?;
    let exemplar_ids: Vec<String> = drawn.iter().map(|e| e.image.id.clone()).collect();
    let exemplars = prepare_exemplars(&drawn, ctx, gvlm)?;

    let mut instances = build_instances(ctx.dataset, ctx.ontology);
    if !ctx.include_exemplars_in_eval {
        let excluded: BTreeSet<&String> = exemplar_ids.iter().collect();
        instances.retain(|instance| !excluded.contains(&instance.image_id));
    }
    let batches = group_by_image(instances);

    let outcomes = parallel_map(&batches, ctx.parallelism, |_, batch| {
        let image = ctx
            .dataset
            .image(&batch.image_id)
            .expect("batches are derived from this dataset");
        let caption = match caption_one(image, gvlm, ctx.templates) {
            Ok(record) => record,
            Err(error) => {
                return BatchOutcome::Failed {
                    unit: format!("image {}", batch.image_id),
                    error: error.to_string(),
                }
            }
        };
        let records = describe_objects(&batch.instances, gvlm, ctx.templates, ctx.mode, 1);
        let mut warnings: Vec<String> = records
            .iter()
            .filter(|record| record.failed)
            .map(|record| {
                format!(
                    "image {} object {}: description unavailable",
                    record.image_id, record.object_id
                )
            })
            .collect();
        let descriptions: Vec<String> = records.into_iter().map(|record| record.text).collect();
        match label_batch(batch, &caption.text, &descriptions, &exemplars, llm, ctx.templates) {
            Ok((predictions, parse_warnings)) => {
                warnings.extend(parse_warnings);
                BatchOutcome::Done {
                    predictions,
                    warnings,
                }
            }
            Err(error) => BatchOutcome::Failed {
                unit: format!("image {}", batch.image_id),
                error: error.to_string(),
            },
        }
    });

    let total = batches.len();
    let (predictions, warnings) = settle(outcomes, total)?;
    Ok(PredictionSet {
        metadata: ctx.metadata("genearl", exemplar_ids),
        predictions,
        event_predictions: None,
        warnings,
    })
}

/// Runs single-stage multimodal labeling over every instance.
pub fn run_direct_gvlm(ctx: &RunContext) -> Result<PredictionSet, PipelineError> {
    let gvlm = ctx.require_gvlm()?;
    if ctx.shots != 0 {
        return Err(PipelineError::Validation(
            "direct-gvlm labeling is zero-shot only".into(),
        ));
    }
    let instances = build_instances(ctx.dataset, ctx.ontology);
    let outcomes = parallel_map(&instances, ctx.parallelism, |_, instance| {
        match label_direct_gvlm(instance, gvlm, ctx.templates) {
            Ok(prediction) => BatchOutcome::Done {
                predictions: vec![prediction],
                warnings: Vec::new(),
            },
            Err(error) => BatchOutcome::Failed {
                unit: format!("object {}/{}", instance.image_id, instance.object_id),
                error: error.to_string(),
            },
        }
    });
    let total = instances.len();
    let (predictions, warnings) = settle(outcomes, total)?;
    Ok(PredictionSet {
        metadata: ctx.metadata("direct-gvlm", Vec::new()),
        predictions,
        event_predictions: None,
        warnings,
    })
}

/// Runs caption + describe, then scores candidate roles one object at a
/// time. Objects whose description failed are skipped with a warning rather
/// than scored against a placeholder.
pub fn run_alpaca(ctx: &RunContext) -> Result<PredictionSet, PipelineError> {
    let gvlm = ctx.require_gvlm()?;
    let scorer = ctx.require_scorer()?;
    if ctx.shots != 0 {
        return Err(PipelineError::Validation(
            "alpaca labeling is zero-shot only".into(),
        ));
    }
    let batches = group_by_image(build_instances(ctx.dataset, ctx.ontology));
    let outcomes = parallel_map(&batches, ctx.parallelism, |_, batch| {
        let image = ctx
            .dataset
            .image(&batch.image_id)
            .expect("batches are derived from this dataset");
        let caption = match caption_one(image, gvlm, ctx.templates) {
            Ok(record) => record,
            Err(error) => {
                return BatchOutcome::Failed {
                    unit: format!("image {}", batch.image_id),
                    error: error.to_string(),
                }
            }
        };
        let records = describe_objects(&batch.instances, gvlm, ctx.templates, ctx.mode, 1);
        let mut predictions = Vec::new();
        let mut warnings = Vec::new();
        for (instance, record) in batch.instances.iter().zip(records) {
            if record.failed {
                warnings.push(format!(
                    "image {} object {}: skipped, description unavailable",
                    instance.image_id, instance.object_id
                ));
                continue;
            }
            match label_alpaca(instance, &caption.text, &record.text, scorer, ctx.templates) {
                Ok(prediction) => predictions.push(prediction),
                Err(error) => warnings.push(format!(
                    "image {} object {}: skipped, {error}",
                    instance.image_id, instance.object_id
                )),
            }
        }
        BatchOutcome::Done {
            predictions,
            warnings,
        }
    });
    let total = batches.len();
    let (predictions, warnings) = settle(outcomes, total)?;
    Ok(PredictionSet {
        metadata: ctx.metadata("alpaca", Vec::new()),
        predictions,
        event_predictions: None,
        warnings,
    })
}

/// Predicts one event per image: caption with the vision model, then map the
/// chat response onto the event vocabulary. Per-image failures surface as
/// warnings; a run where every image failed is an error.
pub fn run_event_detection(
    ctx: &RunContext,
) -> Result<(BTreeMap<String, String>, Vec<String>), PipelineError> {
    let gvlm = ctx.require_gvlm()?;
    let llm = ctx.require_llm()?;
    let results = parallel_map(&ctx.dataset.images, ctx.parallelism, |_, image| {
        let caption = caption_one(image, gvlm, ctx.templates)?;
        let event = detect_event_generative(&caption.text, ctx.ontology, llm, ctx.templates)?;
        Ok::<(String, String), PipelineError>((image.id.clone(), event))
    });
    let mut events = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut failures = 0usize;
    let mut first_failure = None;
    for (image, result) in ctx.dataset.images.iter().zip(results) {
        match result {
            Ok((image_id, event)) => {
                events.insert(image_id, event);
            }
            Err(error) => {
                failures += 1;
                let message = error.to_string();
                warnings.push(format!("image {}: detection failed: {message}", image.id));
                first_failure.get_or_insert(message);
            }
        }
    }
    if !ctx.dataset.images.is_empty() && failures == ctx.dataset.images.len() {
        return Err(PipelineError::TotalFailure {
            units: failures,
            first: first_failure.unwrap_or_default(),
        });
    }
    Ok((events, warnings))
}
