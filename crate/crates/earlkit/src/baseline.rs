//! Embedding-similarity zero-shot classification.
//!
//! Each candidate role (or event) is rendered into a template sentence whose
//! text embedding acts as a class prototype; an object region (or whole
//! image) is classified by the cosine-argmax over those prototypes. Stored
//! vectors are taken as-is and normalized inside the cosine, so externally
//! produced sidecar files need no preprocessing.

use thiserror::Error;

use crate::backends::{BackendError, Embedding, ModelBackend};
use crate::ontology::Ontology;
use crate::pipeline::{PipelineError, Prediction, PredictionSet, RunContext};

/// Numeric failures in similarity scoring.
#[derive(Debug, Error, PartialEq)]
pub enum SimilarityError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("zero-norm vector has no direction")]
    ZeroNorm,
    #[error("non-finite values in vector")]
    NonFinite,
    #[error("no candidate templates to score against")]
    NoCandidates,
}

/// Cosine of the angle between two vectors, clamped to [-1, 1] against
/// floating-point drift.
pub fn cosine_similarity(u: &Embedding, v: &Embedding) -> Result<f64, SimilarityError> {
    if u.dimension() != v.dimension() {
        return Err(SimilarityError::DimensionMismatch {
            left: u.dimension(),
            right: v.dimension(),
        });
    }
    if !u.is_finite() || !v.is_finite() {
        return Err(SimilarityError::NonFinite);
    }
    let mut dot = 0.0;
    let mut norm_u = 0.0;
    let mut norm_v = 0.0;
    for (a, b) in u.values.iter().zip(&v.values) {
        dot += a * b;
        norm_u += a * a;
        norm_v += b * b;
    }
    if norm_u == 0.0 || norm_v == 0.0 {
        return Err(SimilarityError::ZeroNorm);
    }
    Ok((dot / (norm_u.sqrt() * norm_v.sqrt())).clamp(-1.0, 1.0))
}

/// Scores a vector against every named template, in order.
pub fn similarity_scores(
    query: &Embedding,
    templates: &[(String, Embedding)],
) -> Result<Vec<f64>, SimilarityError> {
    templates
        .iter()
        .map(|(_, vector)| cosine_similarity(query, vector))
        .collect()
}

/// Argmax-by-cosine classification; ties resolve to the lowest template
/// index.
pub fn classify_zero_shot(
    query: &Embedding,
    templates: &[(String, Embedding)],
) -> Result<String, SimilarityError> {
    if templates.is_empty() {
        return Err(SimilarityError::NoCandidates);
    }
    let scores = similarity_scores(query, templates)?;
    let mut best = 0;
    for (index, score) in scores.iter().enumerate().skip(1) {
        if *score > scores[best] {
            best = index;
        }
    }
    Ok(templates[best].0.clone())
}

/// Event classification for a whole-image vector; identical mechanics to
/// [`classify_zero_shot`] with per-event templates.
pub fn detect_event_clip(
    image_vec: &Embedding,
    event_templates: &[(String, Embedding)],
) -> Result<String, SimilarityError> {
    classify_zero_shot(image_vec, event_templates)
}

/// Embeds each event's template sentence, in ontology order.
pub fn event_templates(
    ontology: &Ontology,
    templates: &crate::templates::TemplateSet,
    embedder: &dyn ModelBackend,
) -> Result<Vec<(String, Embedding)>, BackendError> {
    let sentences: Vec<String> = ontology
        .events
        .iter()
        .map(|event| templates.render_event_similarity_template(event))
        .collect();
    let vectors = embedder.embed_texts(&sentences)?;
    Ok(ontology
        .events
        .iter()
        .map(|event| event.name.clone())
        .zip(vectors)
        .collect())
}

/// Classifies every object in the dataset against its event's role
/// templates. Missing embeddings never abort object-by-object; they are
/// collected and reported as one error listing every missing key.
pub fn run_baseline(ctx: &RunContext) -> Result<PredictionSet, PipelineError> {
    let embedder = ctx.require_embedder()?;
    if ctx.shots != 0 {
        return Err(PipelineError::Validation(
            "the similarity baseline is zero-shot only".into(),
        ));
    }

    // One template set per event, rendered and embedded up front.
    let mut role_templates: Vec<(String, Vec<(String, Embedding)>)> = Vec::new();
    for event in &ctx.ontology.events {
        let sentences: Vec<String> = event
            .roles
            .iter()
            .map(|role| ctx.templates.render_similarity_template(role, event))
            .collect();
        let vectors = embedder
            .embed_texts(&sentences)
            .map_err(|source| PipelineError::Backend {
                context: format!("embedding role templates for event {:?}", event.name),
                source,
            })?;
        let pairs = event
            .roles
            .iter()
            .map(|role| role.name.clone())
            .zip(vectors)
            .collect();
        role_templates.push((event.name.clone(), pairs));
    }

    let instances = crate::dataset::build_instances(ctx.dataset, ctx.ontology);
    let mut predictions = Vec::with_capacity(instances.len());
    let mut missing = Vec::new();
    for instance in &instances {
        let vector = match embedder.embed_region(&instance.image_path, &instance.bbox) {
            Ok(vector) => vector,
            Err(BackendError::Input(_)) => {
                missing.push(format!("{}/{}", instance.image_id, instance.object_id));
                continue;
            }
            Err(source) => {
                return Err(PipelineError::Backend {
                    context: format!(
                        "embedding object {:?} in image {:?}",
                        instance.object_id, instance.image_id
                    ),
                    source,
                })
            }
        };
        let templates = &role_templates
            .iter()
            .find(|(name, _)| *name == instance.event.name)
            .expect("instances only reference ontology events")
            .1;
        let (predicted_role, score) = match classify_with_score(&vector, templates) {
            Ok(result) => result,
            Err(error) => {
                return Err(PipelineError::Validation(format!(
                    "scoring object {:?} in image {:?}: {error}",
                    instance.object_id, instance.image_id
                )))
            }
        };
        predictions.push(Prediction {
            image_id: instance.image_id.clone(),
            object_id: instance.object_id.clone(),
            predicted_role,
            raw_response: format!("cosine={score}"),
            method: "baseline".to_string(),
            shots: 0,
        });
    }
    if !missing.is_empty() {
        return Err(PipelineError::MissingEmbeddings { keys: missing });
    }

    Ok(PredictionSet {
        metadata: ctx.metadata("baseline", Vec::new()),
        predictions,
        event_predictions: None,
        warnings: Vec::new(),
    })
}

/// Predicts one event per image by cosine-argmax over event templates.
/// Missing image embeddings are aggregated like missing object embeddings.
pub fn run_clip_event_detection(
    ctx: &RunContext,
) -> Result<std::collections::BTreeMap<String, String>, PipelineError> {
    let embedder = ctx.require_embedder()?;
    let templates = event_templates(ctx.ontology, ctx.templates, embedder).map_err(|source| {
        PipelineError::Backend {
            context: "embedding event templates".into(),
            source,
        }
    })?;
    let mut events = std::collections::BTreeMap::new();
    let mut missing = Vec::new();
    for image in &ctx.dataset.images {
        let vector = match embedder.embed_image(&image.path) {
            Ok(vector) => vector,
            Err(BackendError::Input(_)) => {
                missing.push(image.id.clone());
                continue;
            }
            Err(source) => {
                return Err(PipelineError::Backend {
                    context: format!("embedding image {:?}", image.id),
                    source,
                })
            }
        };
        let event = detect_event_clip(&vector, &templates).map_err(|error| {
            PipelineError::Validation(format!("classifying image {:?}: {error}", image.id))
        })?;
        events.insert(image.id.clone(), event);
    }
    if !missing.is_empty() {
        return Err(PipelineError::MissingEmbeddings { keys: missing });
    }
    Ok(events)
}

fn classify_with_score(
    query: &Embedding,
    templates: &[(String, Embedding)],
) -> Result<(String, f64), SimilarityError> {
    if templates.is_empty() {
        return Err(SimilarityError::NoCandidates);
    }
    let scores = similarity_scores(query, templates)?;
    let mut best = 0;
    for (index, score) in scores.iter().enumerate().skip(1) {
        if *score > scores[best] {
            best = index;
        }
    }
    Ok((templates[best].0.clone(), scores[best]))
}
