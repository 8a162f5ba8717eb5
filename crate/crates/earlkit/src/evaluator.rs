//! Scoring of prediction sets against gold annotations.
//!
//! Scoring convention, stated in every report header: correctness is exact
//! role match (case-insensitive); a missing prediction counts as the
//! abstention label; abstention is never correct, it lowers recall but not
//! precision; precision/recall/F1 are micro-averaged over objects, and a
//! zero denominator yields 0 rather than an undefined value.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::ontology::OTHER_LABEL;
use crate::pipeline::{PredictionSet, RunMetadata};

/// One line of the convention statement embedded in every report.
pub const SCORING_CONVENTION: &str = "exact-match, micro-averaged; missing predictions count as \
     \"Other\"; \"Other\" is abstention: wrong against every gold role, excluded from the \
     precision denominator; zero denominators score 0";

/// Gold answers for the evaluated subset: per-object roles and per-image
/// events.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GoldView {
    /// `(image id, object id)` to gold role. Objects without a gold role are
    /// not scored.
    pub roles: BTreeMap<(String, String), String>,
    /// Image id to gold event name.
    pub events: BTreeMap<String, String>,
}

impl GoldView {
    /// Gold over the whole dataset.
    pub fn from_dataset(dataset: &Dataset) -> GoldView {
        let mut view = GoldView::default();
        for image in &dataset.images {
            view.events
                .insert(image.id.clone(), image.event_name.clone());
            for object in &image.objects {
                if let Some(role) = &object.gold_role {
                    view.roles
                        .insert((image.id.clone(), object.id.clone()), role.clone());
                }
            }
        }
        view
    }

    /// Gold restricted to what a run actually evaluated: images consumed as
    /// in-context exemplars are dropped unless the run kept them in the
    /// query pool.
    pub fn for_run(dataset: &Dataset, metadata: &RunMetadata) -> GoldView {
        let mut view = GoldView::from_dataset(dataset);
        if !metadata.include_exemplars_in_eval {
            for image_id in &metadata.exemplar_images {
                view.events.remove(image_id);
                view.roles.retain(|(image, _), _| image != image_id);
            }
        }
        view
    }

    pub fn gold_objects(&self) -> usize {
        self.roles.len()
    }
}

/// Micro-averaged metric block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub gold_total: usize,
    /// Predictions carrying a non-abstention role.
    pub predicted: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Scores {
    fn from_counts(gold_total: usize, predicted: usize, correct: usize) -> Scores {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(correct, predicted);
        let recall = ratio(correct, gold_total);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Scores {
            gold_total,
            predicted,
            correct,
            accuracy: ratio(correct, gold_total),
            precision,
            recall,
            f1,
        }
    }
}

/// Full scoring output: overall block, per-event partition, and the
/// convention it was computed under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub convention: String,
    pub overall: Scores,
    pub per_event: BTreeMap<String, Scores>,
    /// Fraction of images whose predicted event equals gold; present when
    /// the prediction set carried event predictions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_accuracy: Option<f64>,
    pub method: String,
    pub shots: usize,
}

/// Scoring failures.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction names unknown object {image}/{object}")]
    UnknownObject { image: String, object: String },
    #[error("objects {image}/{object} predicted more than once")]
    DuplicatePrediction { image: String, object: String },
}

/// Tally of one scored subset.
struct Tally {
    gold_total: usize,
    predicted: usize,
    correct: usize,
}

fn tally_roles(
    set: &PredictionSet,
    gold: &GoldView,
    event_gate: Option<&BTreeMap<String, String>>,
) -> Result<(Tally, BTreeMap<String, Tally>), EvalError> {
    let mut seen: BTreeMap<(String, String), &str> = BTreeMap::new();
    for prediction in &set.predictions {
        let key = (prediction.image_id.clone(), prediction.object_id.clone());
        if !gold.roles.contains_key(&key) {
            if gold.events.contains_key(&prediction.image_id) {
                // Known image, ungolded object: nothing to score against.
                log::warn!(
                    "prediction for ungolded object {}/{} skipped",
                    prediction.image_id,
                    prediction.object_id
                );
                continue;
            }
            return Err(EvalError::UnknownObject {
                image: prediction.image_id.clone(),
                object: prediction.object_id.clone(),
            });
        }
        if seen.insert(key, prediction.predicted_role.as_str()).is_some() {
            return Err(EvalError::DuplicatePrediction {
                image: prediction.image_id.clone(),
                object: prediction.object_id.clone(),
            });
        }
    }

    let mut overall = Tally {
        gold_total: 0,
        predicted: 0,
        correct: 0,
    };
    let mut per_event: BTreeMap<String, Tally> = BTreeMap::new();
    for ((image_id, object_id), gold_role) in &gold.roles {
        let event = gold
            .events
            .get(image_id)
            .cloned()
            .unwrap_or_else(|| "(unknown event)".to_string());
        let bucket = per_event.entry(event).or_insert(Tally {
            gold_total: 0,
            predicted: 0,
            correct: 0,
        });
        overall.gold_total += 1;
        bucket.gold_total += 1;

        let predicted_role = seen
            .get(&(image_id.clone(), object_id.clone()))
            .copied()
            .unwrap_or(OTHER_LABEL);
        if predicted_role.eq_ignore_ascii_case(OTHER_LABEL) {
            continue;
        }
        overall.predicted += 1;
        bucket.predicted += 1;

        let event_matches = match event_gate {
            Some(events) => events
                .get(image_id)
                .is_some_and(|predicted| {
                    gold.events
                        .get(image_id)
                        .is_some_and(|g| predicted.eq_ignore_ascii_case(g))
                }),
            None => true,
        };
        if event_matches && predicted_role.eq_ignore_ascii_case(gold_role) {
            overall.correct += 1;
            bucket.correct += 1;
        }
    }
    Ok((overall, per_event))
}

fn report_from_tallies(
    set: &PredictionSet,
    overall: Tally,
    per_event: BTreeMap<String, Tally>,
    event_accuracy: Option<f64>,
) -> MetricsReport {
    MetricsReport {
        convention: SCORING_CONVENTION.to_string(),
        overall: Scores::from_counts(overall.gold_total, overall.predicted, overall.correct),
        per_event: per_event
            .into_iter()
            .map(|(event, tally)| {
                (
                    event,
                    Scores::from_counts(tally.gold_total, tally.predicted, tally.correct),
                )
            })
            .collect(),
        event_accuracy,
        method: set.metadata.method.clone(),
        shots: set.metadata.shots,
    }
}

/// Scores role predictions against gold.
pub fn score_earl(set: &PredictionSet, gold: &GoldView) -> Result<MetricsReport, EvalError> {
    let (overall, per_event) = tally_roles(set, gold, None)?;
    Ok(report_from_tallies(set, overall, per_event, None))
}

/// Exact-match accuracy of per-image event predictions. Images without a
/// prediction count as wrong; the unknown-event marker never matches.
pub fn score_event_detection(
    event_predictions: &BTreeMap<String, String>,
    gold: &GoldView,
) -> f64 {
    if gold.events.is_empty() {
        return 0.0;
    }
    let correct = gold
        .events
        .iter()
        .filter(|(image_id, gold_event)| {
            event_predictions
                .get(*image_id)
                .is_some_and(|predicted| predicted.eq_ignore_ascii_case(gold_event))
        })
        .count();
    correct as f64 / gold.events.len() as f64
}

/// Combined detection + labeling scoring: a role prediction is correct only
/// when its image's predicted event is also correct. The prediction set must
/// carry event predictions.
pub fn score_combined(set: &PredictionSet, gold: &GoldView) -> Result<MetricsReport, EvalError> {
    let events = set.event_predictions.clone().unwrap_or_default();
    let (overall, per_event) = tally_roles(set, gold, Some(&events))?;
    let event_accuracy = score_event_detection(&events, gold);
    Ok(report_from_tallies(set, overall, per_event, Some(event_accuracy)))
}

/// Formats a report as an aligned-column console table.
pub fn render_table(report: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "method: {}   shots: {}\nconvention: {}\n\n",
        report.method, report.shots, report.convention
    ));
    let pct = |v: f64| format!("{:6.2}", v * 100.0);
    out.push_str(&format!(
        "{:<28} {:>6} {:>6} {:>6} {:>7} {:>7} {:>7} {:>7}\n",
        "event", "gold", "pred", "corr", "acc%", "prec%", "rec%", "f1%"
    ));
    for (event, scores) in &report.per_event {
        out.push_str(&format!(
            "{:<28} {:>6} {:>6} {:>6} {:>7} {:>7} {:>7} {:>7}\n",
            event,
            scores.gold_total,
            scores.predicted,
            scores.correct,
            pct(scores.accuracy),
            pct(scores.precision),
            pct(scores.recall),
            pct(scores.f1)
        ));
    }
    let overall = &report.overall;
    out.push_str(&format!(
        "{:<28} {:>6} {:>6} {:>6} {:>7} {:>7} {:>7} {:>7}\n",
        "overall",
        overall.gold_total,
        overall.predicted,
        overall.correct,
        pct(overall.accuracy),
        pct(overall.precision),
        pct(overall.recall),
        pct(overall.f1)
    ));
    if let Some(accuracy) = report.event_accuracy {
        out.push_str(&format!("event detection accuracy: {}\n", pct(accuracy)));
    }
    out
}
