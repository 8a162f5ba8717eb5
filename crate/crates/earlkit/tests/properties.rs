//! Property tests for the invariants the rest of the system leans on:
//! parser totality, label normalization idempotence, cosine geometry, and
//! metric partition identities.

use std::collections::BTreeMap;

use proptest::prelude::*;

use earlkit::backends::Embedding;
use earlkit::baseline::{classify_zero_shot, cosine_similarity, similarity_scores};
use earlkit::dataset::{sample_few_shot, BBox, Dataset, ImageRecord, ObjectRegion};
use earlkit::evaluator::{score_earl, GoldView};
use earlkit::ontology::OTHER_LABEL;
use earlkit::pipeline::{normalize_label, parse_labels, Prediction, PredictionSet, RunMetadata};
use earlkit::templates::{normalize_whitespace, PromptMode};

const ROLE_POOL: &[&str] = &[
    "Attacker",
    "Target",
    "Instrument",
    "Agent",
    "Person",
    "Vehicle",
    "Artifact",
];

fn vocabulary_strategy() -> impl Strategy<Value = Vec<String>> {
    proptest::sample::subsequence(ROLE_POOL.to_vec(), 1..=ROLE_POOL.len())
        .prop_map(|names| names.into_iter().map(String::from).collect())
}

fn embedding_strategy(dim: usize) -> impl Strategy<Value = Embedding> {
    proptest::collection::vec(-10.0f64..10.0, dim).prop_map(Embedding::new)
}

fn nonzero_embedding_strategy(dim: usize) -> impl Strategy<Value = Embedding> {
    embedding_strategy(dim).prop_filter("needs a nonzero norm", |e| {
        e.values.iter().any(|v| v.abs() > 1e-6)
    })
}

/// Two same-dimension nonzero vectors of a random dimension.
fn embedding_pair_strategy() -> impl Strategy<Value = (Embedding, Embedding)> {
    (1usize..=64).prop_flat_map(|dim| {
        (nonzero_embedding_strategy(dim), nonzero_embedding_strategy(dim))
    })
}

/// A query plus a non-empty list of named templates, all same-dimension.
fn classification_case_strategy() -> impl Strategy<Value = (Embedding, Vec<Embedding>)> {
    (2usize..=16, 1usize..=6).prop_flat_map(|(dim, count)| {
        (
            nonzero_embedding_strategy(dim),
            proptest::collection::vec(nonzero_embedding_strategy(dim), count),
        )
    })
}

proptest! {
    // ======================================================================
    // Parsing
    // ======================================================================

    /// Any input whatsoever yields exactly the expected number of labels,
    /// every one of them either a vocabulary name or the abstention label.
    #[test]
    fn parser_is_total_over_arbitrary_input(
        response in "(?s).{0,400}",
        expected in 1usize..=8,
        vocabulary in vocabulary_strategy(),
    ) {
        let parsed = parse_labels(&response, expected, &vocabulary);
        prop_assert_eq!(parsed.labels.len(), expected);
        for label in &parsed.labels {
            prop_assert!(
                label == OTHER_LABEL || vocabulary.contains(label),
                "label {:?} escaped the vocabulary",
                label
            );
        }
    }

    /// A canonical answer block parses back to exactly the roles it states.
    #[test]
    fn canonical_answer_blocks_round_trip(
        assignment in proptest::collection::vec(0usize..ROLE_POOL.len(), 1..=8),
    ) {
        let vocabulary: Vec<String> = ROLE_POOL.iter().map(|s| s.to_string()).collect();
        let roles: Vec<String> = assignment.iter().map(|&i| vocabulary[i].clone()).collect();
        let response = roles
            .iter()
            .enumerate()
            .map(|(index, role)| format!("Argument Role of Object {}: {role}", index + 1))
            .collect::<Vec<_>>()
            .join("\n");
        let parsed = parse_labels(&response, roles.len(), &vocabulary);
        prop_assert_eq!(parsed.labels, roles);
        prop_assert!(parsed.warnings.is_empty());
    }

    /// Normalizing twice is the same as normalizing once, and the output
    /// is always canonical.
    #[test]
    fn label_normalization_is_idempotent(
        raw in ".{0,60}",
        vocabulary in vocabulary_strategy(),
    ) {
        let once = normalize_label(&raw, &vocabulary);
        let twice = normalize_label(&once, &vocabulary);
        prop_assert_eq!(&twice, &once);
        prop_assert!(once == OTHER_LABEL || vocabulary.contains(&once));
    }

    /// Whitespace normalization reaches a fixed point after one pass.
    #[test]
    fn whitespace_normalization_is_idempotent(text in "(?s).{0,300}") {
        let once = normalize_whitespace(&text);
        prop_assert_eq!(normalize_whitespace(&once), once);
    }

    // ======================================================================
    // Similarity geometry
    // ======================================================================

    /// Cosine is symmetric bit-for-bit, clamped to [-1, 1], and maximal on
    /// the diagonal.
    #[test]
    fn cosine_is_symmetric_and_bounded((u, v) in embedding_pair_strategy()) {
        let uv = cosine_similarity(&u, &v).unwrap();
        let vu = cosine_similarity(&v, &u).unwrap();
        prop_assert_eq!(uv, vu);
        prop_assert!((-1.0..=1.0).contains(&uv));
        prop_assert!(cosine_similarity(&u, &u).unwrap() > 0.999_999);
    }

    /// Positive scaling moves the cosine by float dust at most, so rankings
    /// survive normalization differences between embedding providers.
    #[test]
    fn scaling_leaves_cosine_nearly_fixed(
        values in proptest::collection::vec(-10.0f64..10.0, 2..=32),
        other in proptest::collection::vec(-10.0f64..10.0, 32),
        scale in 0.001f64..1000.0,
    ) {
        prop_assume!(values.iter().any(|v| v.abs() > 1e-3));
        let dim = values.len();
        prop_assume!(other[..dim].iter().any(|v| v.abs() > 1e-3));
        let u = Embedding::new(values.clone());
        let v = Embedding::new(other[..dim].to_vec());
        let scaled = Embedding::new(values.iter().map(|a| a * scale).collect());
        let base = cosine_similarity(&u, &v).unwrap();
        let moved = cosine_similarity(&scaled, &v).unwrap();
        prop_assert!((base - moved).abs() < 1e-9, "{base} vs {moved}");
    }

    /// The classifier returns the lowest-index template among the maxima,
    /// including when exact duplicates force a tie.
    #[test]
    fn classification_picks_the_first_maximum(
        (query, vectors) in classification_case_strategy(),
        duplicate in any::<bool>(),
    ) {
        let mut templates: Vec<(String, Embedding)> = vectors
            .into_iter()
            .enumerate()
            .map(|(index, vector)| (format!("name-{index}"), vector))
            .collect();
        let count = templates.len();
        if duplicate && count >= 2 {
            templates[count - 1].1 = templates[0].1.clone();
        }
        let chosen = classify_zero_shot(&query, &templates).unwrap();
        let scores = similarity_scores(&query, &templates).unwrap();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let first_max = scores.iter().position(|&s| s == max).unwrap();
        prop_assert_eq!(chosen, templates[first_max].0.clone());
    }

    // ======================================================================
    // Metrics
    // ======================================================================

    /// Per-event buckets partition the overall counts exactly.
    #[test]
    fn per_event_counts_partition_the_overall_counts(
        layout in proptest::collection::vec((0usize..4, 1usize..=4), 1..=6),
        choices in proptest::collection::vec(0u8..4, 24),
    ) {
        let event_names = ["Conflict.Attack", "Justice.ArrestJail", "Movement.Transport", "Contact.Meet"];
        let mut images = Vec::new();
        let mut predictions = Vec::new();
        let mut choice_cursor = 0;
        for (image_index, (event_choice, object_count)) in layout.iter().enumerate() {
            let image_id = format!("img-{image_index}");
            let mut objects = Vec::new();
            for object_index in 0..*object_count {
                let object_id = format!("obj-{object_index}");
                let gold = ROLE_POOL[(image_index + object_index) % ROLE_POOL.len()];
                let choice = choices[choice_cursor % choices.len()];
                choice_cursor += 1;
                let predicted = match choice {
                    0 => Some(gold.to_string()),
                    1 => Some(ROLE_POOL[(image_index + object_index + 1) % ROLE_POOL.len()].to_string()),
                    2 => Some(OTHER_LABEL.to_string()),
                    _ => None,
                };
                if let Some(role) = predicted {
                    predictions.push(Prediction {
                        image_id: image_id.clone(),
                        object_id: object_id.clone(),
                        predicted_role: role,
                        raw_response: String::new(),
                        method: "genearl".into(),
                        shots: 0,
                    });
                }
                objects.push(ObjectRegion {
                    id: object_id,
                    bbox: BBox::from([0.0, 0.0, 1.0, 1.0]),
                    gold_role: Some(gold.to_string()),
                });
            }
            images.push(ImageRecord {
                id: image_id,
                path: format!("img-{image_index}.png"),
                event_name: event_names[*event_choice].to_string(),
                objects,
            });
        }

        let dataset = Dataset { images };
        let set = PredictionSet {
            metadata: RunMetadata {
                method: "genearl".into(),
                shots: 0,
                seed: 0,
                mode: PromptMode::Full,
                ontology: "prop".into(),
                backends: BTreeMap::new(),
                exemplar_images: Vec::new(),
                include_exemplars_in_eval: false,
                timestamp_unix: 0,
            },
            predictions,
            event_predictions: None,
            warnings: Vec::new(),
        };
        let gold = GoldView::from_dataset(&dataset);
        let report = score_earl(&set, &gold).unwrap();

        let gold_sum: usize = report.per_event.values().map(|s| s.gold_total).sum();
        let predicted_sum: usize = report.per_event.values().map(|s| s.predicted).sum();
        let correct_sum: usize = report.per_event.values().map(|s| s.correct).sum();
        prop_assert_eq!(gold_sum, report.overall.gold_total);
        prop_assert_eq!(predicted_sum, report.overall.predicted);
        prop_assert_eq!(correct_sum, report.overall.correct);
        prop_assert!(report.overall.correct <= report.overall.predicted);
        prop_assert!(report.overall.correct <= report.overall.gold_total);

        // Every image event with at least one gold object gets a bucket.
        for image in &dataset.images {
            prop_assert!(report.per_event.contains_key(&image.event_name));
        }
    }

    // ======================================================================
    // Sampling
    // ======================================================================

    /// Exemplar draws are distinct, seeded, and order-stable.
    #[test]
    fn few_shot_sampling_is_deterministic_and_without_replacement(
        image_count in 1usize..=12,
        k_fraction in 0u8..=100,
        seed in any::<u64>(),
    ) {
        let images: Vec<ImageRecord> = (0..image_count)
            .map(|index| ImageRecord {
                id: format!("img-{index}"),
                path: format!("img-{index}.png"),
                event_name: "Conflict.Attack".into(),
                objects: vec![ObjectRegion {
                    id: "obj-0".into(),
                    bbox: BBox::from([0.0, 0.0, 1.0, 1.0]),
                    gold_role: Some("Attacker".into()),
                }],
            })
            .collect();
        let dataset = Dataset { images };
        let k = (k_fraction as usize * image_count) / 100;

        let first = sample_few_shot(&dataset, k, seed).unwrap();
        let second = sample_few_shot(&dataset, k, seed).unwrap();
        prop_assert_eq!(first.len(), k);

        let first_ids: Vec<&str> = first.iter().map(|e| e.image.id.as_str()).collect();
        let second_ids: Vec<&str> = second.iter().map(|e| e.image.id.as_str()).collect();
        prop_assert_eq!(&first_ids, &second_ids);

        let mut unique = first_ids.clone();
        unique.sort_unstable();
        unique.dedup();
        prop_assert_eq!(unique.len(), k, "sampling must be without replacement");
    }
}
