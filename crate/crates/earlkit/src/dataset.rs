//! Image/bounding-box annotation ingestion, labeling instances, per-image
//! batches, and seeded exemplar sampling.
//!
//! A dataset document lists images, each with an event name and the object
//! regions to label. Images whose event is absent from the active ontology
//! are excluded (and counted) rather than rejected, so one annotation file
//! can serve differently narrowed ontologies.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::{EventType, Ontology};

/// Axis-aligned bounding box, top-left origin, pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox {
            x: v[0],
            y: v[1],
            width: v[2],
            height: v[3],
        }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.width, b.height]
    }
}

impl BBox {
    /// Canonical text form used in digests and lookup keys.
    pub fn key(&self) -> String {
        format!("{},{},{},{}", self.x, self.y, self.width, self.height)
    }
}

/// One annotated object region within an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRegion {
    pub id: String,
    pub bbox: BBox,
    /// Gold argument role, when annotated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_role: Option<String>,
}

/// One annotated image: locator, depicted event, and its object regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    /// Opaque locator passed through to backends; pixels are never decoded
    /// here.
    pub path: String,
    pub event_name: String,
    pub objects: Vec<ObjectRegion>,
}

/// A validated collection of image records.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub images: Vec<ImageRecord>,
}

impl Dataset {
    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn object_count(&self) -> usize {
        self.images.iter().map(|i| i.objects.len()).sum()
    }
}

/// Counts reported by dataset loading.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    /// Images retained after all exclusions.
    pub images: usize,
    /// Objects retained after all exclusions.
    pub objects: usize,
    /// Distinct event types among the retained images.
    pub events: usize,
    /// Images dropped because their event is absent from the ontology.
    pub excluded_images: usize,
    /// Objects dropped because their gold role is not a role of their
    /// image's event.
    pub excluded_objects: usize,
    /// Images dropped by the id manifest, when one was supplied.
    pub unlisted_images: usize,
    pub warnings: Vec<String>,
}

/// One labeling query: an object region in an event-depicting image together
/// with its candidate roles.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub image_id: String,
    pub image_path: String,
    pub object_id: String,
    /// Zero-based position of the object within its image's object list.
    pub object_index: usize,
    pub bbox: BBox,
    pub gold_role: Option<String>,
    /// The event as defined by the active ontology; its roles are the
    /// candidate vocabulary for this query.
    pub event: EventType,
}

/// A fully labeled image usable as an in-context example, with the caption
/// and per-object descriptions filled in once generated.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarImage {
    pub image: ImageRecord,
    pub caption: Option<String>,
    pub descriptions: Option<Vec<String>>,
}

/// Failures while loading, validating, or sampling a dataset.
#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read dataset {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed dataset document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid dataset: {0}")]
    Validation(String),
    #[error("cannot sample {requested} exemplar images from {available}")]
    SampleExhausted { requested: usize, available: usize },
    #[error("sampled image {image} has object {object} without a gold role")]
    UnlabeledExemplar { image: String, object: String },
}

#[derive(Debug, Deserialize)]
struct DatasetDocument {
    #[serde(default)]
    bbox_format: Option<String>,
    images: Vec<ImageDocument>,
}

#[derive(Debug, Deserialize)]
struct ImageDocument {
    id: String,
    path: String,
    event: String,
    #[serde(default)]
    objects: Vec<ObjectDocument>,
}

#[derive(Debug, Deserialize)]
struct ObjectDocument {
    id: String,
    bbox: [f64; 4],
    #[serde(default)]
    role: Option<String>,
}

/// Optional restrictions applied while loading.
#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// When set, only images whose id appears in the manifest are retained.
    pub image_manifest: Option<BTreeSet<String>>,
}

impl LoadOptions {
    /// Reads an id manifest: a JSON array of image id strings.
    pub fn with_manifest_file(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let ids: Vec<String> = serde_json::from_str(&text)?;
        Ok(LoadOptions {
            image_manifest: Some(ids.into_iter().collect()),
        })
    }
}

/// Loads a dataset file and validates it against `ontology`.
pub fn load_dataset(
    path: impl AsRef<Path>,
    ontology: &Ontology,
) -> Result<(Dataset, LoadReport), DatasetError> {
    load_dataset_with(path, ontology, &LoadOptions::default())
}

/// Loads a dataset file with explicit options.
pub fn load_dataset_with(
    path: impl AsRef<Path>,
    ontology: &Ontology,
    options: &LoadOptions,
) -> Result<(Dataset, LoadReport), DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text, ontology, options)
}

/// Parses dataset JSON text and validates it against `ontology`.
pub fn parse_dataset(
    text: &str,
    ontology: &Ontology,
    options: &LoadOptions,
) -> Result<(Dataset, LoadReport), DatasetError> {
    let document: DatasetDocument = serde_json::from_str(text)?;
    let xyxy = match document.bbox_format.as_deref() {
        None | Some("xywh") => false,
        Some("xyxy") => true,
        Some(other) => {
            return Err(DatasetError::Validation(format!(
                "unknown bbox_format {other:?}; expected \"xywh\" or \"xyxy\""
            )))
        }
    };

    let mut report = LoadReport::default();
    let mut images = Vec::new();
    let mut seen_images = BTreeSet::new();
    let mut events_present = BTreeSet::new();

    for image in document.images {
        if !seen_images.insert(image.id.clone()) {
            return Err(DatasetError::Validation(format!(
                "duplicate image id {:?}",
                image.id
            )));
        }
        if let Some(manifest) = &options.image_manifest {
            if !manifest.contains(&image.id) {
                report.unlisted_images += 1;
                continue;
            }
        }
        let Some(event) = ontology.event(&image.event) else {
            report.excluded_images += 1;
            report.warnings.push(format!(
                "image {:?} excluded: event {:?} not in ontology",
                image.id, image.event
            ));
            continue;
        };

        let mut objects = Vec::new();
        let mut seen_objects = BTreeSet::new();
        for object in image.objects {
            if !seen_objects.insert(object.id.clone()) {
                return Err(DatasetError::Validation(format!(
                    "image {:?} has duplicate object id {:?}",
                    image.id, object.id
                )));
            }
            let raw = object.bbox;
            let bbox = if xyxy {
                BBox {
                    x: raw[0],
                    y: raw[1],
                    width: raw[2] - raw[0],
                    height: raw[3] - raw[1],
                }
            } else {
                BBox::from(raw)
            };
            if !(bbox.x >= 0.0 && bbox.y >= 0.0 && bbox.width > 0.0 && bbox.height > 0.0) {
                return Err(DatasetError::Validation(format!(
                    "image {:?} object {:?} has invalid bbox {:?}",
                    image.id,
                    object.id,
                    <[f64; 4]>::from(bbox)
                )));
            }
            if let Some(role) = &object.role {
                let known = event
                    .roles
                    .iter()
                    .any(|r| r.name.eq_ignore_ascii_case(role.trim()));
                if !known {
                    report.excluded_objects += 1;
                    report.warnings.push(format!(
                        "image {:?} object {:?} excluded: role {:?} not in event {:?}",
                        image.id, object.id, role, event.name
                    ));
                    continue;
                }
            }
            objects.push(ObjectRegion {
                id: object.id,
                bbox,
                gold_role: object.role,
            });
        }

        events_present.insert(event.name.clone());
        report.objects += objects.len();
        images.push(ImageRecord {
            id: image.id,
            path: image.path,
            event_name: image.event,
            objects,
        });
    }

    report.images = images.len();
    report.events = events_present.len();
    Ok((Dataset { images }, report))
}

/// Builds one labeling instance per (image, object) pair, in document order.
/// Images whose event has no roles are skipped with a warning.
pub fn build_instances(dataset: &Dataset, ontology: &Ontology) -> Vec<Instance> {
    let mut instances = Vec::new();
    for image in &dataset.images {
        let Some(event) = ontology.event(&image.event_name) else {
            log::warn!(
                "image {:?} skipped: event {:?} not in ontology",
                image.id,
                image.event_name
            );
            continue;
        };
        if event.roles.is_empty() {
            log::warn!(
                "image {:?} skipped: event {:?} has no candidate roles",
                image.id,
                event.name
            );
            continue;
        }
        for (index, object) in image.objects.iter().enumerate() {
            instances.push(Instance {
                image_id: image.id.clone(),
                image_path: image.path.clone(),
                object_id: object.id.clone(),
                object_index: index,
                bbox: object.bbox,
                gold_role: object.gold_role.clone(),
                event: event.clone(),
            });
        }
    }
    instances
}

/// Draws `k` distinct exemplar images without replacement using a seeded
/// generator. The draw is a pure function of (dataset order, k, seed);
/// sampled images keep their draw order.
pub fn sample_few_shot(
    dataset: &Dataset,
    k: usize,
    seed: u64,
) -> Result<Vec<ExemplarImage>, DatasetError> {
    if k > dataset.images.len() {
        return Err(DatasetError::SampleExhausted {
            requested: k,
            available: dataset.images.len(),
        });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut indices: Vec<usize> = (0..dataset.images.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..k {
        let j = rng.gen_range(i..indices.len());
        indices.swap(i, j);
    }
    indices.truncate(k);

    let mut exemplars = Vec::with_capacity(k);
    for index in indices {
        let image = &dataset.images[index];
        for object in &image.objects {
            if object.gold_role.is_none() {
                return Err(DatasetError::UnlabeledExemplar {
                    image: image.id.clone(),
                    object: object.id.clone(),
                });
            }
        }
        exemplars.push(ExemplarImage {
            image: image.clone(),
            caption: None,
            descriptions: None,
        });
    }
    Ok(exemplars)
}

/// One image's labeling queries, batched for a single model call.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub image_id: String,
    pub image_path: String,
    pub event: EventType,
    pub instances: Vec<Instance>,
}

/// Partitions instances by image id, preserving object order within each
/// batch and first-appearance order across batches.
pub fn group_by_image(instances: Vec<Instance>) -> Vec<ImageBatch> {
    let mut order: Vec<String> = Vec::new();
    let mut buckets: BTreeMap<String, Vec<Instance>> = BTreeMap::new();
    for instance in instances {
        if !buckets.contains_key(&instance.image_id) {
            order.push(instance.image_id.clone());
        }
        buckets
            .entry(instance.image_id.clone())
            .or_default()
            .push(instance);
    }
    order
        .into_iter()
        .map(|image_id| {
            let instances = buckets.remove(&image_id).unwrap();
            ImageBatch {
                image_id,
                image_path: instances[0].image_path.clone(),
                event: instances[0].event.clone(),
                instances,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::parse_ontology;

    fn toy_ontology() -> Ontology {
        parse_ontology(
            r#"{
                "name": "toy",
                "events": [
                    {"name": "Alpha", "roles": [
                        {"name": "Driver"}, {"name": "Cargo"}, {"name": "Route"}
                    ]},
                    {"name": "Beta", "roles": [
                        {"name": "Speaker"}, {"name": "Listener"}, {"name": "Channel"}
                    ]}
                ]
            }"#,
        )
        .unwrap()
    }

    fn toy_dataset_json() -> &'static str {
        r#"{
            "images": [
                {"id": "img1", "path": "img1.png", "event": "Alpha", "objects": [
                    {"id": "o1", "bbox": [0, 0, 10, 10], "role": "Driver"},
                    {"id": "o2", "bbox": [5, 5, 20, 20], "role": "Cargo"},
                    {"id": "o3", "bbox": [1, 2, 3, 4], "role": "Route"}
                ]},
                {"id": "img2", "path": "img2.png", "event": "Beta", "objects": [
                    {"id": "o1", "bbox": [0, 0, 4, 4], "role": "Speaker"},
                    {"id": "o2", "bbox": [4, 4, 4, 4], "role": "Listener"}
                ]}
            ]
        }"#
    }

    #[test]
    fn load_counts_images_objects_and_events() {
        let ontology = toy_ontology();
        let (dataset, report) =
            parse_dataset(toy_dataset_json(), &ontology, &LoadOptions::default()).unwrap();
        assert_eq!(report.images, 2);
        assert_eq!(report.objects, 5);
        assert_eq!(report.events, 2);
        assert_eq!(report.excluded_images, 0);
        assert_eq!(dataset.object_count(), 5);
    }

    #[test]
    fn unknown_events_are_excluded_and_counted() {
        let ontology = toy_ontology();
        let text = r#"{"images": [
            {"id": "img1", "path": "a.png", "event": "Gamma", "objects": [
                {"id": "o1", "bbox": [0, 0, 1, 1]}
            ]}
        ]}"#;
        let (dataset, report) =
            parse_dataset(text, &ontology, &LoadOptions::default()).unwrap();
        assert!(dataset.images.is_empty());
        assert_eq!(report.excluded_images, 1);
        assert_eq!(report.events, 0);
    }

    #[test]
    fn invalid_bbox_names_the_object() {
        let ontology = toy_ontology();
        let text = r#"{"images": [
            {"id": "imgX", "path": "a.png", "event": "Alpha", "objects": [
                {"id": "oBad", "bbox": [0, 0, 0, 5]}
            ]}
        ]}"#;
        let err = parse_dataset(text, &ontology, &LoadOptions::default()).unwrap_err();
        let message = err.to_string();
        assert!(message.contains("imgX"), "{message}");
        assert!(message.contains("oBad"), "{message}");
    }

    #[test]
    fn xyxy_boxes_are_converted() {
        let ontology = toy_ontology();
        let text = r#"{"bbox_format": "xyxy", "images": [
            {"id": "img1", "path": "a.png", "event": "Alpha", "objects": [
                {"id": "o1", "bbox": [10, 20, 30, 60]}
            ]}
        ]}"#;
        let (dataset, _) = parse_dataset(text, &ontology, &LoadOptions::default()).unwrap();
        let bbox = dataset.images[0].objects[0].bbox;
        assert_eq!(
            (bbox.x, bbox.y, bbox.width, bbox.height),
            (10.0, 20.0, 20.0, 40.0)
        );
    }

    #[test]
    fn off_vocabulary_gold_roles_drop_the_object_only() {
        let ontology = toy_ontology();
        let text = r#"{"images": [
            {"id": "img1", "path": "a.png", "event": "Alpha", "objects": [
                {"id": "o1", "bbox": [0, 0, 1, 1], "role": "Driver"},
                {"id": "o2", "bbox": [0, 0, 1, 1], "role": "Bystander"}
            ]}
        ]}"#;
        let (dataset, report) =
            parse_dataset(text, &ontology, &LoadOptions::default()).unwrap();
        assert_eq!(dataset.images[0].objects.len(), 1);
        assert_eq!(report.excluded_objects, 1);
    }

    #[test]
    fn manifest_restricts_the_image_set() {
        let ontology = toy_ontology();
        let options = LoadOptions {
            image_manifest: Some(["img2".to_string()].into_iter().collect()),
        };
        let (dataset, report) = parse_dataset(toy_dataset_json(), &ontology, &options).unwrap();
        assert_eq!(dataset.images.len(), 1);
        assert_eq!(dataset.images[0].id, "img2");
        assert_eq!(report.unlisted_images, 1);
    }

    #[test]
    fn instances_follow_document_order() {
        let ontology = toy_ontology();
        let (dataset, _) =
            parse_dataset(toy_dataset_json(), &ontology, &LoadOptions::default()).unwrap();
        let instances = build_instances(&dataset, &ontology);
        assert_eq!(instances.len(), 5);
        let ids: Vec<(String, String)> = instances
            .iter()
            .map(|i| (i.image_id.clone(), i.object_id.clone()))
            .collect();
        assert_eq!(ids[0], ("img1".into(), "o1".into()));
        assert_eq!(ids[3], ("img2".into(), "o1".into()));
        assert_eq!(instances[1].event.name, "Alpha");
        assert_eq!(instances[1].object_index, 1);
    }

    #[test]
    fn grouping_partitions_the_instances() {
        let ontology = toy_ontology();
        let (dataset, _) =
            parse_dataset(toy_dataset_json(), &ontology, &LoadOptions::default()).unwrap();
        let instances = build_instances(&dataset, &ontology);
        let flat: Vec<(String, String)> = instances
            .iter()
            .map(|i| (i.image_id.clone(), i.object_id.clone()))
            .collect();
        let batches = group_by_image(instances);
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[0].instances.len(), 3);
        assert_eq!(batches[1].instances.len(), 2);
        let rejoined: Vec<(String, String)> = batches
            .iter()
            .flat_map(|b| {
                b.instances
                    .iter()
                    .map(|i| (i.image_id.clone(), i.object_id.clone()))
            })
            .collect();
        assert_eq!(rejoined, flat);
    }

    #[test]
    fn sampling_is_deterministic_and_without_replacement() {
        let ontology = toy_ontology();
        let (dataset, _) =
            parse_dataset(toy_dataset_json(), &ontology, &LoadOptions::default()).unwrap();
        let a = sample_few_shot(&dataset, 2, 7).unwrap();
        let b = sample_few_shot(&dataset, 2, 7).unwrap();
        let ids = |xs: &[ExemplarImage]| -> Vec<String> {
            xs.iter().map(|e| e.image.id.clone()).collect()
        };
        assert_eq!(ids(&a), ids(&b));
        let mut unique = ids(&a);
        unique.dedup();
        assert_eq!(unique.len(), 2);
    }

    #[test]
    fn sampling_zero_returns_nothing() {
        let ontology = toy_ontology();
        let (dataset, _) =
            parse_dataset(toy_dataset_json(), &ontology, &LoadOptions::default()).unwrap();
        assert!(sample_few_shot(&dataset, 0, 1).unwrap().is_empty());
    }

    #[test]
    fn sampling_more_than_available_fails() {
        let ontology = toy_ontology();
        let (dataset, _) =
            parse_dataset(toy_dataset_json(), &ontology, &LoadOptions::default()).unwrap();
        let err = sample_few_shot(&dataset, 3, 1).unwrap_err();
        assert!(matches!(err, DatasetError::SampleExhausted { .. }));
    }

    #[test]
    fn sampling_an_unlabeled_image_fails() {
        let ontology = toy_ontology();
        let text = r#"{"images": [
            {"id": "img1", "path": "a.png", "event": "Alpha", "objects": [
                {"id": "o1", "bbox": [0, 0, 1, 1]}
            ]}
        ]}"#;
        let (dataset, _) = parse_dataset(text, &ontology, &LoadOptions::default()).unwrap();
        let err = sample_few_shot(&dataset, 1, 1).unwrap_err();
        assert!(matches!(err, DatasetError::UnlabeledExemplar { .. }));
    }
}
