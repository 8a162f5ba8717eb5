//! Embedding backend serving vectors precomputed into a sidecar file, so
//! similarity runs need no live embedding service.
//!
//! The sidecar is JSON-lines, one record per line:
//!
//! ```text
//! {"scope": "object", "key": "img-3/obj-1", "vector": [0.1, -0.4, ...]}
//! {"scope": "text",   "key": "An object playing the Agent role ...", "vector": [...]}
//! ```
//!
//! Object-scope keys are `{image_id}/{object_id}` for regions and the bare
//! `{image_id}` for whole images. Because backends address regions by image
//! path and bounding box rather than by id, the embedder must be pointed at
//! the dataset once via [`SidecarEmbedder::index_dataset`] so it can resolve
//! `(path, bbox)` lookups to sidecar keys.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::backends::{BackendError, Embedding, ModelBackend};
use crate::dataset::{BBox, Dataset};

#[derive(Debug, Deserialize)]
struct SidecarRecord {
    scope: String,
    key: String,
    vector: Vec<f64>,
}

/// Read-only embedding store loaded from a sidecar file.
#[derive(Debug)]
pub struct SidecarEmbedder {
    id: String,
    objects: BTreeMap<String, Embedding>,
    texts: BTreeMap<String, Embedding>,
    /// `(image path, bbox key)` to object-scope sidecar key.
    region_index: BTreeMap<(String, String), String>,
    /// Image path to image id.
    image_index: BTreeMap<String, String>,
    dimension: usize,
}

impl SidecarEmbedder {
    /// Loads and validates a sidecar file. Every vector must be non-empty,
    /// finite, and of one shared dimension; keys must be unique per scope.
    pub fn load(path: impl AsRef<Path>) -> Result<SidecarEmbedder, BackendError> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|error| {
            BackendError::Input(format!("cannot read sidecar {}: {error}", path.display()))
        })?;

        let mut objects = BTreeMap::new();
        let mut texts = BTreeMap::new();
        let mut dimension = None;
        for (number, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: SidecarRecord = serde_json::from_str(line).map_err(|error| {
                BackendError::Input(format!(
                    "sidecar {} line {}: {error}",
                    path.display(),
                    number + 1
                ))
            })?;
            let vector = Embedding::new(record.vector);
            if !vector.is_finite() {
                return Err(BackendError::Contract {
                    backend: format!("sidecar:{}", path.display()),
                    message: format!("key {:?} has an empty or non-finite vector", record.key),
                });
            }
            let expected = *dimension.get_or_insert(vector.dimension());
            if vector.dimension() != expected {
                return Err(BackendError::Contract {
                    backend: format!("sidecar:{}", path.display()),
                    message: format!(
                        "key {:?} has dimension {} but earlier records have {}",
                        record.key,
                        vector.dimension(),
                        expected
                    ),
                });
            }
            let store = match record.scope.as_str() {
                "object" => &mut objects,
                "text" => &mut texts,
                other => {
                    return Err(BackendError::Input(format!(
                        "sidecar {} line {}: unknown scope {other:?}",
                        path.display(),
                        number + 1
                    )))
                }
            };
            if store.insert(record.key.clone(), vector).is_some() {
                return Err(BackendError::Input(format!(
                    "sidecar {} defines {:?} twice in scope {:?}",
                    path.display(),
                    record.key,
                    record.scope
                )));
            }
        }

        Ok(SidecarEmbedder {
            id: format!("sidecar:{}", path.display()),
            objects,
            texts,
            region_index: BTreeMap::new(),
            image_index: BTreeMap::new(),
            dimension: dimension.unwrap_or(0),
        })
    }

    /// Builds the path/bbox lookup tables from a dataset, enabling
    /// `embed_region` and `embed_image`.
    pub fn index_dataset(&mut self, dataset: &Dataset) {
        for image in &dataset.images {
            self.image_index
                .insert(image.path.clone(), image.id.clone());
            for object in &image.objects {
                self.region_index.insert(
                    (image.path.clone(), object.bbox.key()),
                    format!("{}/{}", image.id, object.id),
                );
            }
        }
    }

    /// Shared dimension of all stored vectors; 0 when the file was empty.
    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Direct lookup by object-scope key, bypassing the dataset index.
    pub fn object_vector(&self, key: &str) -> Option<&Embedding> {
        self.objects.get(key)
    }
}

impl ModelBackend for SidecarEmbedder {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Embedding>, BackendError> {
        texts
            .iter()
            .map(|text| {
                self.texts.get(text).cloned().ok_or_else(|| {
                    BackendError::Input(format!("sidecar has no text embedding for {text:?}"))
                })
            })
            .collect()
    }

    fn embed_region(&self, image_ref: &str, bbox: &BBox) -> Result<Embedding, BackendError> {
        let key = self
            .region_index
            .get(&(image_ref.to_string(), bbox.key()))
            .ok_or_else(|| {
                BackendError::Input(format!(
                    "no dataset object indexed at {image_ref} bbox {}",
                    bbox.key()
                ))
            })?;
        self.objects.get(key).cloned().ok_or_else(|| {
            BackendError::Input(format!("sidecar has no object embedding for {key:?}"))
        })
    }

    fn embed_image(&self, image_ref: &str) -> Result<Embedding, BackendError> {
        let key = self.image_index.get(image_ref).ok_or_else(|| {
            BackendError::Input(format!("no dataset image indexed at {image_ref}"))
        })?;
        self.objects.get(key).cloned().ok_or_else(|| {
            BackendError::Input(format!("sidecar has no image embedding for {key:?}"))
        })
    }
}
