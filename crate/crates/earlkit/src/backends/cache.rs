//! Content-addressed response cache.
//!
//! Every request is keyed by a digest of the backend kind, the backend
//! identity (model plus decoding parameters), and the full prompt payload,
//! image bytes included. One JSON file per key; entries are immutable once
//! written. Corrupt entries are invalidated and refetched with a warning.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::backends::{
    image_slot_payload, multimodal_payload, sha256_hex, BackendError, Embedding, ModelBackend,
};
use crate::dataset::BBox;
use crate::templates::{ImageSlot, MultimodalPrompt, TextPrompt};

/// Digest addressing one cached response.
pub fn cache_key(kind: &str, backend_id: &str, payload: &str) -> String {
    sha256_hex(format!("{kind}\n{backend_id}\n{payload}").as_bytes())
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    kind: String,
    backend: String,
    response: CachedResponse,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum CachedResponse {
    Text { text: String },
    Scores { scores: Vec<f64> },
    Embeddings { vectors: Vec<Embedding> },
    Embedding { vector: Embedding },
}

/// Wraps a backend with the content-addressed cache rooted at `dir`.
pub fn with_cache<B: ModelBackend>(
    inner: B,
    dir: impl AsRef<Path>,
) -> std::io::Result<CachedBackend<B>> {
    let dir = dir.as_ref().to_path_buf();
    fs::create_dir_all(&dir)?;
    Ok(CachedBackend { inner, dir })
}

/// Backend wrapper consulting the cache before dispatch and persisting
/// responses after.
pub struct CachedBackend<B> {
    inner: B,
    dir: PathBuf,
}

impl<B: ModelBackend> CachedBackend<B> {
    fn entry_path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    fn lookup(&self, kind: &str, key: &str) -> Option<CachedResponse> {
        let path = self.entry_path(key);
        let text = fs::read_to_string(&path).ok()?;
        match serde_json::from_str::<CacheEntry>(&text) {
            Ok(entry) if entry.kind == kind => Some(entry.response),
            Ok(entry) => {
                log::warn!(
                    "cache entry {key} recorded kind {:?}, expected {kind:?}; invalidating",
                    entry.kind
                );
                let _ = fs::remove_file(&path);
                None
            }
            Err(error) => {
                log::warn!("corrupt cache entry {key}: {error}; invalidating");
                let _ = fs::remove_file(&path);
                None
            }
        }
    }

    fn store(&self, kind: &str, key: &str, response: CachedResponse) {
        let entry = CacheEntry {
            kind: kind.to_string(),
            backend: self.inner.id(),
            response,
        };
        let text = match serde_json::to_string_pretty(&entry) {
            Ok(text) => text,
            Err(error) => {
                log::warn!("cache entry {key} not serializable: {error}");
                return;
            }
        };
        let nonce = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or(0);
        let tmp = self.dir.join(format!("{key}.tmp-{nonce}"));
        let final_path = self.entry_path(key);
        if let Err(error) = fs::write(&tmp, text).and_then(|_| fs::rename(&tmp, &final_path)) {
            log::warn!("failed to persist cache entry {key}: {error}");
            let _ = fs::remove_file(&tmp);
        }
    }

    fn cached_text(
        &self,
        kind: &str,
        payload: &str,
        fetch: impl FnOnce(&B) -> Result<String, BackendError>,
    ) -> Result<String, BackendError> {
        let key = cache_key(kind, &self.inner.id(), payload);
        if let Some(CachedResponse::Text { text }) = self.lookup(kind, &key) {
            return Ok(text);
        }
        let text = fetch(&self.inner)?;
        self.store(kind, &key, CachedResponse::Text { text: text.clone() });
        Ok(text)
    }

    fn cached_scores(
        &self,
        kind: &str,
        payload: &str,
        fetch: impl FnOnce(&B) -> Result<Vec<f64>, BackendError>,
    ) -> Result<Vec<f64>, BackendError> {
        let key = cache_key(kind, &self.inner.id(), payload);
        if let Some(CachedResponse::Scores { scores }) = self.lookup(kind, &key) {
            return Ok(scores);
        }
        let scores = fetch(&self.inner)?;
        self.store(
            kind,
            &key,
            CachedResponse::Scores {
                scores: scores.clone(),
            },
        );
        Ok(scores)
    }

    fn cached_embedding(
        &self,
        kind: &str,
        payload: &str,
        fetch: impl FnOnce(&B) -> Result<Embedding, BackendError>,
    ) -> Result<Embedding, BackendError> {
        let key = cache_key(kind, &self.inner.id(), payload);
        if let Some(CachedResponse::Embedding { vector }) = self.lookup(kind, &key) {
            return Ok(vector);
        }
        let vector = fetch(&self.inner)?;
        self.store(
            kind,
            &key,
            CachedResponse::Embedding {
                vector: vector.clone(),
            },
        );
        Ok(vector)
    }
}

fn candidates_payload(candidates: &[String]) -> String {
    serde_json::to_string(candidates).expect("string list serializes")
}

impl<B: ModelBackend> ModelBackend for CachedBackend<B> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn generate(&self, prompt: &MultimodalPrompt) -> Result<String, BackendError> {
        self.cached_text("generate", &multimodal_payload(prompt), |b| b.generate(prompt))
    }

    fn chat(&self, prompt: &TextPrompt) -> Result<String, BackendError> {
        self.cached_text("chat", &prompt.text, |b| b.chat(prompt))
    }

    fn score_text(
        &self,
        prompt: &TextPrompt,
        candidates: &[String],
    ) -> Result<Vec<f64>, BackendError> {
        let payload = format!("{}\n--candidates--\n{}", prompt.text, candidates_payload(candidates));
        self.cached_scores("score_text", &payload, |b| b.score_text(prompt, candidates))
    }

    fn score_multimodal(
        &self,
        prompt: &MultimodalPrompt,
        candidates: &[String],
    ) -> Result<Vec<f64>, BackendError> {
        let payload = format!(
            "{}\n--candidates--\n{}",
            multimodal_payload(prompt),
            candidates_payload(candidates)
        );
        self.cached_scores("score_multimodal", &payload, |b| {
            b.score_multimodal(prompt, candidates)
        })
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Embedding>, BackendError> {
        let payload = serde_json::to_string(texts).expect("string list serializes");
        let key = cache_key("embed_texts", &self.inner.id(), &payload);
        if let Some(CachedResponse::Embeddings { vectors }) = self.lookup("embed_texts", &key) {
            return Ok(vectors);
        }
        let vectors = self.inner.embed_texts(texts)?;
        self.store(
            "embed_texts",
            &key,
            CachedResponse::Embeddings {
                vectors: vectors.clone(),
            },
        );
        Ok(vectors)
    }

    fn embed_region(&self, image_ref: &str, bbox: &BBox) -> Result<Embedding, BackendError> {
        let payload = image_slot_payload(&ImageSlot {
            image_ref: image_ref.to_string(),
            crop: Some(*bbox),
        });
        self.cached_embedding("embed_region", &payload, |b| b.embed_region(image_ref, bbox))
    }

    fn embed_image(&self, image_ref: &str) -> Result<Embedding, BackendError> {
        let payload = image_slot_payload(&ImageSlot {
            image_ref: image_ref.to_string(),
            crop: None,
        });
        self.cached_embedding("embed_image", &payload, |b| b.embed_image(image_ref))
    }
}
