//! Uniform contracts for the model services the pipeline drives: multimodal
//! generation, chat completion, candidate scoring, and embedding.
//!
//! A backend implements whichever capabilities it has and inherits
//! capability errors for the rest. Cross-cutting concerns are stacked as
//! wrappers around a base backend: retry around the wire call, the
//! content-addressed cache around retry, and response archiving outermost so
//! every logical call is recorded even when served from cache.

mod archive;
mod cache;
mod http;
mod mock;
mod retry;
mod sidecar;

pub use archive::ArchivingBackend;
pub use cache::{cache_key, with_cache, CachedBackend};
pub use http::HttpBackend;
pub use mock::{ConstantBackend, FailingBackend, OracleBackend, ScriptedBackend};
pub use retry::{RetryBackend, RetryPolicy};
pub use sidecar::SidecarEmbedder;

use std::fmt;
use std::fs;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::BBox;
use crate::templates::{ImageSlot, MultimodalPrompt, TextPrompt};

/// The four capability classes a run wires up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    GvlmGenerate,
    LlmChat,
    LlmScore,
    Embed,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            BackendKind::GvlmGenerate => "gvlm-generate",
            BackendKind::LlmChat => "llm-chat",
            BackendKind::LlmScore => "llm-score",
            BackendKind::Embed => "embed",
        };
        f.write_str(name)
    }
}

/// Endpoint and decoding configuration recorded in run metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub model: String,
    #[serde(default)]
    pub base_url: Option<String>,
    /// Name of the environment variable holding the credential.
    #[serde(default)]
    pub credential_env: Option<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub max_tokens: Option<u32>,
    /// Context budget in estimated tokens; prompts over it fail before
    /// dispatch.
    #[serde(default)]
    pub context_budget: Option<usize>,
    #[serde(default = "default_chars_per_token")]
    pub chars_per_token: f64,
}

fn default_chars_per_token() -> f64 {
    4.0
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            model: "default".into(),
            base_url: None,
            credential_env: None,
            temperature: 0.0,
            max_tokens: None,
            context_budget: None,
            chars_per_token: default_chars_per_token(),
        }
    }
}

impl EndpointConfig {
    /// Identity string folded into cache keys: model plus every decoding
    /// parameter that can change the response.
    pub fn identity(&self) -> String {
        format!(
            "{}|t={}|max={}",
            self.model,
            self.temperature,
            self.max_tokens.map_or("none".into(), |m| m.to_string())
        )
    }
}

/// A fixed-dimension embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding {
    pub values: Vec<f64>,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Embedding {
        Embedding { values }
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        !self.values.is_empty() && self.values.iter().all(|v| v.is_finite())
    }
}

/// Failures raised by backend calls.
#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend {backend} does not support {capability}")]
    Unsupported {
        backend: String,
        capability: &'static str,
    },
    #[error("transport failure talking to {backend}: {message}")]
    Transport { backend: String, message: String },
    #[error("{backend} rate-limited the request: {message}")]
    RateLimited { backend: String, message: String },
    #[error("{backend} rejected the request (status {status}): {message}")]
    Rejected {
        backend: String,
        status: u16,
        message: String,
    },
    #[error("{backend} returned an empty completion")]
    EmptyResponse { backend: String },
    #[error("prompt estimated at {estimated} tokens exceeds the context budget of {budget}")]
    ContextOverflow { estimated: usize, budget: usize },
    #[error("{backend} violated the backend contract: {message}")]
    Contract { backend: String, message: String },
    #[error("{backend} failed after {attempts} attempts: {last}")]
    RetriesExhausted {
        backend: String,
        attempts: usize,
        #[source]
        last: Box<BackendError>,
    },
    #[error("unreadable input: {0}")]
    Input(String),
}

impl BackendError {
    /// Whether retrying the same request can plausibly succeed.
    pub fn is_transient(&self) -> bool {
        matches!(
            self,
            BackendError::Transport { .. } | BackendError::RateLimited { .. }
        )
    }

    fn unsupported(backend: String, capability: &'static str) -> BackendError {
        BackendError::Unsupported {
            backend,
            capability,
        }
    }
}

/// The uniform model-service contract. Every method has an unsupported
/// default so implementations only provide what they actually serve.
pub trait ModelBackend: Send + Sync {
    /// Stable identifier covering the provider, model, and decoding
    /// parameters; folded into cache keys and run metadata.
    fn id(&self) -> String;

    /// Generates text from an instruction plus ordered image payloads.
    fn generate(&self, prompt: &MultimodalPrompt) -> Result<String, BackendError> {
        let _ = prompt;
        Err(BackendError::unsupported(self.id(), "generate"))
    }

    /// Generates text from a text-only instruction.
    fn chat(&self, prompt: &TextPrompt) -> Result<String, BackendError> {
        let _ = prompt;
        Err(BackendError::unsupported(self.id(), "chat"))
    }

    /// Scores each candidate continuation under the prompt. Higher is more
    /// probable; scores are comparable within one call only.
    fn score_text(
        &self,
        prompt: &TextPrompt,
        candidates: &[String],
    ) -> Result<Vec<f64>, BackendError> {
        let _ = (prompt, candidates);
        Err(BackendError::unsupported(self.id(), "score_text"))
    }

    /// Scores each candidate continuation under a multimodal prompt.
    fn score_multimodal(
        &self,
        prompt: &MultimodalPrompt,
        candidates: &[String],
    ) -> Result<Vec<f64>, BackendError> {
        let _ = (prompt, candidates);
        Err(BackendError::unsupported(self.id(), "score_multimodal"))
    }

    /// Embeds a batch of texts, one vector per text in order.
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Embedding>, BackendError> {
        let _ = texts;
        Err(BackendError::unsupported(self.id(), "embed_texts"))
    }

    /// Embeds the cropped region of an image.
    fn embed_region(&self, image_ref: &str, bbox: &BBox) -> Result<Embedding, BackendError> {
        let _ = (image_ref, bbox);
        Err(BackendError::unsupported(self.id(), "embed_region"))
    }

    /// Embeds a whole image.
    fn embed_image(&self, image_ref: &str) -> Result<Embedding, BackendError> {
        let _ = image_ref;
        Err(BackendError::unsupported(self.id(), "embed_image"))
    }
}

impl ModelBackend for Box<dyn ModelBackend> {
    fn id(&self) -> String {
        (**self).id()
    }
    fn generate(&self, prompt: &MultimodalPrompt) -> Result<String, BackendError> {
        (**self).generate(prompt)
    }
    fn chat(&self, prompt: &TextPrompt) -> Result<String, BackendError> {
        (**self).chat(prompt)
    }
    fn score_text(
        &self,
        prompt: &TextPrompt,
        candidates: &[String],
    ) -> Result<Vec<f64>, BackendError> {
        (**self).score_text(prompt, candidates)
    }
    fn score_multimodal(
        &self,
        prompt: &MultimodalPrompt,
        candidates: &[String],
    ) -> Result<Vec<f64>, BackendError> {
        (**self).score_multimodal(prompt, candidates)
    }
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Embedding>, BackendError> {
        (**self).embed_texts(texts)
    }
    fn embed_region(&self, image_ref: &str, bbox: &BBox) -> Result<Embedding, BackendError> {
        (**self).embed_region(image_ref, bbox)
    }
    fn embed_image(&self, image_ref: &str) -> Result<Embedding, BackendError> {
        (**self).embed_image(image_ref)
    }
}

/// Thread-safe dispatch counter shared with test harnesses.
#[derive(Debug, Clone, Default)]
pub struct CallCounter(Arc<AtomicUsize>);

impl CallCounter {
    pub fn new() -> CallCounter {
        CallCounter::default()
    }

    pub fn increment(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn count(&self) -> usize {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

/// Hex SHA-256 of raw bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// Canonical payload text for an image slot: the digest of the file bytes
/// when readable (so renaming a file does not change the key while editing
/// its pixels does), otherwise the locator string, plus the crop spec.
pub fn image_slot_payload(slot: &ImageSlot) -> String {
    let pixels = match fs::read(&slot.image_ref) {
        Ok(bytes) => format!("sha256:{}", sha256_hex(&bytes)),
        Err(_) => format!("ref:{}", slot.image_ref),
    };
    match &slot.crop {
        Some(bbox) => format!("{pixels}|crop:{}", bbox.key()),
        None => format!("{pixels}|full"),
    }
}

/// Canonical payload text for a multimodal prompt.
pub fn multimodal_payload(prompt: &MultimodalPrompt) -> String {
    let mut payload = prompt.text.clone();
    for slot in &prompt.images {
        payload.push_str("\n--image--\n");
        payload.push_str(&image_slot_payload(slot));
    }
    payload
}

/// Digest identifying a text prompt, used for archiving and scripted mocks.
pub fn prompt_digest_text(prompt: &TextPrompt) -> String {
    sha256_hex(prompt.text.as_bytes())
}

/// Digest identifying a multimodal prompt, image payloads included.
pub fn prompt_digest_multimodal(prompt: &MultimodalPrompt) -> String {
    sha256_hex(multimodal_payload(prompt).as_bytes())
}

/// Estimated token footprint of a prompt: a configurable characters-per-token
/// ratio for text plus a flat 256 visual tokens per image payload.
pub fn estimate_tokens(text: &str, images: usize, chars_per_token: f64) -> usize {
    let ratio = if chars_per_token > 0.0 {
        chars_per_token
    } else {
        default_chars_per_token()
    };
    (text.chars().count() as f64 / ratio).ceil() as usize + images * 256
}

/// Wrapper counting every call that reaches the wrapped backend. Placed
/// under the cache, it measures true dispatches: cache hits never tick it.
pub struct CountingBackend<B> {
    inner: B,
    counter: CallCounter,
}

impl<B: ModelBackend> CountingBackend<B> {
    pub fn new(inner: B, counter: CallCounter) -> CountingBackend<B> {
        CountingBackend { inner, counter }
    }
}

impl<B: ModelBackend> ModelBackend for CountingBackend<B> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn generate(&self, prompt: &MultimodalPrompt) -> Result<String, BackendError> {
        self.counter.increment();
        self.inner.generate(prompt)
    }

    fn chat(&self, prompt: &TextPrompt) -> Result<String, BackendError> {
        self.counter.increment();
        self.inner.chat(prompt)
    }

    fn score_text(
        &self,
        prompt: &TextPrompt,
        candidates: &[String],
    ) -> Result<Vec<f64>, BackendError> {
        self.counter.increment();
        self.inner.score_text(prompt, candidates)
    }

    fn score_multimodal(
        &self,
        prompt: &MultimodalPrompt,
        candidates: &[String],
    ) -> Result<Vec<f64>, BackendError> {
        self.counter.increment();
        self.inner.score_multimodal(prompt, candidates)
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Embedding>, BackendError> {
        self.counter.increment();
        self.inner.embed_texts(texts)
    }

    fn embed_region(&self, image_ref: &str, bbox: &BBox) -> Result<Embedding, BackendError> {
        self.counter.increment();
        self.inner.embed_region(image_ref, bbox)
    }

    fn embed_image(&self, image_ref: &str) -> Result<Embedding, BackendError> {
        self.counter.increment();
        self.inner.embed_image(image_ref)
    }
}

/// Wrapper enforcing a context budget before dispatch, so oversized prompts
/// fail fast instead of being truncated remotely.
pub struct ContextGuard<B> {
    inner: B,
    budget: usize,
    chars_per_token: f64,
}

impl<B: ModelBackend> ContextGuard<B> {
    pub fn new(inner: B, budget: usize, chars_per_token: f64) -> ContextGuard<B> {
        ContextGuard {
            inner,
            budget,
            chars_per_token,
        }
    }

    fn check(&self, text: &str, images: usize) -> Result<(), BackendError> {
        let estimated = estimate_tokens(text, images, self.chars_per_token);
        if estimated > self.budget {
            return Err(BackendError::ContextOverflow {
                estimated,
                budget: self.budget,
            });
        }
        Ok(())
    }
}

impl<B: ModelBackend> ModelBackend for ContextGuard<B> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn generate(&self, prompt: &MultimodalPrompt) -> Result<String, BackendError> {
        self.check(&prompt.text, prompt.images.len())?;
        self.inner.generate(prompt)
    }

    fn chat(&self, prompt: &TextPrompt) -> Result<String, BackendError> {
        self.check(&prompt.text, 0)?;
        self.inner.chat(prompt)
    }

    fn score_text(
        &self,
        prompt: &TextPrompt,
        candidates: &[String],
    ) -> Result<Vec<f64>, BackendError> {
        self.check(&prompt.text, 0)?;
        self.inner.score_text(prompt, candidates)
    }

    fn score_multimodal(
        &self,
        prompt: &MultimodalPrompt,
        candidates: &[String],
    ) -> Result<Vec<f64>, BackendError> {
        self.check(&prompt.text, prompt.images.len())?;
        self.inner.score_multimodal(prompt, candidates)
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Embedding>, BackendError> {
        self.inner.embed_texts(texts)
    }

    fn embed_region(&self, image_ref: &str, bbox: &BBox) -> Result<Embedding, BackendError> {
        self.inner.embed_region(image_ref, bbox)
    }

    fn embed_image(&self, image_ref: &str) -> Result<Embedding, BackendError> {
        self.inner.embed_image(image_ref)
    }
}
