//! Append-only archiving of prompts and responses under a run directory.
//!
//! The archiving wrapper sits outermost in the backend stack so every
//! logical request is recorded even when the cache short-circuits dispatch.
//! Files are named by prompt digest; identical requests map to identical
//! files, so existing files are left untouched.

use std::fs;
use std::path::{Path, PathBuf};

use crate::backends::{
    multimodal_payload, prompt_digest_multimodal, prompt_digest_text, BackendError, Embedding,
    ModelBackend,
};
use crate::dataset::BBox;
use crate::templates::{MultimodalPrompt, TextPrompt};

/// Backend wrapper recording prompts and responses as plain files.
pub struct ArchivingBackend<B> {
    inner: B,
    prompts_dir: PathBuf,
    responses_dir: PathBuf,
}

impl<B: ModelBackend> ArchivingBackend<B> {
    /// Creates `prompts/` and `responses/` under `run_dir`.
    pub fn new(inner: B, run_dir: impl AsRef<Path>) -> std::io::Result<ArchivingBackend<B>> {
        let run_dir = run_dir.as_ref();
        let prompts_dir = run_dir.join("prompts");
        let responses_dir = run_dir.join("responses");
        fs::create_dir_all(&prompts_dir)?;
        fs::create_dir_all(&responses_dir)?;
        Ok(ArchivingBackend {
            inner,
            prompts_dir,
            responses_dir,
        })
    }

    fn record(&self, digest: &str, prompt: &str, response: &str) {
        write_once(&self.prompts_dir.join(format!("{digest}.txt")), prompt);
        write_once(&self.responses_dir.join(format!("{digest}.txt")), response);
    }
}

fn write_once(path: &Path, content: &str) {
    if path.exists() {
        return;
    }
    if let Err(error) = fs::write(path, content) {
        log::warn!("failed to archive {}: {error}", path.display());
    }
}

impl<B: ModelBackend> ModelBackend for ArchivingBackend<B> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn generate(&self, prompt: &MultimodalPrompt) -> Result<String, BackendError> {
        let text = self.inner.generate(prompt)?;
        self.record(
            &prompt_digest_multimodal(prompt),
            &multimodal_payload(prompt),
            &text,
        );
        Ok(text)
    }

    fn chat(&self, prompt: &TextPrompt) -> Result<String, BackendError> {
        let text = self.inner.chat(prompt)?;
        self.record(&prompt_digest_text(prompt), &prompt.text, &text);
        Ok(text)
    }

    fn score_text(
        &self,
        prompt: &TextPrompt,
        candidates: &[String],
    ) -> Result<Vec<f64>, BackendError> {
        let scores = self.inner.score_text(prompt, candidates)?;
        let rendered = serde_json::to_string(&serde_json::json!({
            "candidates": candidates,
            "scores": scores,
        }))
        .unwrap_or_default();
        self.record(&prompt_digest_text(prompt), &prompt.text, &rendered);
        Ok(scores)
    }

    fn score_multimodal(
        &self,
        prompt: &MultimodalPrompt,
        candidates: &[String],
    ) -> Result<Vec<f64>, BackendError> {
        let scores = self.inner.score_multimodal(prompt, candidates)?;
        let rendered = serde_json::to_string(&serde_json::json!({
            "candidates": candidates,
            "scores": scores,
        }))
        .unwrap_or_default();
        self.record(
            &prompt_digest_multimodal(prompt),
            &multimodal_payload(prompt),
            &rendered,
        );
        Ok(scores)
    }

    // Embedding traffic is bulky and reproducible from the sidecar or the
    // cache, so it is not archived.
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
