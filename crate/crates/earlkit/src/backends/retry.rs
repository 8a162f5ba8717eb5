//! Retry wrapper with exponential backoff for transient failures.

use std::thread;
use std::time::Duration;

use crate::backends::{BackendError, Embedding, ModelBackend};
use crate::dataset::BBox;
use crate::templates::{MultimodalPrompt, TextPrompt};

/// Retry limits. Only transient errors (transport, rate limiting) are
/// retried; permanent rejections propagate immediately.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: usize,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 100,
            max_delay_ms: 2_000,
        }
    }
}

impl RetryPolicy {
    /// Policy without sleeps, for tests.
    pub fn immediate(max_attempts: usize) -> RetryPolicy {
        RetryPolicy {
            max_attempts,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    fn delay_for(&self, attempt: usize) -> Duration {
        let exponent = attempt.saturating_sub(1).min(16) as u32;
        let millis = self
            .base_delay_ms
            .saturating_mul(1u64 << exponent)
            .min(self.max_delay_ms);
        Duration::from_millis(millis)
    }
}

/// Backend wrapper retrying transient failures up to the policy limit.
pub struct RetryBackend<B> {
    inner: B,
    policy: RetryPolicy,
}

impl<B: ModelBackend> RetryBackend<B> {
    pub fn new(inner: B, policy: RetryPolicy) -> RetryBackend<B> {
        RetryBackend { inner, policy }
    }

    fn call<T>(&self, op: impl Fn(&B) -> Result<T, BackendError>) -> Result<T, BackendError> {
        let max_attempts = self.policy.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            match op(&self.inner) {
                Ok(value) => return Ok(value),
                Err(error) if error.is_transient() && attempt < max_attempts => {
                    let delay = self.policy.delay_for(attempt);
                    log::debug!(
                        "attempt {attempt}/{max_attempts} against {} failed transiently: {error}",
                        self.inner.id()
                    );
                    if !delay.is_zero() {
                        thread::sleep(delay);
                    }
                }
                Err(error) if error.is_transient() => {
                    return Err(BackendError::RetriesExhausted {
                        backend: self.inner.id(),
                        attempts: attempt,
                        last: Box::new(error),
                    })
                }
                Err(error) => return Err(error),
            }
        }
    }
}

impl<B: ModelBackend> ModelBackend for RetryBackend<B> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn generate(&self, prompt: &MultimodalPrompt) -> Result<String, BackendError> {
        self.call(|b| b.generate(prompt))
    }

    fn chat(&self, prompt: &TextPrompt) -> Result<String, BackendError> {
        self.call(|b| b.chat(prompt))
    }

    fn score_text(
        &self,
        prompt: &TextPrompt,
        candidates: &[String],
    ) -> Result<Vec<f64>, BackendError> {
        self.call(|b| b.score_text(prompt, candidates))
    }

    fn score_multimodal(
        &self,
        prompt: &MultimodalPrompt,
        candidates: &[String],
    ) -> Result<Vec<f64>, BackendError> {
        self.call(|b| b.score_multimodal(prompt, candidates))
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Embedding>, BackendError> {
        self.call(|b| b.embed_texts(texts))
    }

    fn embed_region(&self, image_ref: &str, bbox: &BBox) -> Result<Embedding, BackendError> {
        self.call(|b| b.embed_region(image_ref, bbox))
    }

    fn embed_image(&self, image_ref: &str) -> Result<Embedding, BackendError> {
        self.call(|b| b.embed_image(image_ref))
    }
}
