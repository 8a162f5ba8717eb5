//! Chat-completions-style HTTP adapter.
//!
//! One adapter covers the four capabilities against three conventional
//! routes under a configured base URL:
//!
//! - `POST {base}/chat/completions` for `chat` and `generate` (images are
//!   inlined as `data:` URLs, cropped client-side for region prompts);
//! - `POST {base}/score` with `{model, prompt, candidates, images?}`
//!   returning `{scores}`;
//! - `POST {base}/embeddings` with `{model, input}` (texts) or
//!   `{model, image}` (one inline image) returning `{data: [{embedding}]}`.
//!
//! Providers with a different shape get their own adapter; the pipeline only
//! sees the [`ModelBackend`] contract.

use std::io::Cursor;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::Deserialize;
use serde_json::json;

use crate::backends::{BackendError, Embedding, EndpointConfig, ModelBackend};
use crate::dataset::BBox;
use crate::templates::{ImageSlot, MultimodalPrompt, TextPrompt};

/// HTTP-backed model client.
#[derive(Debug)]
pub struct HttpBackend {
    config: EndpointConfig,
    base_url: String,
    bearer: Option<String>,
    client: reqwest::blocking::Client,
    /// Fractional bbox padding applied on each side before cropping.
    crop_padding: f64,
}

impl HttpBackend {
    pub fn new(config: EndpointConfig) -> Result<HttpBackend, BackendError> {
        let base_url = config
            .base_url
            .clone()
            .ok_or_else(|| BackendError::Input("http backend requires a base_url".into()))?;
        let bearer = match &config.credential_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::Input(format!("credential variable {var} is not set"))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|error| BackendError::Input(format!("cannot build http client: {error}")))?;
        Ok(HttpBackend {
            config,
            base_url: base_url.trim_end_matches('/').to_string(),
            bearer,
            client,
            crop_padding: 0.0,
        })
    }

    pub fn with_crop_padding(mut self, padding: f64) -> HttpBackend {
        self.crop_padding = padding.max(0.0);
        self
    }

    fn post(&self, route: &str, body: serde_json::Value) -> Result<serde_json::Value, BackendError> {
        let url = format!("{}/{}", self.base_url, route);
        let mut request = self.client.post(&url).json(&body);
        if let Some(token) = &self.bearer {
            request = request.bearer_auth(token);
        }
        let response = request.send().map_err(|error| BackendError::Transport {
            backend: self.id(),
            message: error.to_string(),
        })?;
        let status = response.status().as_u16();
        let text = response.text().map_err(|error| BackendError::Transport {
            backend: self.id(),
            message: error.to_string(),
        })?;
        if let Some(error) = classify_status(&self.id(), status, &text) {
            return Err(error);
        }
        serde_json::from_str(&text).map_err(|error| BackendError::Contract {
            backend: self.id(),
            message: format!("malformed response body: {error}"),
        })
    }

    fn decoding_fields(&self, body: &mut serde_json::Value) {
        body["temperature"] = json!(self.config.temperature);
        if let Some(max) = self.config.max_tokens {
            body["max_tokens"] = json!(max);
        }
    }

    /// Loads, optionally crops, and inlines one image slot as a PNG data URL.
    fn image_data_url(&self, slot: &ImageSlot) -> Result<String, BackendError> {
        let decoded = image::open(&slot.image_ref).map_err(|error| {
            BackendError::Input(format!("cannot read image {}: {error}", slot.image_ref))
        })?;
        let decoded = match &slot.crop {
            Some(bbox) => {
                let (x, y, w, h) = crop_rect(
                    bbox,
                    self.crop_padding,
                    decoded.width(),
                    decoded.height(),
                )
                .ok_or_else(|| {
                    BackendError::Input(format!(
                        "bbox {} lies outside image {}",
                        bbox.key(),
                        slot.image_ref
                    ))
                })?;
                decoded.crop_imm(x, y, w, h)
            }
            None => decoded,
        };
        let mut bytes = Vec::new();
        decoded
            .write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)
            .map_err(|error| {
                BackendError::Input(format!("cannot encode {}: {error}", slot.image_ref))
            })?;
        Ok(format!("data:image/png;base64,{}", BASE64.encode(&bytes)))
    }

    fn completion_text(&self, value: serde_json::Value) -> Result<String, BackendError> {
        let parsed: ChatResponse =
            serde_json::from_value(value).map_err(|error| BackendError::Contract {
                backend: self.id(),
                message: format!("unexpected completion shape: {error}"),
            })?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|choice| choice.message.content)
            .unwrap_or_default();
        if text.trim().is_empty() {
            return Err(BackendError::EmptyResponse { backend: self.id() });
        }
        Ok(text)
    }

    fn parse_scores(
        &self,
        value: serde_json::Value,
        expected: usize,
    ) -> Result<Vec<f64>, BackendError> {
        let parsed: ScoreResponse =
            serde_json::from_value(value).map_err(|error| BackendError::Contract {
                backend: self.id(),
                message: format!("unexpected score shape: {error}"),
            })?;
        if parsed.scores.len() != expected {
            return Err(BackendError::Contract {
                backend: self.id(),
                message: format!(
                    "scored {} candidates but {} were sent",
                    parsed.scores.len(),
                    expected
                ),
            });
        }
        Ok(parsed.scores)
    }

    fn parse_embeddings(
        &self,
        value: serde_json::Value,
        expected: usize,
    ) -> Result<Vec<Embedding>, BackendError> {
        let parsed: EmbeddingsResponse =
            serde_json::from_value(value).map_err(|error| BackendError::Contract {
                backend: self.id(),
                message: format!("unexpected embeddings shape: {error}"),
            })?;
        if parsed.data.len() != expected {
            return Err(BackendError::Contract {
                backend: self.id(),
                message: format!(
                    "returned {} embeddings for {} inputs",
                    parsed.data.len(),
                    expected
                ),
            });
        }
        let vectors: Vec<Embedding> = parsed
            .data
            .into_iter()
            .map(|datum| Embedding::new(datum.embedding))
            .collect();
        if let Some(first) = vectors.first() {
            let dim = first.dimension();
            if vectors.iter().any(|v| v.dimension() != dim || !v.is_finite()) {
                return Err(BackendError::Contract {
                    backend: self.id(),
                    message: "embedding batch has mixed or non-finite dimensions".into(),
                });
            }
        }
        Ok(vectors)
    }
}

/// Maps an HTTP status to a backend error; `None` means success.
fn classify_status(backend: &str, status: u16, body: &str) -> Option<BackendError> {
    let message = || {
        let trimmed = body.trim();
        if trimmed.len() > 200 {
            format!("{}...", &trimmed[..200])
        } else {
            trimmed.to_string()
        }
    };
    match status {
        200..=299 => None,
        429 => Some(BackendError::RateLimited {
            backend: backend.to_string(),
            message: message(),
        }),
        500..=599 => Some(BackendError::Transport {
            backend: backend.to_string(),
            message: format!("status {status}: {}", message()),
        }),
        _ => Some(BackendError::Rejected {
            backend: backend.to_string(),
            status,
            message: message(),
        }),
    }
}

/// Pixel rectangle for a padded bbox crop, clamped to the image bounds.
/// Returns `None` when the bbox starts entirely outside the image.
fn crop_rect(bbox: &BBox, padding: f64, width: u32, height: u32) -> Option<(u32, u32, u32, u32)> {
    if width == 0 || height == 0 {
        return None;
    }
    let pad_x = bbox.width * padding;
    let pad_y = bbox.height * padding;
    let x0 = (bbox.x - pad_x).max(0.0);
    let y0 = (bbox.y - pad_y).max(0.0);
    if x0 >= width as f64 || y0 >= height as f64 {
        return None;
    }
    let x1 = (bbox.x + bbox.width + pad_x).min(width as f64);
    let y1 = (bbox.y + bbox.height + pad_y).min(height as f64);
    let x = x0.floor() as u32;
    let y = y0.floor() as u32;
    let w = (x1.ceil() as u32).clamp(x + 1, width) - x;
    let h = (y1.ceil() as u32).clamp(y + 1, height) - y;
    Some((x, y, w, h))
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct ScoreResponse {
    scores: Vec<f64>,
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl ModelBackend for HttpBackend {
    fn id(&self) -> String {
        format!("http:{}", self.config.identity())
    }

    fn generate(&self, prompt: &MultimodalPrompt) -> Result<String, BackendError> {
        let mut content = vec![json!({"type": "text", "text": prompt.text})];
        for slot in &prompt.images {
            content.push(json!({
                "type": "image_url",
                "image_url": {"url": self.image_data_url(slot)?},
            }));
        }
        let mut body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": content}],
        });
        self.decoding_fields(&mut body);
        let value = self.post("chat/completions", body)?;
        self.completion_text(value)
    }

    fn chat(&self, prompt: &TextPrompt) -> Result<String, BackendError> {
        let mut body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt.text}],
        });
        self.decoding_fields(&mut body);
        let value = self.post("chat/completions", body)?;
        self.completion_text(value)
    }

    fn score_text(
        &self,
        prompt: &TextPrompt,
        candidates: &[String],
    ) -> Result<Vec<f64>, BackendError> {
        let body = json!({
            "model": self.config.model,
            "prompt": prompt.text,
            "candidates": candidates,
        });
        let value = self.post("score", body)?;
        self.parse_scores(value, candidates.len())
    }

    fn score_multimodal(
        &self,
        prompt: &MultimodalPrompt,
        candidates: &[String],
    ) -> Result<Vec<f64>, BackendError> {
        let images = prompt
            .images
            .iter()
            .map(|slot| self.image_data_url(slot))
            .collect::<Result<Vec<_>, _>>()?;
        let body = json!({
            "model": self.config.model,
            "prompt": prompt.text,
            "candidates": candidates,
            "images": images,
        });
        let value = self.post("score", body)?;
        self.parse_scores(value, candidates.len())
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Embedding>, BackendError> {
        let body = json!({"model": self.config.model, "input": texts});
        let value = self.post("embeddings", body)?;
        self.parse_embeddings(value, texts.len())
    }

    fn embed_region(&self, image_ref: &str, bbox: &BBox) -> Result<Embedding, BackendError> {
        let slot = ImageSlot {
            image_ref: image_ref.to_string(),
            crop: Some(*bbox),
        };
        let body = json!({"model": self.config.model, "image": self.image_data_url(&slot)?});
        let value = self.post("embeddings", body)?;
        Ok(self.parse_embeddings(value, 1)?.remove(0))
    }

    fn embed_image(&self, image_ref: &str) -> Result<Embedding, BackendError> {
        let slot = ImageSlot {
            image_ref: image_ref.to_string(),
            crop: None,
        };
        let body = json!({"model": self.config.model, "image": self.image_data_url(&slot)?});
        let value = self.post("embeddings", body)?;
        Ok(self.parse_embeddings(value, 1)?.remove(0))
    }
}
