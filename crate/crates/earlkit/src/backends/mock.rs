//! Deterministic mock backends for tests and offline runs.
//!
//! All mocks are pure functions of the prompt (and, for the oracle, of the
//! gold annotations they were built from), so mock-backed runs are exactly
//! reproducible. Each mock shares a [`CallCounter`] with the harness so
//! tests can assert how many dispatches actually happened.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use sha2::{Digest, Sha256};

use crate::backends::{
    prompt_digest_multimodal, prompt_digest_text, sha256_hex, BackendError, CallCounter,
    Embedding, ModelBackend,
};
use crate::dataset::{BBox, Dataset};
use crate::ontology::OTHER_LABEL;
use crate::templates::{ImageSlot, MultimodalPrompt, TextPrompt};

fn role_phrase_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"plays the (.+?) role").unwrap())
}

fn event_phrase_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"depicting the (.+?) event").unwrap())
}

fn object_line_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^Role of Object (\d+): (.*)$").unwrap())
}

fn description_line_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^Role of Object: (.*)$").unwrap())
}

fn caption_line_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^Event Image Description: (.*)$").unwrap())
}

fn similarity_sentence_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^An object playing (.+?) role in the (.+?) event\.$").unwrap())
}

fn event_sentence_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^An image depicting the (.+?) event\.$").unwrap())
}

/// Deterministic pseudo-vector derived from a tag. Equal tags give equal
/// vectors; distinct tags give vectors that are distinct with overwhelming
/// probability.
fn tag_vector(tag: &str, dimension: usize) -> Embedding {
    let digest = Sha256::digest(tag.as_bytes());
    let mut seed_bytes = [0u8; 8];
    seed_bytes.copy_from_slice(&digest[..8]);
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from_le_bytes(seed_bytes));
    let values = (0..dimension).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Embedding::new(values)
}

/// Mock returning canned text or scores keyed by prompt digest. Unscripted
/// prompts get a reply derived purely from the digest, so behavior stays a
/// pure function of the input.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    id: String,
    replies: BTreeMap<String, String>,
    scores: BTreeMap<String, Vec<f64>>,
    counter: CallCounter,
}

impl ScriptedBackend {
    pub fn new(id: impl Into<String>) -> ScriptedBackend {
        ScriptedBackend {
            id: id.into(),
            ..ScriptedBackend::default()
        }
    }

    pub fn with_counter(mut self, counter: CallCounter) -> ScriptedBackend {
        self.counter = counter;
        self
    }

    /// Scripts a reply for an exact prompt digest.
    pub fn script(mut self, digest: impl Into<String>, reply: impl Into<String>) -> ScriptedBackend {
        self.replies.insert(digest.into(), reply.into());
        self
    }

    /// Scripts a reply keyed by the digest of a text prompt.
    pub fn script_text(self, prompt_text: &str, reply: impl Into<String>) -> ScriptedBackend {
        let digest = prompt_digest_text(&TextPrompt::from_text(prompt_text));
        self.script(digest, reply)
    }

    /// Scripts candidate scores for an exact prompt digest.
    pub fn script_scores(mut self, digest: impl Into<String>, scores: Vec<f64>) -> ScriptedBackend {
        self.scores.insert(digest.into(), scores);
        self
    }

    fn reply_for(&self, digest: &str) -> String {
        match self.replies.get(digest) {
            Some(text) => text.clone(),
            None => format!("unscripted:{}", &digest[..12]),
        }
    }

    fn scores_for(&self, digest: &str, candidates: &[String]) -> Vec<f64> {
        if let Some(scores) = self.scores.get(digest) {
            return scores.clone();
        }
        candidates
            .iter()
            .map(|candidate| {
                let mixed = sha256_hex(format!("{digest}|{candidate}").as_bytes());
                let head = u64::from_str_radix(&mixed[..8], 16).unwrap();
                head as f64 / u32::MAX as f64
            })
            .collect()
    }
}

impl ModelBackend for ScriptedBackend {
    fn id(&self) -> String {
        format!("scripted:{}", self.id)
    }

    fn generate(&self, prompt: &MultimodalPrompt) -> Result<String, BackendError> {
        self.counter.increment();
        Ok(self.reply_for(&prompt_digest_multimodal(prompt)))
    }

    fn chat(&self, prompt: &TextPrompt) -> Result<String, BackendError> {
        self.counter.increment();
        Ok(self.reply_for(&prompt_digest_text(prompt)))
    }

    fn score_text(
        &self,
        prompt: &TextPrompt,
        candidates: &[String],
    ) -> Result<Vec<f64>, BackendError> {
        self.counter.increment();
        Ok(self.scores_for(&prompt_digest_text(prompt), candidates))
    }

    fn score_multimodal(
        &self,
        prompt: &MultimodalPrompt,
        candidates: &[String],
    ) -> Result<Vec<f64>, BackendError> {
        self.counter.increment();
        Ok(self.scores_for(&prompt_digest_multimodal(prompt), candidates))
    }
}

/// Mock that answers every prompt correctly by consulting the gold
/// annotations it was constructed from. It reads nothing but the prompt at
/// call time: regions are recognized by (image locator, crop) and phrased
/// answers carry the gold labels in the formats the parsers expect.
#[derive(Debug, Clone)]
pub struct OracleBackend {
    id: String,
    region_roles: BTreeMap<(String, String), String>,
    image_events: BTreeMap<String, String>,
    supports_scoring: bool,
    embedding_dimension: usize,
    counter: CallCounter,
}

impl OracleBackend {
    pub fn from_dataset(id: impl Into<String>, dataset: &Dataset) -> OracleBackend {
        let mut region_roles = BTreeMap::new();
        let mut image_events = BTreeMap::new();
        for image in &dataset.images {
            image_events.insert(image.path.clone(), image.event_name.clone());
            for object in &image.objects {
                if let Some(role) = &object.gold_role {
                    region_roles.insert(
                        (image.path.clone(), object.bbox.key()),
                        role.clone(),
                    );
                }
            }
        }
        OracleBackend {
            id: id.into(),
            region_roles,
            image_events,
            supports_scoring: true,
            embedding_dimension: 16,
            counter: CallCounter::new(),
        }
    }

    pub fn with_counter(mut self, counter: CallCounter) -> OracleBackend {
        self.counter = counter;
        self
    }

    /// Disables the scoring capability so callers exercise their
    /// generate-then-normalize fallback.
    pub fn without_scoring(mut self) -> OracleBackend {
        self.supports_scoring = false;
        self
    }

    fn object_slot<'a>(&self, prompt: &'a MultimodalPrompt) -> Option<&'a ImageSlot> {
        prompt.images.iter().rev().find(|slot| slot.crop.is_some())
    }

    fn region_role(&self, slot: &ImageSlot) -> Option<&String> {
        let crop = slot.crop.as_ref()?;
        self.region_roles
            .get(&(slot.image_ref.clone(), crop.key()))
    }

    fn caption_for(&self, image_ref: &str) -> String {
        match self.image_events.get(image_ref) {
            Some(event) => format!("An image depicting the {event} event."),
            None => "An image of an unknown scene.".to_string(),
        }
    }

    fn description_for(&self, slot: &ImageSlot) -> String {
        match self.region_role(slot) {
            Some(role) => {
                let event = self
                    .image_events
                    .get(&slot.image_ref)
                    .cloned()
                    .unwrap_or_else(|| "unknown".to_string());
                format!("The entity plays the {role} role in the {event} event.")
            }
            None => "An unidentified object.".to_string(),
        }
    }
}

impl ModelBackend for OracleBackend {
    fn id(&self) -> String {
        format!("oracle:{}", self.id)
    }

    fn generate(&self, prompt: &MultimodalPrompt) -> Result<String, BackendError> {
        self.counter.increment();
        if prompt.text.contains("What is the role of the entity") {
            let answer = self
                .object_slot(prompt)
                .and_then(|slot| self.region_role(slot))
                .cloned()
                .unwrap_or_else(|| OTHER_LABEL.to_string());
            return Ok(answer);
        }
        match self.object_slot(prompt) {
            Some(slot) => Ok(self.description_for(slot)),
            None => {
                let image_ref = prompt
                    .images
                    .first()
                    .map(|slot| slot.image_ref.as_str())
                    .unwrap_or("");
                Ok(self.caption_for(image_ref))
            }
        }
    }

    fn chat(&self, prompt: &TextPrompt) -> Result<String, BackendError> {
        self.counter.increment();
        if prompt.text.contains("Possible Event Types:") {
            let caption = caption_line_pattern()
                .captures(&prompt.text)
                .map(|c| c[1].to_string())
                .unwrap_or_default();
            let answer = event_phrase_pattern()
                .captures(&caption)
                .map(|c| c[1].to_string())
                .unwrap_or_else(|| "unsure".to_string());
            return Ok(answer);
        }
        // Only the query section matters; solved in-context blocks restate
        // descriptions that must not be answered again.
        let query = match prompt.text.rfind("Query Instance:") {
            Some(at) => &prompt.text[at..],
            None => prompt.text.as_str(),
        };
        let mut lines = Vec::new();
        for captures in object_line_pattern().captures_iter(query) {
            let index = &captures[1];
            let role = role_phrase_pattern()
                .captures(&captures[2])
                .map(|c| c[1].to_string())
                .unwrap_or_else(|| OTHER_LABEL.to_string());
            lines.push(format!("Argument Role of Object {index}: {role}"));
        }
        if lines.is_empty() {
            return Err(BackendError::Contract {
                backend: self.id(),
                message: "labeling prompt carried no object descriptions".into(),
            });
        }
        Ok(lines.join("\n"))
    }

    fn score_text(
        &self,
        prompt: &TextPrompt,
        candidates: &[String],
    ) -> Result<Vec<f64>, BackendError> {
        if !self.supports_scoring {
            return Err(BackendError::Unsupported {
                backend: self.id(),
                capability: "score_text",
            });
        }
        self.counter.increment();
        let description = description_line_pattern()
            .captures(&prompt.text)
            .map(|c| c[1].to_string())
            .unwrap_or_default();
        let gold = role_phrase_pattern()
            .captures(&description)
            .map(|c| c[1].to_string())
            .unwrap_or_else(|| OTHER_LABEL.to_string());
        Ok(score_one_hot(candidates, &gold))
    }

    fn score_multimodal(
        &self,
        prompt: &MultimodalPrompt,
        candidates: &[String],
    ) -> Result<Vec<f64>, BackendError> {
        if !self.supports_scoring {
            return Err(BackendError::Unsupported {
                backend: self.id(),
                capability: "score_multimodal",
            });
        }
        self.counter.increment();
        let gold = self
            .object_slot(prompt)
            .and_then(|slot| self.region_role(slot))
            .cloned()
            .unwrap_or_else(|| OTHER_LABEL.to_string());
        Ok(score_one_hot(candidates, &gold))
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Embedding>, BackendError> {
        self.counter.increment();
        let vectors = texts
            .iter()
            .map(|text| {
                if let Some(captures) = similarity_sentence_pattern().captures(text) {
                    tag_vector(&format!("role:{}", captures[1].to_lowercase()), self.embedding_dimension)
                } else if let Some(captures) = event_sentence_pattern().captures(text) {
                    tag_vector(&format!("event:{}", captures[1].to_lowercase()), self.embedding_dimension)
                } else {
                    tag_vector(&format!("text:{text}"), self.embedding_dimension)
                }
            })
            .collect();
        Ok(vectors)
    }

    fn embed_region(&self, image_ref: &str, bbox: &BBox) -> Result<Embedding, BackendError> {
        self.counter.increment();
        let key = (image_ref.to_string(), bbox.key());
        match self.region_roles.get(&key) {
            Some(role) => Ok(tag_vector(
                &format!("role:{}", role.to_lowercase()),
                self.embedding_dimension,
            )),
            None => Err(BackendError::Input(format!(
                "no gold region for {image_ref} at {}",
                bbox.key()
            ))),
        }
    }

    fn embed_image(&self, image_ref: &str) -> Result<Embedding, BackendError> {
        self.counter.increment();
        match self.image_events.get(image_ref) {
            Some(event) => Ok(tag_vector(
                &format!("event:{}", event.to_lowercase()),
                self.embedding_dimension,
            )),
            None => Err(BackendError::Input(format!(
                "no gold event for image {image_ref}"
            ))),
        }
    }
}

fn score_one_hot(candidates: &[String], winner: &str) -> Vec<f64> {
    let scores: Vec<f64> = candidates
        .iter()
        .map(|candidate| {
            if candidate.eq_ignore_ascii_case(winner) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    if scores.contains(&1.0) {
        return scores;
    }
    // The gold answer is outside the candidate list; prefer the reserved
    // abstention label when present.
    candidates
        .iter()
        .map(|candidate| {
            if candidate.eq_ignore_ascii_case(OTHER_LABEL) {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Mock answering every request with the same payload.
#[derive(Debug, Clone)]
pub struct ConstantBackend {
    id: String,
    reply: String,
    score: f64,
    counter: CallCounter,
}

impl ConstantBackend {
    pub fn new(id: impl Into<String>, reply: impl Into<String>) -> ConstantBackend {
        ConstantBackend {
            id: id.into(),
            reply: reply.into(),
            score: 0.5,
            counter: CallCounter::new(),
        }
    }

    pub fn with_counter(mut self, counter: CallCounter) -> ConstantBackend {
        self.counter = counter;
        self
    }

    pub fn with_score(mut self, score: f64) -> ConstantBackend {
        self.score = score;
        self
    }
}

impl ModelBackend for ConstantBackend {
    fn id(&self) -> String {
        format!("constant:{}", self.id)
    }

    fn generate(&self, _prompt: &MultimodalPrompt) -> Result<String, BackendError> {
        self.counter.increment();
        Ok(self.reply.clone())
    }

    fn chat(&self, _prompt: &TextPrompt) -> Result<String, BackendError> {
        self.counter.increment();
        Ok(self.reply.clone())
    }

    fn score_text(
        &self,
        _prompt: &TextPrompt,
        candidates: &[String],
    ) -> Result<Vec<f64>, BackendError> {
        self.counter.increment();
        Ok(vec![self.score; candidates.len()])
    }

    fn score_multimodal(
        &self,
        _prompt: &MultimodalPrompt,
        candidates: &[String],
    ) -> Result<Vec<f64>, BackendError> {
        self.counter.increment();
        Ok(vec![self.score; candidates.len()])
    }
}

/// Wrapper that fails the first `n` calls with a transient error, then
/// delegates. Used to exercise retry policies.
pub struct FailingBackend<B> {
    inner: B,
    remaining_failures: AtomicUsize,
}

impl<B: ModelBackend> FailingBackend<B> {
    pub fn new(inner: B, failures: usize) -> FailingBackend<B> {
        FailingBackend {
            inner,
            remaining_failures: AtomicUsize::new(failures),
        }
    }

    fn trip(&self) -> Result<(), BackendError> {
        let remaining = self.remaining_failures.load(Ordering::Relaxed);
        if remaining > 0 {
            self.remaining_failures.store(remaining - 1, Ordering::Relaxed);
            return Err(BackendError::Transport {
                backend: self.id(),
                message: "injected transient failure".into(),
            });
        }
        Ok(())
    }
}

impl<B: ModelBackend> ModelBackend for FailingBackend<B> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn generate(&self, prompt: &MultimodalPrompt) -> Result<String, BackendError> {
        self.trip()?;
        self.inner.generate(prompt)
    }

    fn chat(&self, prompt: &TextPrompt) -> Result<String, BackendError> {
        self.trip()?;
        self.inner.chat(prompt)
    }

    fn score_text(
        &self,
        prompt: &TextPrompt,
        candidates: &[String],
    ) -> Result<Vec<f64>, BackendError> {
        self.trip()?;
        self.inner.score_text(prompt, candidates)
    }

    fn score_multimodal(
        &self,
        prompt: &MultimodalPrompt,
        candidates: &[String],
    ) -> Result<Vec<f64>, BackendError> {
        self.trip()?;
        self.inner.score_multimodal(prompt, candidates)
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Embedding>, BackendError> {
        self.trip()?;
        self.inner.embed_texts(texts)
    }

    fn embed_region(&self, image_ref: &str, bbox: &BBox) -> Result<Embedding, BackendError> {
        self.trip()?;
        self.inner.embed_region(image_ref, bbox)
    }

    fn embed_image(&self, image_ref: &str) -> Result<Embedding, BackendError> {
        self.trip()?;
        self.inner.embed_image(image_ref)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ImageRecord, ObjectRegion};

    fn tiny_dataset() -> Dataset {
        Dataset {
            images: vec![ImageRecord {
                id: "img1".into(),
                path: "img1.png".into(),
                event_name: "Justice.ArrestJail".into(),
                objects: vec![
                    ObjectRegion {
                        id: "o1".into(),
                        bbox: BBox::from([0.0, 0.0, 10.0, 10.0]),
                        gold_role: Some("Agent".into()),
                    },
                    ObjectRegion {
                        id: "o2".into(),
                        bbox: BBox::from([5.0, 5.0, 10.0, 10.0]),
                        gold_role: Some("Person".into()),
                    },
                ],
            }],
        }
    }

    #[test]
    fn scripted_replies_are_a_pure_function_of_the_digest() {
        let backend = ScriptedBackend::new("s").script_text("hello", "world");
        let scripted = backend.chat(&TextPrompt::from_text("hello")).unwrap();
        assert_eq!(scripted, "world");
        let a = backend.chat(&TextPrompt::from_text("unknown")).unwrap();
        let b = backend.chat(&TextPrompt::from_text("unknown")).unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with("unscripted:"));
    }

    #[test]
    fn oracle_describes_regions_with_their_gold_role() {
        let oracle = OracleBackend::from_dataset("o", &tiny_dataset());
        let prompt = MultimodalPrompt {
            images: vec![
                ImageSlot {
                    image_ref: "img1.png".into(),
                    crop: None,
                },
                ImageSlot {
                    image_ref: "img1.png".into(),
                    crop: Some(BBox::from([0.0, 0.0, 10.0, 10.0])),
                },
            ],
            text: "Describe the role of the entity".into(),
        };
        let description = oracle.generate(&prompt).unwrap();
        assert_eq!(
            description,
            "The entity plays the Agent role in the Justice.ArrestJail event."
        );
    }

    #[test]
    fn oracle_captions_embed_the_gold_event() {
        let oracle = OracleBackend::from_dataset("o", &tiny_dataset());
        let prompt = MultimodalPrompt {
            images: vec![ImageSlot {
                image_ref: "img1.png".into(),
                crop: None,
            }],
            text: "Describe this image in detail.".into(),
        };
        let caption = oracle.generate(&prompt).unwrap();
        assert_eq!(caption, "An image depicting the Justice.ArrestJail event.");
    }

    #[test]
    fn oracle_chat_answers_each_query_object() {
        let oracle = OracleBackend::from_dataset("o", &tiny_dataset());
        let prompt = TextPrompt::from_text(
            "Role of Object 1: The entity plays the Agent role in the X event.\n\
             Role of Object 2: The entity plays the Person role in the X event.\n\n\
             Argument Role of Object 1:\nArgument Role of Object 2:",
        );
        let reply = oracle.chat(&prompt).unwrap();
        assert_eq!(
            reply,
            "Argument Role of Object 1: Agent\nArgument Role of Object 2: Person"
        );
    }

    #[test]
    fn oracle_chat_ignores_solved_blocks() {
        let oracle = OracleBackend::from_dataset("o", &tiny_dataset());
        let prompt = TextPrompt::from_text(
            "Solved Instance:\n\nRole of Object 1: The entity plays the Giver role in the Y \
             event.\n\nArgument Role of Object 1: Giver\n\nQuery Instance:\n\nRole of Object 1: \
             The entity plays the Person role in the X event.\n\nArgument Role of Object 1:",
        );
        let reply = oracle.chat(&prompt).unwrap();
        assert_eq!(reply, "Argument Role of Object 1: Person");
    }

    #[test]
    fn oracle_scores_put_all_mass_on_the_gold_candidate() {
        let oracle = OracleBackend::from_dataset("o", &tiny_dataset());
        let prompt = TextPrompt::from_text(
            "Role of Object: The entity plays the Person role in the X event.\n\nArgument Role \
             of Object:",
        );
        let candidates = vec!["Agent".to_string(), "Person".to_string(), "Other".to_string()];
        let scores = oracle.score_text(&prompt, &candidates).unwrap();
        assert_eq!(scores, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn oracle_without_scoring_reports_the_capability_gap() {
        let oracle = OracleBackend::from_dataset("o", &tiny_dataset()).without_scoring();
        let prompt = TextPrompt::from_text("Role of Object: x");
        let err = oracle.score_text(&prompt, &["A".into()]).unwrap_err();
        assert!(matches!(err, BackendError::Unsupported { .. }));
    }

    #[test]
    fn oracle_embeddings_align_regions_with_their_role_sentence() {
        let oracle = OracleBackend::from_dataset("o", &tiny_dataset());
        let region = oracle
            .embed_region("img1.png", &BBox::from([0.0, 0.0, 10.0, 10.0]))
            .unwrap();
        let texts = vec![
            "An object playing Agent role in the Justice.ArrestJail event.".to_string(),
            "An object playing Person role in the Justice.ArrestJail event.".to_string(),
        ];
        let templates = oracle.embed_texts(&texts).unwrap();
        assert_eq!(region, templates[0]);
        assert_ne!(region, templates[1]);
    }

    #[test]
    fn failing_backend_recovers_after_injected_failures() {
        let counter = CallCounter::new();
        let inner = ConstantBackend::new("c", "ok").with_counter(counter.clone());
        let flaky = FailingBackend::new(inner, 2);
        let prompt = TextPrompt::from_text("x");
        assert!(flaky.chat(&prompt).unwrap_err().is_transient());
        assert!(flaky.chat(&prompt).unwrap_err().is_transient());
        assert_eq!(flaky.chat(&prompt).unwrap(), "ok");
        assert_eq!(counter.count(), 1);
    }
}
