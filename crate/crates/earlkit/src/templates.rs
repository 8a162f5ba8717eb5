//! Deterministic prompt rendering for every stage of the pipeline.
//!
//! Templates are data: UTF-8 files with `{slot}` placeholders and one
//! `{{image:N}}` marker per image position. The built-in set is embedded in
//! the binary; a directory can override any of them file by file. Rendering
//! applies a fixed whitespace policy (LF newlines, no trailing spaces, no
//! trailing newline) so output is byte-stable. The golden files under the
//! test-data directory are the normative renderings.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{BBox, ImageRecord, Instance};
use crate::ontology::{ArgumentRole, EventType, Ontology, OTHER_LABEL};

/// Ablation modes for the object-description stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    /// Event image, object crop, event name, and role definitions.
    Full,
    /// Object crop plus event details; the event image is withheld.
    NoEventImage,
    /// Object crop only; the prompt asks for a concise caption.
    ObjectCaptionOnly,
}

impl PromptMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PromptMode::Full => "full",
            PromptMode::NoEventImage => "no-event-image",
            PromptMode::ObjectCaptionOnly => "object-caption",
        }
    }

    pub fn parse(text: &str) -> Option<PromptMode> {
        match text {
            "full" => Some(PromptMode::Full),
            "no-event-image" => Some(PromptMode::NoEventImage),
            "object-caption" => Some(PromptMode::ObjectCaptionOnly),
            _ => None,
        }
    }
}

/// An image payload position in a multimodal prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSlot {
    pub image_ref: String,
    /// Crop to apply before dispatch; `None` sends the whole image.
    pub crop: Option<BBox>,
}

/// A rendered instruction with ordered image payloads. The n-th slot binds
/// to the `{{image:n}}` marker left verbatim in the text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalPrompt {
    pub images: Vec<ImageSlot>,
    pub text: String,
}

/// A rendered text-only instruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextPrompt {
    pub text: String,
    /// Number of answers the response is expected to carry.
    pub expected_object_count: usize,
    /// Names legal in the response; answers outside it normalize to the
    /// reserved abstention label.
    pub role_vocabulary: Vec<String>,
}

impl TextPrompt {
    /// Convenience constructor for tests and ad-hoc prompts.
    pub fn from_text(text: impl Into<String>) -> TextPrompt {
        TextPrompt {
            text: text.into(),
            expected_object_count: 1,
            role_vocabulary: Vec::new(),
        }
    }
}

/// A solved in-context example, fully captioned and described.
#[derive(Debug, Clone, PartialEq)]
pub struct SolvedExemplar {
    pub caption: String,
    pub event_name: String,
    pub role_block: String,
    pub descriptions: Vec<String>,
    pub gold_roles: Vec<String>,
}

/// Failures while loading template files or validating render inputs.
#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("failed to read template {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("template references unknown slot {{{name}}}")]
    UnknownSlot { name: String },
    #[error("{0}")]
    InvalidInput(String),
}

const TEMPLATE_FILES: [&str; 11] = [
    "gvlm_describe_full.tmpl",
    "gvlm_describe_no_event_image.tmpl",
    "gvlm_describe_object_caption.tmpl",
    "image_caption.tmpl",
    "gvlm_direct_label.tmpl",
    "llm_label_zero_shot.tmpl",
    "llm_label_few_shot.tmpl",
    "alpaca_label.tmpl",
    "event_detection.tmpl",
    "similarity.tmpl",
    "event_similarity.tmpl",
];

/// The full set of prompt templates used by a run.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    gvlm_describe_full: String,
    gvlm_describe_no_event_image: String,
    gvlm_describe_object_caption: String,
    image_caption: String,
    gvlm_direct_label: String,
    llm_label_zero_shot: String,
    llm_label_few_shot: String,
    alpaca_label: String,
    event_detection: String,
    similarity: String,
    event_similarity: String,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet::builtin()
    }
}

impl TemplateSet {
    /// The embedded template set.
    pub fn builtin() -> TemplateSet {
        TemplateSet {
            gvlm_describe_full: include_str!("../templates/gvlm_describe_full.tmpl").to_string(),
            gvlm_describe_no_event_image: include_str!(
                "../templates/gvlm_describe_no_event_image.tmpl"
            )
            .to_string(),
            gvlm_describe_object_caption: include_str!(
                "../templates/gvlm_describe_object_caption.tmpl"
            )
            .to_string(),
            image_caption: include_str!("../templates/image_caption.tmpl").to_string(),
            gvlm_direct_label: include_str!("../templates/gvlm_direct_label.tmpl").to_string(),
            llm_label_zero_shot: include_str!("../templates/llm_label_zero_shot.tmpl").to_string(),
            llm_label_few_shot: include_str!("../templates/llm_label_few_shot.tmpl").to_string(),
            alpaca_label: include_str!("../templates/alpaca_label.tmpl").to_string(),
            event_detection: include_str!("../templates/event_detection.tmpl").to_string(),
            similarity: include_str!("../templates/similarity.tmpl").to_string(),
            event_similarity: include_str!("../templates/event_similarity.tmpl").to_string(),
        }
    }

    /// Loads templates from a directory, falling back to the built-in text
    /// for any file the directory does not provide.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<TemplateSet, TemplateError> {
        let dir = dir.as_ref();
        let mut set = TemplateSet::builtin();
        for name in TEMPLATE_FILES {
            let path = dir.join(name);
            if !path.exists() {
                continue;
            }
            let text = fs::read_to_string(&path).map_err(|source| TemplateError::Io {
                path: path.display().to_string(),
                source,
            })?;
            let slot = match name {
                "gvlm_describe_full.tmpl" => &mut set.gvlm_describe_full,
                "gvlm_describe_no_event_image.tmpl" => &mut set.gvlm_describe_no_event_image,
                "gvlm_describe_object_caption.tmpl" => &mut set.gvlm_describe_object_caption,
                "image_caption.tmpl" => &mut set.image_caption,
                "gvlm_direct_label.tmpl" => &mut set.gvlm_direct_label,
                "llm_label_zero_shot.tmpl" => &mut set.llm_label_zero_shot,
                "llm_label_few_shot.tmpl" => &mut set.llm_label_few_shot,
                "alpaca_label.tmpl" => &mut set.alpaca_label,
                "event_detection.tmpl" => &mut set.event_detection,
                "similarity.tmpl" => &mut set.similarity,
                "event_similarity.tmpl" => &mut set.event_similarity,
                _ => unreachable!(),
            };
            *slot = text;
        }
        Ok(set)
    }

    /// Renders the object-description prompt for one labeling query.
    pub fn render_gvlm_description_prompt(
        &self,
        instance: &Instance,
        mode: PromptMode,
        role_block: &str,
    ) -> MultimodalPrompt {
        let object_slot = ImageSlot {
            image_ref: instance.image_path.clone(),
            crop: Some(instance.bbox),
        };
        match mode {
            PromptMode::Full => {
                let text = fill(
                    &self.gvlm_describe_full,
                    &[("event", instance.event.name.as_str()), ("role_block", role_block)],
                )
                .expect("built-in template slots");
                MultimodalPrompt {
                    images: vec![
                        ImageSlot {
                            image_ref: instance.image_path.clone(),
                            crop: None,
                        },
                        object_slot,
                    ],
                    text,
                }
            }
            PromptMode::NoEventImage => {
                let text = fill(
                    &self.gvlm_describe_no_event_image,
                    &[("event", instance.event.name.as_str()), ("role_block", role_block)],
                )
                .expect("built-in template slots");
                MultimodalPrompt {
                    images: vec![object_slot],
                    text,
                }
            }
            PromptMode::ObjectCaptionOnly => {
                let text =
                    fill(&self.gvlm_describe_object_caption, &[]).expect("built-in template slots");
                MultimodalPrompt {
                    images: vec![object_slot],
                    text,
                }
            }
        }
    }

    /// Renders the whole-image caption prompt.
    pub fn render_image_caption_prompt(&self, image: &ImageRecord) -> MultimodalPrompt {
        let text = fill(&self.image_caption, &[]).expect("built-in template slots");
        MultimodalPrompt {
            images: vec![ImageSlot {
                image_ref: image.path.clone(),
                crop: None,
            }],
            text,
        }
    }

    /// Renders the batch labeling prompt, zero-shot or with solved
    /// in-context examples. Object numbering is 1-based in document order
    /// and restarts at 1 inside each solved block.
    pub fn render_llm_labeling_prompt(
        &self,
        caption: &str,
        event: &EventType,
        role_block: &str,
        descriptions: &[String],
        exemplars: &[SolvedExemplar],
    ) -> TextPrompt {
        assert!(
            !descriptions.is_empty(),
            "labeling prompt needs at least one object description"
        );
        let object_role_lines = numbered_lines("Role of Object", descriptions, None);
        let answer_stub_lines = empty_stub_lines(descriptions.len());

        let text = if exemplars.is_empty() {
            fill(
                &self.llm_label_zero_shot,
                &[
                    ("caption", caption),
                    ("event", event.name.as_str()),
                    ("role_block", role_block),
                    ("object_role_lines", object_role_lines.as_str()),
                    ("answer_stub_lines", answer_stub_lines.as_str()),
                ],
            )
            .expect("built-in template slots")
        } else {
            let shot_intro = if exemplars.len() == 1 {
                "We will first show a single solved instance of the task, and then you will \
                 complete the task on a new query."
                    .to_string()
            } else {
                format!(
                    "We will first show {} solved instances of the task, and then you will \
                     complete the task on a new query.",
                    exemplars.len()
                )
            };
            let solved_blocks = render_solved_blocks(exemplars);
            fill(
                &self.llm_label_few_shot,
                &[
                    ("shot_intro", shot_intro.as_str()),
                    ("solved_blocks", solved_blocks.as_str()),
                    ("caption", caption),
                    ("event", event.name.as_str()),
                    ("role_block", role_block),
                    ("object_role_lines", object_role_lines.as_str()),
                    ("answer_stub_lines", answer_stub_lines.as_str()),
                ],
            )
            .expect("built-in template slots")
        };

        TextPrompt {
            text,
            expected_object_count: descriptions.len(),
            role_vocabulary: event.role_names(),
        }
    }

    /// Renders the single-object scoring prompt. The candidate vocabulary
    /// carries the reserved abstention label explicitly, since the scorer
    /// must assign it a probability.
    pub fn render_alpaca_prompt(
        &self,
        caption: &str,
        event: &EventType,
        role_block: &str,
        description: &str,
    ) -> Result<TextPrompt, TemplateError> {
        if description.trim().is_empty() {
            return Err(TemplateError::InvalidInput(
                "single-object prompt requires a non-empty object description".into(),
            ));
        }
        let text = fill(
            &self.alpaca_label,
            &[
                ("caption", caption),
                ("event", event.name.as_str()),
                ("role_block", role_block),
                ("description", description),
            ],
        )?;
        let mut role_vocabulary = event.role_names();
        role_vocabulary.push(OTHER_LABEL.to_string());
        Ok(TextPrompt {
            text,
            expected_object_count: 1,
            role_vocabulary,
        })
    }

    /// Renders the single-stage multimodal labeling prompt. The role block
    /// is extended with the reserved abstention label.
    pub fn render_gvlm_direct_earl_prompt(
        &self,
        instance: &Instance,
        role_block: &str,
    ) -> MultimodalPrompt {
        let extended = format!("{role_block}\n{OTHER_LABEL}");
        let text = fill(
            &self.gvlm_direct_label,
            &[("event", instance.event.name.as_str()), ("role_block", extended.as_str())],
        )
        .expect("built-in template slots");
        MultimodalPrompt {
            images: vec![
                ImageSlot {
                    image_ref: instance.image_path.clone(),
                    crop: None,
                },
                ImageSlot {
                    image_ref: instance.image_path.clone(),
                    crop: Some(instance.bbox),
                },
            ],
            text,
        }
    }

    /// Renders the caption-based event-detection prompt listing every event
    /// in ontology order.
    pub fn render_event_detection_prompt(&self, caption: &str, ontology: &Ontology) -> TextPrompt {
        assert!(!ontology.events.is_empty(), "ontology lists no events");
        let mut lines = Vec::with_capacity(ontology.events.len());
        for event in &ontology.events {
            let definition = event.definition.trim();
            if definition.is_empty() {
                lines.push(event.name.clone());
            } else {
                lines.push(format!("{}: {}", event.name, definition));
            }
        }
        let event_block = lines.join("\n");
        let text = fill(
            &self.event_detection,
            &[("caption", caption), ("event_block", event_block.as_str())],
        )
        .expect("built-in template slots");
        TextPrompt {
            text,
            expected_object_count: 1,
            role_vocabulary: ontology.event_names(),
        }
    }

    /// Renders the per-role similarity sentence.
    pub fn render_similarity_template(&self, role: &ArgumentRole, event: &EventType) -> String {
        fill(
            &self.similarity,
            &[("role", role.name.as_str()), ("event", event.name.as_str())],
        )
        .expect("built-in template slots")
    }

    /// Renders the per-event similarity sentence used for image-level
    /// classification.
    pub fn render_event_similarity_template(&self, event: &EventType) -> String {
        fill(&self.event_similarity, &[("event", event.name.as_str())])
            .expect("built-in template slots")
    }
}

fn render_solved_blocks(exemplars: &[SolvedExemplar]) -> String {
    let mut blocks = Vec::with_capacity(exemplars.len());
    for (index, exemplar) in exemplars.iter().enumerate() {
        assert_eq!(
            exemplar.descriptions.len(),
            exemplar.gold_roles.len(),
            "solved exemplar must pair one description with one gold role"
        );
        let header = if exemplars.len() == 1 {
            "Solved Instance:".to_string()
        } else {
            format!("Solved Instance {}:", index + 1)
        };
        let role_lines = numbered_lines("Role of Object", &exemplar.descriptions, None);
        let answer_lines =
            numbered_lines("Argument Role of Object", &exemplar.gold_roles, None);
        blocks.push(format!(
            "{header}\n\nEvent Image Description: {}\n\nEvent: {}\n\nEvent Argument Role \
             Description: {}\n\n{}\n\n{}",
            exemplar.caption.trim(),
            exemplar.event_name,
            exemplar.role_block,
            role_lines,
            answer_lines
        ));
    }
    blocks.join("\n\n")
}

fn numbered_lines(prefix: &str, values: &[String], start: Option<usize>) -> String {
    let start = start.unwrap_or(1);
    values
        .iter()
        .enumerate()
        .map(|(i, value)| format!("{prefix} {}: {}", start + i, value.trim()))
        .collect::<Vec<_>>()
        .join("\n")
}

fn empty_stub_lines(count: usize) -> String {
    (1..=count)
        .map(|i| format!("Argument Role of Object {i}:"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Substitutes `{slot}` placeholders and applies the whitespace policy.
/// `{{image:N}}` markers pass through verbatim. Slot values are trimmed.
pub fn fill(template: &str, slots: &[(&str, &str)]) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(template.len());
    let bytes = template.as_bytes();
    let mut position = 0;
    while let Some(open) = template[position..].find('{') {
        let open = position + open;
        out.push_str(&template[position..open]);
        // An immediately repeated brace is an image marker, not a slot.
        if bytes.get(open + 1) == Some(&b'{') {
            let end = template[open..]
                .find("}}")
                .map(|e| open + e + 2)
                .unwrap_or(template.len());
            out.push_str(&template[open..end]);
            position = end;
            continue;
        }
        let Some(close) = template[open..].find('}') else {
            out.push_str(&template[open..]);
            position = template.len();
            break;
        };
        let close = open + close;
        let name = &template[open + 1..close];
        let valid = !name.is_empty()
            && name
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_');
        if !valid {
            out.push_str(&template[open..=close]);
            position = close + 1;
            continue;
        }
        match slots.iter().find(|(slot, _)| *slot == name) {
            Some((_, value)) => out.push_str(value.trim()),
            None => {
                return Err(TemplateError::UnknownSlot {
                    name: name.to_string(),
                })
            }
        }
        position = close + 1;
    }
    out.push_str(&template[position..]);
    Ok(normalize_whitespace(&out))
}

/// The fixed whitespace policy: LF newlines, no trailing spaces or tabs on
/// any line, no trailing newline.
pub fn normalize_whitespace(text: &str) -> String {
    let unified = text.replace("\r\n", "\n");
    let mut lines: Vec<&str> = unified.split('\n').map(|l| l.trim_end()).collect();
    while lines.last() == Some(&"") {
        lines.pop();
    }
    lines.join("\n")
}
