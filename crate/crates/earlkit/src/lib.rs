//! Training-free event argument role labeling for images.
//!
//! Given an image depicting an event and a set of object bounding boxes,
//! this crate assigns each object an argument role from an event ontology
//! without any task-specific training. The flagship method prompts a vision
//! language model to describe each object in context, then asks a text model
//! to label all objects of an image in one pass; alternative methods score
//! role candidates directly against the image or fall back to embedding
//! similarity. Everything downstream of the models is deterministic: reruns
//! against the same backends produce byte-identical predictions.
//!
//! The crate splits into:
//!
//! - [`ontology`] and [`dataset`]: the label space and the annotated images.
//! - [`templates`]: prompt construction for every model interaction.
//! - [`backends`]: the model trait, HTTP client, mocks, and the wrapper
//!   stack (archive, cache, retry, counting, context guard).
//! - [`pipeline`]: the prompting methods and response parsing.
//! - [`baseline`]: embedding-similarity labeling and event detection.
//! - [`evaluator`]: micro-averaged scoring and report rendering.
//! - [`methods`]: the name-keyed registry the CLI selects methods from.
//! - [`config`]: the TOML run description and backend assembly.

pub mod backends;
pub mod baseline;
pub mod config;
pub mod dataset;
pub mod evaluator;
pub mod methods;
pub mod ontology;
pub mod pipeline;
pub mod templates;
