//! Event ontologies: event types, their argument roles, and the definition
//! blocks that prompts embed.
//!
//! An ontology is loaded from a JSON document, validated, and then narrowed
//! for a run: roles that cannot be grounded in a bounding box (for example
//! "place") are excluded, and events left with too few roles are filtered
//! out. The surviving events supply the candidate role vocabulary for every
//! labeling query.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reserved abstention label. Predictors may fall back to it at any time, so
/// it is appended to candidate vocabularies at prediction time and must never
/// appear as an ontology role name.
pub const OTHER_LABEL: &str = "Other";

/// One argument role of an event type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgumentRole {
    pub name: String,
    /// Guideline sentence describing the role. May be empty when the source
    /// dataset ships role names only.
    #[serde(default)]
    pub definition: String,
}

/// An event type with its ordered argument roles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventType {
    pub name: String,
    #[serde(default)]
    pub definition: String,
    pub roles: Vec<ArgumentRole>,
}

impl EventType {
    /// Role names in ontology order.
    pub fn role_names(&self) -> Vec<String> {
        self.roles.iter().map(|r| r.name.clone()).collect()
    }
}

/// An ordered catalog of event types.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ontology {
    /// Tag identifying the catalog, typically the dataset name.
    pub name: String,
    pub events: Vec<EventType>,
}

impl Ontology {
    /// Looks up an event by exact name.
    pub fn event(&self, name: &str) -> Option<&EventType> {
        self.events.iter().find(|e| e.name == name)
    }

    /// Event names in ontology order.
    pub fn event_names(&self) -> Vec<String> {
        self.events.iter().map(|e| e.name.clone()).collect()
    }
}

/// Failures while loading or validating an ontology document.
#[derive(Debug, Error)]
pub enum OntologyError {
    #[error("failed to read ontology {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed ontology document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid ontology: {0}")]
    Validation(String),
}

/// Loads and validates an ontology from a JSON file.
pub fn load_ontology(path: impl AsRef<Path>) -> Result<Ontology, OntologyError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| OntologyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_ontology(&text)
}

/// Parses and validates an ontology from JSON text.
pub fn parse_ontology(text: &str) -> Result<Ontology, OntologyError> {
    let ontology: Ontology = serde_json::from_str(text)?;
    validate(&ontology)?;
    Ok(ontology)
}

fn validate(ontology: &Ontology) -> Result<(), OntologyError> {
    if ontology.events.is_empty() {
        return Err(OntologyError::Validation(
            "ontology lists no events".into(),
        ));
    }
    let mut seen_events = BTreeSet::new();
    for event in &ontology.events {
        if event.name.trim().is_empty() {
            return Err(OntologyError::Validation("event with empty name".into()));
        }
        if !seen_events.insert(event.name.to_lowercase()) {
            return Err(OntologyError::Validation(format!(
                "duplicate event name {:?}",
                event.name
            )));
        }
        if event.roles.is_empty() {
            return Err(OntologyError::Validation(format!(
                "event {:?} lists no roles",
                event.name
            )));
        }
        let mut seen_roles = BTreeSet::new();
        for role in &event.roles {
            if role.name.trim().is_empty() {
                return Err(OntologyError::Validation(format!(
                    "event {:?} has a role with an empty name",
                    event.name
                )));
            }
            if role.name.eq_ignore_ascii_case(OTHER_LABEL) {
                return Err(OntologyError::Validation(format!(
                    "event {:?} uses the reserved role name {:?}",
                    event.name, OTHER_LABEL
                )));
            }
            if !seen_roles.insert(role.name.to_lowercase()) {
                return Err(OntologyError::Validation(format!(
                    "event {:?} has duplicate role name {:?}",
                    event.name, role.name
                )));
            }
        }
    }
    Ok(())
}

/// Keeps only events with at least `min_roles` argument roles.
pub fn filter_min_roles(ontology: &Ontology, min_roles: usize) -> Ontology {
    Ontology {
        name: ontology.name.clone(),
        events: ontology
            .events
            .iter()
            .filter(|e| e.roles.len() >= min_roles)
            .cloned()
            .collect(),
    }
}

/// Removes every role whose name matches `role_name` (case-insensitive,
/// whitespace-trimmed) from all events. Events left without roles are
/// dropped, since they can never produce a labeling query.
pub fn exclude_role(ontology: &Ontology, role_name: &str) -> Ontology {
    let needle = role_name.trim().to_lowercase();
    let mut events = Vec::new();
    for event in &ontology.events {
        let roles: Vec<ArgumentRole> = event
            .roles
            .iter()
            .filter(|r| r.name.trim().to_lowercase() != needle)
            .cloned()
            .collect();
        if !roles.is_empty() {
            events.push(EventType {
                name: event.name.clone(),
                definition: event.definition.clone(),
                roles,
            });
        }
    }
    Ontology {
        name: ontology.name.clone(),
        events,
    }
}

/// Applies the standard narrowing for a run: every name in `excluded_roles`
/// is removed, then events with fewer than `min_roles` roles are dropped.
pub fn narrow_for_run(ontology: &Ontology, excluded_roles: &[String], min_roles: usize) -> Ontology {
    let mut current = ontology.clone();
    for role in excluded_roles {
        current = exclude_role(&current, role);
    }
    filter_min_roles(&current, min_roles)
}

/// Renders the role-definition block substituted into prompts: one line per
/// role in ontology order, `name: definition`, or the name alone when the
/// definition is empty.
pub fn role_definition_block(event: &EventType) -> String {
    let mut lines = Vec::with_capacity(event.roles.len());
    for role in &event.roles {
        let definition = role.definition.trim();
        if definition.is_empty() {
            lines.push(role.name.clone());
        } else {
            lines.push(format!("{}: {}", role.name, definition));
        }
    }
    lines.join("\n")
}

/// Ontology documents shipped with the crate.
pub mod fixtures {
    /// Event catalog for the multimedia news benchmark (M2E2 naming scheme),
    /// with role definitions taken from its annotation guidelines.
    pub const M2E2_ONTOLOGY: &str = include_str!("../fixtures/m2e2.json");
    /// Verb catalog for the situation-recognition benchmark (SWiG). Role
    /// slots are uniform placeholders; the source release does not pair its
    /// verbs with role definitions.
    pub const SWIG_ONTOLOGY: &str = include_str!("../fixtures/swig.json");
}
