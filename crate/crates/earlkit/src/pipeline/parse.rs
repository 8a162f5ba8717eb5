//! Extraction of role labels from free-form model responses.
//!
//! Responses are expected in the answer-block format (`Argument Role of
//! Object 3: Agent`), but models drift: prose wrappers, missing or extra
//! answers, truncation, and invented role names all occur. Parsing degrades
//! through a fixed ladder so every response yields exactly the expected
//! number of labels: answer-pattern lines first, positional non-empty lines
//! when no pattern line exists, and the reserved abstention label per slot
//! that remains unfilled.

use std::sync::OnceLock;

use regex::Regex;

use crate::ontology::OTHER_LABEL;

/// Characters stripped from both ends of a raw answer before matching:
/// whitespace plus sentence punctuation, quotes, brackets, and markdown
/// emphasis.
const TRIM_SET: &[char] = &[
    ' ', '\t', '\r', '\n', '.', ',', ':', ';', '!', '?', '"', '\'', '`', '*', '(', ')', '[', ']',
    '{', '}', '\u{2018}', '\u{2019}', '\u{201C}', '\u{201D}',
];

fn answer_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)argument\s+role\s+of\s+object\s*(\d+)\s*:[ \t]*([^\n]*)").unwrap()
    })
}

/// Maps a raw answer onto the vocabulary, or onto the reserved abstention
/// label when no unambiguous mapping exists.
///
/// The ladder: trim, recognize the abstention label itself, case-insensitive
/// exact match, then unique-substring match (the answer mentions exactly one
/// distinct vocabulary name). Canonical vocabulary casing is returned. The
/// function is idempotent over its own outputs.
pub fn normalize_label(raw: &str, vocabulary: &[String]) -> String {
    let trimmed = raw.trim_matches(TRIM_SET);
    if trimmed.is_empty() {
        return OTHER_LABEL.to_string();
    }
    if trimmed.eq_ignore_ascii_case(OTHER_LABEL) {
        return OTHER_LABEL.to_string();
    }
    let folded = trimmed.to_lowercase();
    for name in vocabulary {
        if name.to_lowercase() == folded {
            return name.clone();
        }
    }
    let mut contained = vocabulary
        .iter()
        .filter(|name| folded.contains(&name.to_lowercase()));
    match (contained.next(), contained.next()) {
        (Some(only), None) => only.clone(),
        _ => OTHER_LABEL.to_string(),
    }
}

/// Labels extracted from one response, plus human-readable parse warnings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedLabels {
    pub labels: Vec<String>,
    pub warnings: Vec<String>,
}

/// Extracts exactly `expected_count` normalized labels from a response.
/// Never fails: unusable slots degrade to the abstention label and the
/// degradation is reported in `warnings`.
pub fn parse_labels(response: &str, expected_count: usize, vocabulary: &[String]) -> ParsedLabels {
    assert!(expected_count >= 1, "a labeling response answers at least one object");
    let mut warnings = Vec::new();
    let mut slots: Vec<Option<String>> = vec![None; expected_count];
    let mut pattern_seen = false;

    for captures in answer_pattern().captures_iter(response) {
        pattern_seen = true;
        let index: usize = match captures[1].parse() {
            Ok(index) => index,
            Err(_) => continue,
        };
        let answer = captures[2].trim();
        if index == 0 || index > expected_count {
            warnings.push(format!(
                "response answered object {index} but objects are numbered 1..={expected_count}"
            ));
            continue;
        }
        let slot = &mut slots[index - 1];
        if !answer.is_empty() || slot.is_none() {
            *slot = Some(answer.to_string());
        }
    }

    if !pattern_seen {
        let lines: Vec<&str> = response
            .lines()
            .map(str::trim)
            .filter(|line| !line.is_empty())
            .collect();
        if lines.is_empty() {
            warnings.push("empty response; every object falls back to the abstention label".into());
        } else {
            warnings.push("no answer-pattern lines; falling back to positional lines".into());
            for (slot, line) in slots.iter_mut().zip(&lines) {
                *slot = Some((*line).to_string());
            }
            if lines.len() > expected_count {
                warnings.push(format!(
                    "response carried {} lines for {expected_count} objects; extras ignored",
                    lines.len()
                ));
            }
        }
    }

    let mut labels = Vec::with_capacity(expected_count);
    for (position, slot) in slots.into_iter().enumerate() {
        match slot {
            Some(raw) => {
                let label = normalize_label(&raw, vocabulary);
                if label == OTHER_LABEL && !raw.trim_matches(TRIM_SET).is_empty()
                    && !raw.trim_matches(TRIM_SET).eq_ignore_ascii_case(OTHER_LABEL)
                {
                    warnings.push(format!(
                        "object {}: answer {:?} not in the role vocabulary",
                        position + 1,
                        raw
                    ));
                }
                labels.push(label);
            }
            None => {
                if pattern_seen {
                    warnings.push(format!("object {}: no answer line in response", position + 1));
                }
                labels.push(OTHER_LABEL.to_string());
            }
        }
    }

    ParsedLabels { labels, warnings }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(names: &[&str]) -> Vec<String> {
        names.iter().map(|n| n.to_string()).collect()
    }

    #[test]
    fn answer_block_parses_in_slot_order() {
        let parsed = parse_labels(
            "Argument Role of Object 1: Attacker\nArgument Role of Object 2: Target",
            2,
            &vocab(&["Attacker", "Target", "Instrument"]),
        );
        assert_eq!(parsed.labels, vec!["Attacker", "Target"]);
        assert!(parsed.warnings.is_empty());
    }

    #[test]
    fn prose_around_the_answer_block_is_ignored() {
        let clean = parse_labels(
            "Argument Role of Object 1: Agent",
            1,
            &vocab(&["Agent", "Person"]),
        );
        let wrapped = parse_labels(
            "Sure! Here is my analysis.\nThe Argument Role of Object 1: Agent\nHope that helps.",
            1,
            &vocab(&["Agent", "Person"]),
        );
        assert_eq!(wrapped.labels, clean.labels);
    }

    #[test]
    fn missing_answers_fall_back_to_the_abstention_label() {
        let parsed = parse_labels(
            "Argument Role of Object 1: Agent",
            3,
            &vocab(&["Agent", "Person"]),
        );
        assert_eq!(parsed.labels, vec!["Agent", "Other", "Other"]);
        assert_eq!(parsed.warnings.len(), 2);
    }

    #[test]
    fn out_of_range_answers_are_dropped_with_a_warning() {
        let parsed = parse_labels(
            "Argument Role of Object 1: Agent\nArgument Role of Object 5: Person",
            1,
            &vocab(&["Agent", "Person"]),
        );
        assert_eq!(parsed.labels, vec!["Agent"]);
        assert!(parsed.warnings[0].contains("object 5"));
    }

    #[test]
    fn later_nonempty_answers_override_earlier_ones() {
        let parsed = parse_labels(
            "Argument Role of Object 1: Agent\nArgument Role of Object 1: Person\nArgument Role of Object 1:",
            1,
            &vocab(&["Agent", "Person"]),
        );
        assert_eq!(parsed.labels, vec!["Person"]);
    }

    #[test]
    fn positional_fallback_reads_bare_lines() {
        let parsed = parse_labels(
            "Agent\nPerson\n",
            2,
            &vocab(&["Agent", "Person", "Instrument"]),
        );
        assert_eq!(parsed.labels, vec!["Agent", "Person"]);
        assert!(parsed.warnings[0].contains("positional"));
    }

    #[test]
    fn empty_response_abstains_everywhere() {
        let parsed = parse_labels("   \n\n", 2, &vocab(&["Agent"]));
        assert_eq!(parsed.labels, vec!["Other", "Other"]);
    }

    #[test]
    fn normalize_folds_case_and_punctuation() {
        let vocabulary = vocab(&["Agent", "Person", "Instrument"]);
        assert_eq!(normalize_label("agent.", &vocabulary), "Agent");
        assert_eq!(normalize_label("  \"PERSON\" ", &vocabulary), "Person");
        assert_eq!(normalize_label("**Instrument**", &vocabulary), "Instrument");
    }

    #[test]
    fn normalize_accepts_a_unique_substring_mention() {
        let vocabulary = vocab(&["Attacker", "Target", "Instrument"]);
        assert_eq!(
            normalize_label("The object plays the Attacker role", &vocabulary),
            "Attacker"
        );
    }

    #[test]
    fn ambiguous_mentions_abstain() {
        let vocabulary = vocab(&["Attacker", "Target", "Instrument"]);
        assert_eq!(normalize_label("Attacker or Target", &vocabulary), "Other");
    }

    #[test]
    fn abstention_label_wins_over_substring_matches() {
        // "Other" is reserved even when a vocabulary name contains it.
        let vocabulary = vocab(&["Mother", "Agent"]);
        assert_eq!(normalize_label("Other", &vocabulary), "Other");
        assert_eq!(normalize_label("mother", &vocabulary), "Mother");
    }

    #[test]
    fn normalize_is_idempotent_on_misses() {
        let vocabulary = vocab(&["Agent"]);
        let once = normalize_label("Bystander", &vocabulary);
        assert_eq!(once, "Other");
        assert_eq!(normalize_label(&once, &vocabulary), "Other");
    }

    #[test]
    fn out_of_vocabulary_answers_warn() {
        let parsed = parse_labels(
            "Argument Role of Object 1: Bystander",
            1,
            &vocab(&["Agent", "Person"]),
        );
        assert_eq!(parsed.labels, vec!["Other"]);
        assert!(parsed.warnings[0].contains("Bystander"));
    }
}
