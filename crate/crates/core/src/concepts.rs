//! Visual concept extraction: what a careful reviewer expects to see before
//! looking at the image.

use serde_json::{json, Value};
use thiserror::Error;

use crate::backend::{BackendError, Backends, ChatMessage};
use crate::model::{ConceptCategory, ConceptOrigin, ConceptSource, PromptSpec, TaskKind, VisualConcept};
use crate::payload;

/// Extractions beyond this many concepts are truncated.
pub const MAX_CONCEPTS: usize = 50;

#[derive(Debug, Error)]
pub enum ConceptError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("no JSON array found in reply")]
    NoJsonArrayFound,
    #[error("concept element {0} has no text")]
    ElementMissingText(usize),
    #[error("could not obtain a concept list after {repairs} repair attempt(s): {reason}")]
    ConceptParseFailure { repairs: u32, reason: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedConcepts {
    pub concepts: Vec<VisualConcept>,
    /// Lenient-parsing notes, e.g. unknown categories mapped to Context.
    pub warnings: Vec<String>,
}

/// Parses the first JSON array in `raw` into concepts with ids `c1`, `c2`, ...
pub fn parse_concept_payload(raw: &str) -> Result<ParsedConcepts, ConceptError> {
    let items = payload::first_array(raw).ok_or(ConceptError::NoJsonArrayFound)?;
    let mut concepts = Vec::with_capacity(items.len());
    let mut warnings = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let empty = serde_json::Map::new();
        let (text, obj) = match item {
            Value::String(s) => (Some(s.as_str()), &empty),
            Value::Object(o) => (o.get("text").and_then(Value::as_str), o),
            _ => (None, &empty),
        };
        let text = text.map(str::trim).filter(|t| !t.is_empty()).ok_or(ConceptError::ElementMissingText(i))?;
        let field = |k: &str| obj.get(k).and_then(Value::as_str);
        let category = match field("category") {
            Some(c) => ConceptCategory::parse(c).unwrap_or_else(|| {
                warnings.push(format!("concept {}: unknown category {c:?} mapped to Context", i + 1));
                ConceptCategory::Context
            }),
            None => {
                warnings.push(format!("concept {}: missing category mapped to Context", i + 1));
                ConceptCategory::Context
            }
        };
        let origin = match field("origin").and_then(ConceptOrigin::parse) {
            Some(o) => o,
            None => {
                warnings.push(format!("concept {}: missing or unknown origin treated as Implicit", i + 1));
                ConceptOrigin::Implicit
            }
        };
        let source = field("source").and_then(|s| match s.trim().to_ascii_lowercase().as_str() {
            "prompt" | "instruction" => Some(ConceptSource::Prompt),
            "image" | "input_image" | "input image" => Some(ConceptSource::InputImage),
            _ => None,
        });
        concepts.push(VisualConcept {
            id: format!("c{}", i + 1),
            text: text.to_string(),
            category,
            origin,
            span: field("span").map(str::trim).filter(|s| !s.is_empty()).map(str::to_string),
            source,
        });
    }
    Ok(ParsedConcepts { concepts, warnings })
}

/// Serializes concepts into the payload format [`parse_concept_payload`] reads.
pub fn concepts_to_payload(concepts: &[VisualConcept]) -> String {
    let items: Vec<Value> = concepts
        .iter()
        .map(|c| {
            let mut v = json!({"text": c.text, "category": c.category, "origin": c.origin});
            if let Some(span) = &c.span {
                v["span"] = json!(span);
            }
            if let Some(source) = c.source {
                v["source"] = json!(match source {
                    ConceptSource::Prompt => "prompt",
                    ConceptSource::InputImage => "image",
                });
            }
            v
        })
        .collect();
    Value::Array(items).to_string()
}

/// Renders concepts as `id: text` lines for prompt templates.
pub fn render_concepts(concepts: &[VisualConcept]) -> String {
    if concepts.is_empty() {
        return "(none)".into();
    }
    concepts
        .iter()
        .map(|c| format!("{}: {}", c.id, c.text))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptExtraction {
    pub concepts: Vec<VisualConcept>,
    /// Free-text answer to the expectations turn.
    pub prereasoning: String,
    pub repairs: u32,
    pub warnings: Vec<String>,
    pub truncated: bool,
}

/// Concepts for a generation prompt.
pub fn extract_concepts(
    prompt: &PromptSpec,
    backends: &Backends,
    repair_retries: u32,
) -> Result<ConceptExtraction, ConceptError> {
    if prompt.task != TaskKind::Generation {
        return Err(ConceptError::Precondition("extract_concepts requires a generation prompt".into()));
    }
    if prompt.text.trim().is_empty() {
        return Err(ConceptError::Precondition("empty prompt".into()));
    }
    let expect = backends.render("concepts_expect", &[("prompt", prompt.text.trim())]);
    let list = backends.render("concepts_list", &[]);
    two_turn(backends, expect, list, repair_retries)
}

/// Concepts for an edit instruction, using a caption of the input image.
pub fn extract_concepts_ite(
    prompt: &PromptSpec,
    input_caption: &str,
    backends: &Backends,
    repair_retries: u32,
) -> Result<ConceptExtraction, ConceptError> {
    if prompt.task != TaskKind::TargetedEdit {
        return Err(ConceptError::Precondition("extract_concepts_ite requires a targeted-edit prompt".into()));
    }
    if prompt.text.trim().is_empty() {
        return Err(ConceptError::Precondition("empty instruction".into()));
    }
    if input_caption.trim().is_empty() {
        return Err(ConceptError::Precondition("empty input-image caption".into()));
    }
    let expect = backends.render(
        "concepts_ite_expect",
        &[("prompt", prompt.text.trim()), ("input_caption", input_caption.trim())],
    );
    let list = backends.render("concepts_ite_list", &[]);
    let mut out = two_turn(backends, expect, list, repair_retries)?;
    for c in &mut out.concepts {
        if c.source.is_none() {
            c.source = Some(if shares_word(&c.text, &prompt.text) {
                ConceptSource::Prompt
            } else {
                ConceptSource::InputImage
            });
        }
    }
    Ok(out)
}

/// True when a word of three or more letters in `concept` also occurs in `text`.
fn shares_word(concept: &str, text: &str) -> bool {
    let words = |s: &str| -> Vec<String> {
        s.to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| w.len() >= 3)
            .map(str::to_string)
            .collect()
    };
    let text = words(text);
    words(concept).iter().any(|w| text.contains(w))
}

fn two_turn(
    backends: &Backends,
    expect: String,
    list: String,
    repair_retries: u32,
) -> Result<ConceptExtraction, ConceptError> {
    let mut messages = vec![
        ChatMessage::system(backends.templates.get("concepts_system")),
        ChatMessage::user(expect),
    ];
    let prereasoning = backends.complete("concepts/expect", &messages)?;
    messages.push(ChatMessage::assistant(prereasoning.clone()));
    messages.push(ChatMessage::user(list));

    let mut repairs = 0;
    loop {
        let stage = if repairs == 0 { "concepts/list".to_string() } else { format!("concepts/repair-{repairs}") };
        let reply = backends.complete(&stage, &messages)?;
        let reason = match parse_concept_payload(&reply) {
            Ok(parsed) if !parsed.concepts.is_empty() => {
                let mut concepts = parsed.concepts;
                let mut warnings = parsed.warnings;
                let truncated = concepts.len() > MAX_CONCEPTS;
                if truncated {
                    warnings.push(format!("{} concepts truncated to {MAX_CONCEPTS}", concepts.len()));
                    tracing::warn!(count = concepts.len(), "concept list truncated");
                    concepts.truncate(MAX_CONCEPTS);
                }
                return Ok(ConceptExtraction { concepts, prereasoning, repairs, warnings, truncated });
            }
            Ok(_) => "empty concept list".to_string(),
            Err(e) => e.to_string(),
        };
        if repairs >= repair_retries {
            return Err(ConceptError::ConceptParseFailure { repairs, reason });
        }
        repairs += 1;
        messages.push(ChatMessage::assistant(reply));
        messages.push(ChatMessage::user(backends.templates.get("repair_json")));
    }
}
