//! Blind question generation, the refine-or-stop decision, and refinement
//! questions conditioned on the full question/answer history.

use std::collections::HashSet;

use serde_json::Value;
use thiserror::Error;

use crate::backend::{BackendError, Backends, ChatMessage};
use crate::concepts::render_concepts;
use crate::model::{normalize_question, question_key, Decision, PromptSpec, Question, QuestionKind, Round, VisualConcept};
use crate::payload;

#[derive(Debug, Error)]
pub enum QuestionError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("no JSON array of questions found after {repairs} repair attempt(s)")]
    NoJsonArrayFound { repairs: u32 },
    #[error("expected {expected} questions, got {got}")]
    QuestionCountShortfall { expected: usize, got: usize },
    #[error("no new questions in refinement round {round}")]
    NoNewQuestions { round: u32 },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// A question as returned by the model, before ids and rounds are assigned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DraftQuestion {
    pub text: String,
    pub target_concepts: Vec<String>,
}

/// Parses the first JSON array of `{text, target_concept_ids}` objects (or
/// plain strings). Targets not in `known` are dropped; empty texts skipped.
pub fn parse_question_payload(raw: &str, known: &HashSet<&str>) -> Option<Vec<DraftQuestion>> {
    let items = payload::first_array(raw)?;
    let drafts = items
        .iter()
        .filter_map(|item| {
            let (text, targets) = match item {
                Value::String(s) => (s.as_str(), Vec::new()),
                Value::Object(o) => {
                    let text = o.get("text").or_else(|| o.get("question")).and_then(Value::as_str)?;
                    let targets = o
                        .get("target_concept_ids")
                        .or_else(|| o.get("targets"))
                        .and_then(Value::as_array)
                        .map(|ids| {
                            ids.iter()
                                .filter_map(Value::as_str)
                                .filter(|id| known.contains(id))
                                .map(str::to_string)
                                .collect()
                        })
                        .unwrap_or_default();
                    (text, targets)
                }
                _ => return None,
            };
            if text.trim().is_empty() {
                return None;
            }
            Some(DraftQuestion { text: normalize_question(text), target_concepts: targets })
        })
        .collect();
    Some(drafts)
}

pub(crate) fn caption_block(caption: Option<&str>) -> String {
    match caption {
        Some(c) if !c.trim().is_empty() => format!("Caption of the image from a captioning model: \"{}\"\n", c.trim()),
        _ => String::new(),
    }
}

/// Renders every question/answer pair, round by round.
pub fn render_history(rounds: &[Round]) -> String {
    let mut out = String::new();
    for round in rounds {
        out.push_str(&format!("Round {}:\n", round.index));
        for (q, a) in round.pairs() {
            out.push_str(&format!("  Q ({}): {}\n  A: {}\n", q.id, q.text, a.text.trim()));
        }
    }
    out.trim_end().to_string()
}

/// Sends `messages`, repairing up to `repair_retries` times until the reply
/// contains a question array. Returns the drafts and the reply they came from.
fn ask_for_questions(
    backends: &Backends,
    stage: &str,
    messages: &mut Vec<ChatMessage>,
    known: &HashSet<&str>,
    repair_retries: u32,
) -> Result<(Vec<DraftQuestion>, String, u32), QuestionError> {
    let mut repairs = 0;
    loop {
        let label = if repairs == 0 { stage.to_string() } else { format!("{stage}/repair-{repairs}") };
        let reply = backends.complete(&label, messages)?;
        if let Some(drafts) = parse_question_payload(&reply, known) {
            return Ok((drafts, reply, repairs));
        }
        if repairs >= repair_retries {
            return Err(QuestionError::NoJsonArrayFound { repairs });
        }
        repairs += 1;
        messages.push(ChatMessage::assistant(reply));
        messages.push(ChatMessage::user(backends.templates.get("repair_json")));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlindQuestions {
    pub questions: Vec<Question>,
    /// The model kept returning too many questions and the list was cut.
    pub truncated: bool,
    pub repairs: u32,
}

/// Exactly `n` round-0 questions generated from the concepts alone.
pub fn generate_blind(
    concepts: &[VisualConcept],
    prompt: &PromptSpec,
    caption: Option<&str>,
    n: u32,
    backends: &Backends,
    repair_retries: u32,
) -> Result<BlindQuestions, QuestionError> {
    if concepts.is_empty() {
        return Err(QuestionError::Precondition("no concepts to ask about".into()));
    }
    let user = backends.render(
        "blind_user",
        &[
            ("prompt", prompt.text.trim()),
            ("caption_block", &caption_block(caption)),
            ("concepts", &render_concepts(concepts)),
            ("n", &n.to_string()),
        ],
    );
    let messages = vec![ChatMessage::system(backends.templates.get("questions_system")), ChatMessage::user(user)];
    exact_count_questions(concepts, n, backends, messages, "blind", repair_retries)
}

/// Shared by blind generation and edit question sets: ask, then make one
/// repair for the exact count; truncate an excess, fail on a shortfall.
pub(crate) fn exact_count_questions(
    concepts: &[VisualConcept],
    n: u32,
    backends: &Backends,
    mut messages: Vec<ChatMessage>,
    stage: &str,
    repair_retries: u32,
) -> Result<BlindQuestions, QuestionError> {
    if n == 0 {
        return Err(QuestionError::Precondition("question count must be >= 1".into()));
    }
    let want = n as usize;
    let known: HashSet<&str> = concepts.iter().map(|c| c.id.as_str()).collect();
    let (first, reply, mut repairs) = ask_for_questions(backends, stage, &mut messages, &known, repair_retries)?;

    let mut candidates = vec![first];
    if candidates[0].len() != want {
        let got = candidates[0].len();
        messages.push(ChatMessage::assistant(reply));
        messages.push(ChatMessage::user(
            backends.render("count_repair", &[("n", &want.to_string()), ("got", &got.to_string())]),
        ));
        repairs += 1;
        let retry = backends.complete(&format!("{stage}/count-repair"), &messages)?;
        if let Some(drafts) = parse_question_payload(&retry, &known) {
            candidates.push(drafts);
        }
    }

    // Latest exact list wins, then the latest over-long one.
    let chosen = candidates
        .iter()
        .rev()
        .find(|c| c.len() == want)
        .or_else(|| candidates.iter().rev().find(|c| c.len() > want));
    let Some(chosen) = chosen else {
        let got = candidates.iter().map(Vec::len).max().unwrap_or(0);
        return Err(QuestionError::QuestionCountShortfall { expected: want, got });
    };
    let truncated = chosen.len() > want;
    if truncated {
        tracing::warn!(got = chosen.len(), want, "question list truncated");
    }
    let questions = chosen
        .iter()
        .take(want)
        .enumerate()
        .map(|(i, d)| Question {
            id: format!("q0-{}", i + 1),
            round: 0,
            text: d.text.clone(),
            kind: QuestionKind::Blind,
            target_concepts: d.target_concepts.clone(),
        })
        .collect();
    Ok(BlindQuestions { questions, truncated, repairs })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecisionOutcome {
    pub decision: Decision,
    /// The reply could not be read as yes/no, so the loop stopped.
    pub fail_closed: bool,
    pub backend_calls: u32,
}

/// Reads a leading yes/no token, ignoring case and surrounding punctuation.
pub fn parse_decision(raw: &str) -> Option<Decision> {
    let start = raw.trim_start_matches(|c: char| !c.is_alphanumeric());
    let token: String = start.chars().take_while(|c| c.is_alphabetic()).collect();
    match token.to_lowercase().as_str() {
        "yes" => Some(Decision::Refine),
        "no" => Some(Decision::Stop),
        _ => None,
    }
}

/// Whether the reasoning model wants more information about the image.
///
/// `rounds_so_far` counts completed refinement rounds; once it reaches
/// `max_rounds` the answer is Stop without asking.
#[allow(clippy::too_many_arguments)]
pub fn decide_refine(
    history: &[Round],
    concepts: &[VisualConcept],
    prompt: &PromptSpec,
    caption: Option<&str>,
    backends: &Backends,
    rounds_so_far: u32,
    max_rounds: u32,
) -> Result<DecisionOutcome, QuestionError> {
    if history.is_empty() {
        return Err(QuestionError::Precondition("decision needs at least the blind round".into()));
    }
    if rounds_so_far >= max_rounds {
        return Ok(DecisionOutcome { decision: Decision::Stop, fail_closed: false, backend_calls: 0 });
    }
    let stage = format!("decide/round-{}", history.len());
    let user = backends.render(
        "decide_user",
        &[
            ("prompt", prompt.text.trim()),
            ("caption_block", &caption_block(caption)),
            ("concepts", &render_concepts(concepts)),
            ("history", &render_history(history)),
        ],
    );
    let mut messages = vec![ChatMessage::system(backends.templates.get("questions_system")), ChatMessage::user(user)];
    let reply = backends.complete(&stage, &messages)?;
    if let Some(decision) = parse_decision(&reply) {
        return Ok(DecisionOutcome { decision, fail_closed: false, backend_calls: 1 });
    }
    messages.push(ChatMessage::assistant(reply));
    messages.push(ChatMessage::user(backends.templates.get("decide_repair")));
    let retry = backends.complete(&format!("{stage}/repair"), &messages)?;
    Ok(match parse_decision(&retry) {
        Some(decision) => DecisionOutcome { decision, fail_closed: false, backend_calls: 2 },
        None => {
            tracing::warn!(%stage, "unreadable refinement decision, stopping");
            DecisionOutcome { decision: Decision::Stop, fail_closed: true, backend_calls: 2 }
        }
    })
}

/// Up to `k` follow-up questions for round `history.len()`, none repeating a
/// question already asked.
pub fn generate_refinement(
    history: &[Round],
    concepts: &[VisualConcept],
    prompt: &PromptSpec,
    caption: Option<&str>,
    k: u32,
    backends: &Backends,
    repair_retries: u32,
) -> Result<Vec<Question>, QuestionError> {
    if history.is_empty() {
        return Err(QuestionError::Precondition("refinement needs at least the blind round".into()));
    }
    if k == 0 {
        return Err(QuestionError::Precondition("k must be >= 1".into()));
    }
    let round = history.len() as u32;
    let user = backends.render(
        "refine_user",
        &[
            ("prompt", prompt.text.trim()),
            ("caption_block", &caption_block(caption)),
            ("concepts", &render_concepts(concepts)),
            ("history", &render_history(history)),
            ("k", &k.to_string()),
        ],
    );
    let mut messages = vec![ChatMessage::system(backends.templates.get("questions_system")), ChatMessage::user(user)];
    let known: HashSet<&str> = concepts.iter().map(|c| c.id.as_str()).collect();
    let (drafts, _, _) =
        ask_for_questions(backends, &format!("refine/round-{round}"), &mut messages, &known, repair_retries)?;

    let mut seen: HashSet<String> = history
        .iter()
        .flat_map(|r| r.questions.iter())
        .map(|q| question_key(&q.text))
        .collect();
    let questions: Vec<Question> = drafts
        .into_iter()
        .filter(|d| seen.insert(question_key(&d.text)))
        .take(k as usize)
        .enumerate()
        .map(|(i, d)| Question {
            id: format!("q{round}-{}", i + 1),
            round,
            text: d.text,
            kind: QuestionKind::Refinement,
            target_concepts: d.target_concepts,
        })
        .collect();
    if questions.is_empty() {
        return Err(QuestionError::NoNewQuestions { round });
    }
    Ok(questions)
}
