//! Final 0-10 consistency score from the full question/answer evidence.

use thiserror::Error;

use crate::backend::{BackendError, Backends, ChatMessage};
use crate::concepts::render_concepts;
use crate::model::{EvaluationScore, PromptSpec, Round, VisualConcept};
use crate::questions::{caption_block, render_history};

pub const SCORE_MIN: f64 = 0.0;
pub const SCORE_MAX: f64 = 10.0;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("no score found in model output")]
    ScoreParseFailure { raw: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedScore {
    pub value: f64,
    pub clamped: bool,
    /// Found on a `SCORE:` line rather than through the `/10` fallback.
    pub from_score_line: bool,
    pub rationale: String,
}

/// Leading decimal of `s` (optional sign, digits, optional fraction) and the
/// remaining text.
fn leading_number(s: &str) -> Option<(f64, &str)> {
    let bytes = s.as_bytes();
    let mut end = 0;
    if matches!(bytes.first(), Some(b'+' | b'-')) {
        end = 1;
    }
    let digits_start = end;
    while end < bytes.len() && bytes[end].is_ascii_digit() {
        end += 1;
    }
    let mut int_digits = end - digits_start;
    if end < bytes.len() && bytes[end] == b'.' {
        let frac_start = end + 1;
        let mut frac_end = frac_start;
        while frac_end < bytes.len() && bytes[frac_end].is_ascii_digit() {
            frac_end += 1;
        }
        if frac_end > frac_start {
            int_digits += frac_end - frac_start;
            end = frac_end;
        }
    }
    if int_digits == 0 {
        return None;
    }
    s[..end].parse::<f64>().ok().map(|v| (v, &s[end..]))
}

fn clamp(value: f64) -> (f64, bool) {
    let clamped = value.clamp(SCORE_MIN, SCORE_MAX);
    (clamped, clamped != value)
}

/// The `SCORE: <number>` grammar only.
pub fn parse_score_line(raw: &str) -> Option<ParsedScore> {
    let lines: Vec<&str> = raw.lines().collect();
    for (i, line) in lines.iter().enumerate() {
        let lower = line.to_ascii_lowercase();
        let Some(pos) = lower.find("score:") else { continue };
        let after = line[pos + "score:".len()..].trim_start_matches(|c: char| c.is_whitespace() || c == '*');
        let Some((value, rest)) = leading_number(after) else { continue };
        let (value, clamped) = clamp(value);
        let rest = rest
            .trim_start_matches("/10")
            .trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '*' | '-' | ':' | '.' | ','));
        let mut rationale = rest.trim().to_string();
        let tail = lines[i + 1..].join("\n");
        if !tail.trim().is_empty() {
            if !rationale.is_empty() {
                rationale.push('\n');
            }
            rationale.push_str(tail.trim());
        }
        return Some(ParsedScore { value, clamped, from_score_line: true, rationale });
    }
    None
}

/// First standalone number in [0, 10] followed by `/10` or `out of 10`.
fn parse_out_of_ten(raw: &str) -> Option<f64> {
    let lower = raw.to_ascii_lowercase();
    let bytes = lower.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let standalone = i == 0 || !(bytes[i - 1].is_ascii_alphanumeric() || bytes[i - 1] == b'.');
        if bytes[i].is_ascii_digit() && standalone {
            if let Some((value, rest)) = leading_number(&lower[i..]) {
                let consumed = lower.len() - i - rest.len();
                let rest = rest.trim_start();
                let suffix = rest.strip_prefix("/").or_else(|| rest.strip_prefix("out of"));
                if let Some(suffix) = suffix {
                    let suffix = suffix.trim_start();
                    let ten = suffix.starts_with("10") && !suffix[2..].starts_with(|c: char| c.is_ascii_digit());
                    if ten && (SCORE_MIN..=SCORE_MAX).contains(&value) {
                        return Some(value);
                    }
                }
                i += consumed.max(1);
                continue;
            }
        }
        i += 1;
    }
    None
}

/// Reads a score from free text, clamping it to [0, 10].
pub fn parse_score(raw: &str) -> Result<ParsedScore, ScoreError> {
    if let Some(parsed) = parse_score_line(raw) {
        return Ok(parsed);
    }
    parse_out_of_ten(raw)
        .map(|value| ParsedScore { value, clamped: false, from_score_line: false, rationale: raw.trim().to_string() })
        .ok_or_else(|| ScoreError::ScoreParseFailure { raw: raw.to_string() })
}

/// Asks for a score over the complete evidence of a generation evaluation.
pub fn request_score(
    prompt: &PromptSpec,
    concepts: &[VisualConcept],
    rounds: &[Round],
    caption: Option<&str>,
    backends: &Backends,
    repair_retries: u32,
) -> Result<EvaluationScore, ScoreError> {
    if rounds.is_empty() {
        return Err(ScoreError::Precondition("no rounds to score".into()));
    }
    if let Some(r) = rounds.iter().find(|r| r.answers.len() != r.questions.len()) {
        return Err(ScoreError::Precondition(format!("round {} is incomplete", r.index)));
    }
    let user = backends.render(
        "score_user",
        &[
            ("prompt", prompt.text.trim()),
            ("caption_block", &caption_block(caption)),
            ("concepts", &render_concepts(concepts)),
            ("history", &render_history(rounds)),
        ],
    );
    score_conversation(backends, user, repair_retries)
}

/// Runs a scoring exchange: strict `SCORE:` replies are accepted at once,
/// otherwise repairs are requested and, when they run out, the lenient
/// grammar is applied to the replies from latest to earliest.
pub(crate) fn score_conversation(
    backends: &Backends,
    user: String,
    repair_retries: u32,
) -> Result<EvaluationScore, ScoreError> {
    let mut messages = vec![ChatMessage::system(backends.templates.get("score_system")), ChatMessage::user(user)];
    let mut replies = Vec::new();
    for repairs in 0..=repair_retries {
        let stage = if repairs == 0 { "score".to_string() } else { format!("score/repair-{repairs}") };
        let reply = backends.complete(&stage, &messages)?;
        if let Some(parsed) = parse_score_line(&reply) {
            return Ok(finish(parsed, reply, repairs));
        }
        replies.push(reply.clone());
        if repairs < repair_retries {
            messages.push(ChatMessage::assistant(reply));
            messages.push(ChatMessage::user(backends.templates.get("score_repair")));
        }
    }
    for reply in replies.iter().rev() {
        if let Ok(parsed) = parse_score(reply) {
            return Ok(finish(parsed, reply.clone(), repair_retries));
        }
    }
    Err(ScoreError::ScoreParseFailure { raw: replies.pop().unwrap_or_default() })
}

fn finish(parsed: ParsedScore, raw: String, repairs: u32) -> EvaluationScore {
    if parsed.clamped {
        tracing::warn!(value = parsed.value, "score clamped into [0, 10]");
    }
    EvaluationScore {
        value: parsed.value,
        rationale: parsed.rationale,
        raw_model_output: raw,
        clamped: parsed.clamped,
        repairs,
    }
}
