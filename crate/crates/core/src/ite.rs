//! Evaluation of targeted image edits.
//!
//! Concepts are split into what must remain, what must go and what must be
//! added. One question set is asked about both the input and the edited
//! image; answers to questions about kept concepts must not change, removed
//! concepts must no longer be affirmed and added ones must be.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{BackendError, Backends, ChatMessage};
use crate::concepts::render_concepts;
use crate::exec;
use crate::model::{
    fingerprint_config, ConceptCategory, ConceptOrigin, ConceptSource, Decision, EvaluationScore, ImageRef,
    PipelineConfig, PromptSpec, Question, Round, TaskKind, Transcript, VisualConcept,
};
use crate::payload;
use crate::pipeline::{answers_for, fail, question_texts, refinement_loop, timed, PipelineFailure, StageError};
use crate::questions::{exact_count_questions, render_history};
use crate::scorer::score_conversation;

#[derive(Debug, Error)]
pub enum IteError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("could not parse a concept partition after {repairs} repair attempt(s)")]
    PartitionParseFailure { repairs: u32 },
    #[error("concept {text:?} appears in both {first} and {second}")]
    DisjointnessViolation { text: String, first: &'static str, second: &'static str },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Case-folded, whitespace-collapsed text without articles or trailing
/// punctuation. Used for set membership and answer comparison.
pub fn normalize_text(s: &str) -> String {
    s.to_lowercase()
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric() && c != '\'' && c != '-'))
        .filter(|w| !w.is_empty() && !ARTICLES.contains(w))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConceptPartition {
    pub remain: Vec<VisualConcept>,
    pub remove: Vec<VisualConcept>,
    pub add: Vec<VisualConcept>,
}

impl ConceptPartition {
    fn sets(&self) -> [(&'static str, &[VisualConcept]); 3] {
        [("remain", &self.remain), ("remove", &self.remove), ("add", &self.add)]
    }

    /// Errors on the first normalized text shared by two sets.
    pub fn check_disjoint(&self) -> Result<(), IteError> {
        let sets = self.sets();
        for (i, (first, a)) in sets.iter().enumerate() {
            let keys: HashSet<String> = a.iter().map(|c| normalize_text(&c.text)).collect();
            for (second, b) in &sets[i + 1..] {
                if let Some(c) = b.iter().find(|c| keys.contains(&normalize_text(&c.text))) {
                    return Err(IteError::DisjointnessViolation { text: c.text.clone(), first, second });
                }
            }
        }
        Ok(())
    }

    /// All concepts, remain first, then remove, then add.
    pub fn all(&self) -> Vec<VisualConcept> {
        self.remain.iter().chain(&self.remove).chain(&self.add).cloned().collect()
    }

    fn set_of(&self, id: &str) -> Option<&'static str> {
        self.sets()
            .into_iter()
            .find(|(_, set)| set.iter().any(|c| c.id == id))
            .map(|(name, _)| name)
    }
}

/// Concepts expected after the edit: (remain minus remove) union add, over
/// normalized texts. Order is remain order, then add order.
pub fn expected_concepts(p: &ConceptPartition) -> Vec<VisualConcept> {
    let removed: HashSet<String> = p.remove.iter().map(|c| normalize_text(&c.text)).collect();
    let mut seen = HashSet::new();
    p.remain
        .iter()
        .filter(|c| !removed.contains(&normalize_text(&c.text)))
        .chain(&p.add)
        .filter(|c| seen.insert(normalize_text(&c.text)))
        .cloned()
        .collect()
}

fn parse_group(items: &[Value], prefix: &str, source: ConceptSource) -> Vec<VisualConcept> {
    let mut seen = HashSet::new();
    items
        .iter()
        .filter_map(|item| {
            let (text, category) = match item {
                Value::String(s) => (s.as_str(), None),
                Value::Object(o) => (
                    o.get("text").and_then(Value::as_str)?,
                    o.get("category").and_then(Value::as_str).and_then(ConceptCategory::parse),
                ),
                _ => return None,
            };
            let text = text.trim();
            (!text.is_empty() && seen.insert(normalize_text(text))).then(|| (text.to_string(), category))
        })
        .enumerate()
        .map(|(i, (text, category))| VisualConcept {
            id: format!("{prefix}-{}", i + 1),
            text,
            category: category.unwrap_or(ConceptCategory::Context),
            origin: ConceptOrigin::Explicit,
            span: None,
            source: Some(source),
        })
        .collect()
}

/// Parses `{"remain": [...], "remove": [...], "add": [...]}` out of a reply.
pub fn parse_partition(raw: &str) -> Option<ConceptPartition> {
    let obj = payload::first_object_with(raw, &["remain", "remove", "add"])?;
    let group = |key: &str| obj.get(key).and_then(Value::as_array).cloned();
    Some(ConceptPartition {
        remain: parse_group(&group("remain")?, "keep", ConceptSource::InputImage),
        remove: parse_group(&group("remove")?, "remove", ConceptSource::InputImage),
        add: parse_group(&group("add")?, "add", ConceptSource::Prompt),
    })
}

/// Asks the reasoning model to split the edit into remain/remove/add.
pub fn partition_concepts(
    instruction: &str,
    input_caption: &str,
    backends: &Backends,
    repair_retries: u32,
) -> Result<ConceptPartition, IteError> {
    if instruction.trim().is_empty() {
        return Err(IteError::Precondition("empty instruction".into()));
    }
    if input_caption.trim().is_empty() {
        return Err(IteError::Precondition("empty input-image caption".into()));
    }
    let user = backends.render(
        "partition_user",
        &[("instruction", instruction.trim()), ("input_caption", input_caption.trim())],
    );
    let mut messages = vec![ChatMessage::system(backends.templates.get("partition_system")), ChatMessage::user(user)];
    let mut repairs = 0;
    loop {
        let stage = if repairs == 0 { "partition".to_string() } else { format!("partition/repair-{repairs}") };
        let reply = backends.complete(&stage, &messages)?;
        if let Some(p) = parse_partition(&reply) {
            p.check_disjoint()?;
            return Ok(p);
        }
        if repairs >= repair_retries {
            return Err(IteError::PartitionParseFailure { repairs });
        }
        repairs += 1;
        messages.push(ChatMessage::assistant(reply));
        messages.push(ChatMessage::user(backends.templates.get("partition_repair")));
    }
}

const STOPWORDS: [&str; 24] = [
    "a", "an", "the", "is", "are", "was", "of", "on", "in", "at", "with", "to", "and", "it", "its", "this", "that",
    "there", "be", "some", "does", "do", "has", "have",
];

fn content_words(s: &str) -> Vec<String> {
    normalize_text(s)
        .split(' ')
        .filter(|w| !w.is_empty() && !STOPWORDS.contains(w))
        .map(str::to_string)
        .collect()
}

/// Whether `answer` (to `question`) says that `concept` is present.
///
/// Yes/no answers decide directly. Otherwise the answer affirms the concept
/// when a word it adds beyond the question occurs in the concept text, e.g.
/// "green" for the concept "green color" asked as "What color is it?".
pub fn affirms(answer: &str, question: &str, concept: &VisualConcept) -> bool {
    let words = content_words(answer);
    match words.first().map(String::as_str) {
        Some("yes" | "yeah" | "yep" | "true") => return true,
        Some("no" | "not" | "none" | "nope" | "false" | "nothing") => return false,
        None => return false,
        _ => {}
    }
    let asked: HashSet<String> = content_words(question).into_iter().collect();
    let concept_words: HashSet<String> = content_words(&concept.text).into_iter().collect();
    words.iter().filter(|w| !asked.contains(*w)).any(|w| concept_words.contains(w))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemainViolation {
    pub concept_id: String,
    pub question_id: String,
    pub answer_before: String,
    pub answer_after: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditChecks {
    pub remain_violations: Vec<RemainViolation>,
    pub removal_failures: Vec<String>,
    pub addition_failures: Vec<String>,
}

/// Compares paired answers. Questions touching a remove or add concept are
/// expected to change and are excluded from the remain check.
pub fn compare_answers(
    partition: &ConceptPartition,
    questions: &[Question],
    before: &[String],
    after: &[String],
) -> EditChecks {
    let mut checks = EditChecks::default();
    let by_id = |id: &str| partition.all().into_iter().find(|c| c.id == id);
    let push_unique = |list: &mut Vec<String>, id: &str| {
        if !list.iter().any(|x| x == id) {
            list.push(id.to_string());
        }
    };
    for ((q, b), a) in questions.iter().zip(before).zip(after) {
        let sets: Vec<_> = q.target_concepts.iter().map(|t| (t, partition.set_of(t))).collect();
        let touches_change = sets.iter().any(|(_, s)| matches!(s, Some("remove" | "add")));
        if !touches_change && normalize_text(b) != normalize_text(a) {
            for (t, s) in &sets {
                if *s == Some("remain") {
                    checks.remain_violations.push(RemainViolation {
                        concept_id: t.to_string(),
                        question_id: q.id.clone(),
                        answer_before: b.clone(),
                        answer_after: a.clone(),
                    });
                }
            }
        }
        for (t, s) in &sets {
            let Some(concept) = by_id(t) else { continue };
            match s {
                Some("remove") if affirms(a, &q.text, &concept) => push_unique(&mut checks.removal_failures, t),
                Some("add") if !affirms(a, &q.text, &concept) => push_unique(&mut checks.addition_failures, t),
                _ => {}
            }
        }
    }
    let order = |list: &mut Vec<String>| {
        let pos = |id: &String| partition.all().iter().position(|c| &c.id == id).unwrap_or(usize::MAX);
        list.sort_by_key(pos);
    };
    order(&mut checks.removal_failures);
    order(&mut checks.addition_failures);
    checks
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ITEReport {
    pub partition: ConceptPartition,
    pub input_transcript: Transcript,
    pub edited_transcript: Transcript,
    pub remain_violations: Vec<RemainViolation>,
    pub removal_failures: Vec<String>,
    pub addition_failures: Vec<String>,
    pub score: EvaluationScore,
}

impl ITEReport {
    /// No kept concept changed, nothing that should go is still there, and
    /// everything that should appear does.
    pub fn edit_successful(&self) -> bool {
        self.remain_violations.is_empty() && self.removal_failures.is_empty() && self.addition_failures.is_empty()
    }

    pub fn canonicalize(&mut self) {
        self.input_transcript.canonicalize();
        self.edited_transcript.canonicalize();
    }
}

fn render_paired(questions: &[Question], before: &[String], after: &[String]) -> String {
    questions
        .iter()
        .zip(before)
        .zip(after)
        .map(|((q, b), a)| format!("  Q ({}): {}\n  input image: {}\n  edited image: {}", q.id, q.text, b.trim(), a.trim()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Evaluates an edit of `input_image` into `edited_image`.
pub fn evaluate_edit(
    prompt: &PromptSpec,
    input_image: &ImageRef,
    edited_image: &ImageRef,
    cfg: &PipelineConfig,
    backends: &Backends,
) -> Result<ITEReport, PipelineFailure> {
    let backends = backends.with_temperature(cfg.temperature);
    let mut prompt = prompt.clone();
    prompt.input_image = Some(input_image.clone());
    let fingerprint = fingerprint_config(cfg, backends.templates.version());
    let mut t_in = Transcript::empty(prompt.clone(), input_image.clone(), cfg, fingerprint.clone());
    let mut t_out = Transcript::empty(prompt.clone(), edited_image.clone(), cfg, fingerprint);
    match run_edit(&mut t_in, &mut t_out, cfg, &backends) {
        Ok((partition, checks, score)) => Ok(ITEReport {
            partition,
            input_transcript: t_in,
            edited_transcript: t_out,
            remain_violations: checks.remain_violations,
            removal_failures: checks.removal_failures,
            addition_failures: checks.addition_failures,
            score,
        }),
        Err(e) => {
            t_out.timings.extend(t_in.timings);
            Err(fail(t_out, e))
        }
    }
}

fn run_edit(
    t_in: &mut Transcript,
    t_out: &mut Transcript,
    cfg: &PipelineConfig,
    backends: &Backends,
) -> Result<(ConceptPartition, EditChecks, EvaluationScore), StageError> {
    let problems = cfg.violations();
    if !problems.is_empty() {
        return Err(StageError { stage: "config".into(), message: problems.join("; ") });
    }
    if t_in.prompt.task != TaskKind::TargetedEdit {
        return Err(StageError { stage: "input".into(), message: "edit evaluation requires a targeted-edit prompt".into() });
    }
    let mut problems = t_in.prompt.violations();
    problems.extend(t_out.image.check_resolvable().err());
    if !problems.is_empty() {
        return Err(StageError { stage: "input".into(), message: problems.join("; ") });
    }
    let instruction = t_in.prompt.text.clone();
    let input_image = t_in.image.clone();
    let edited_image = t_out.image.clone();
    let retries = cfg.repair_retries;

    let input_caption = timed(&mut t_in.timings, "caption/input", || backends.caption("caption/input", &input_image))?;
    t_in.caption = Some(input_caption.clone());
    t_out.metadata.insert("input_caption".into(), input_caption.clone());

    let partition = timed(&mut t_in.timings, "partition", || {
        partition_concepts(&instruction, &input_caption, backends, retries)
    })?;
    t_in.concepts = partition.all();
    t_out.concepts = partition.all();

    let user = backends.render(
        "ite_questions_user",
        &[
            ("instruction", instruction.trim()),
            ("input_caption", input_caption.trim()),
            ("remain", &render_concepts(&partition.remain)),
            ("remove", &render_concepts(&partition.remove)),
            ("add", &render_concepts(&partition.add)),
            ("n", &cfg.n_blind.to_string()),
        ],
    );
    let messages = vec![ChatMessage::system(backends.templates.get("questions_system")), ChatMessage::user(user)];
    let all = partition.all();
    let generated = timed(&mut t_in.timings, "questions", || {
        exact_count_questions(&all, cfg.n_blind, backends, messages, "questions", retries)
    })?;
    if generated.truncated {
        t_out.metadata.insert("questions.truncated".into(), "true".into());
    }
    let questions = generated.questions;
    let texts = question_texts(&questions);

    let (before, after) = exec::join(
        || backends.vqa("vqa/input", &input_image, &texts),
        || backends.vqa("vqa/edited", &edited_image, &texts),
    );
    let (before, latency_in) = timed(&mut t_in.timings, "vqa/input", || before)?;
    let (after, latency_out) = timed(&mut t_out.timings, "vqa/edited", || after)?;
    let model = backends.vision.model_name();
    t_in.rounds.push(Round {
        index: 0,
        questions: questions.clone(),
        answers: answers_for(&questions, before.clone(), &model, latency_in),
        decision_after: Decision::Stop,
    });
    t_out.rounds.push(Round {
        index: 0,
        questions: questions.clone(),
        answers: answers_for(&questions, after.clone(), &model, latency_out),
        decision_after: Decision::Stop,
    });

    let mut extra = String::new();
    if cfg.ite_refinement {
        if cfg.use_caption {
            let caption = timed(&mut t_out.timings, "caption/edited", || backends.caption("caption/edited", &edited_image))?;
            t_out.caption = Some(caption);
        }
        refinement_loop(t_out, &edited_image, cfg.max_refine_rounds, cfg, backends)?;
        if t_out.rounds.len() > 1 {
            extra = format!(
                "\nFollow-up questions asked about the edited image only:\n{}\n",
                render_history(&t_out.rounds[1..])
            );
        }
    }

    let checks = compare_answers(&partition, &questions, &before, &after);

    let user = backends.render(
        "ite_score_user",
        &[
            ("instruction", instruction.trim()),
            ("input_caption", input_caption.trim()),
            ("remain", &render_concepts(&partition.remain)),
            ("remove", &render_concepts(&partition.remove)),
            ("add", &render_concepts(&partition.add)),
            ("paired", &render_paired(&questions, &before, &after)),
            ("extra", &extra),
        ],
    );
    let score = timed(&mut t_out.timings, "score", || score_conversation(backends, user, retries))?;
    t_out.score = Some(score.clone());
    Ok((partition, checks, score))
}
