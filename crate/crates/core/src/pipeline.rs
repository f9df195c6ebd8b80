//! One full evaluation: caption, concepts, blind questions, answers, the
//! refinement loop and the score. Plus the batch driver and job manifests.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::Backends;
use crate::concepts::{extract_concepts, extract_concepts_ite};
use crate::exec;
use crate::model::{
    fingerprint_config, Answer, Decision, Failure, ImageRef, PipelineConfig, PromptSpec, Question, Round,
    Status, TaskKind, Transcript, Variant,
};
use crate::questions::{decide_refine, generate_blind, generate_refinement, QuestionError};
use crate::scorer::request_score;

/// A stage that failed, with the transcript as far as it got.
#[derive(Debug, Error)]
#[error("stage {stage} failed: {message}")]
pub struct PipelineFailure {
    pub stage: String,
    pub message: String,
    pub partial: Box<Transcript>,
}

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("workers must be >= 1")]
    ZeroWorkers,
}

#[derive(Debug)]
pub(crate) struct StageError {
    pub stage: String,
    pub message: String,
}

/// Runs `f`, recording its wall-clock time under `stage`.
pub(crate) fn timed<T, E: Display>(
    timings: &mut BTreeMap<String, u64>,
    stage: &str,
    f: impl FnOnce() -> Result<T, E>,
) -> Result<T, StageError> {
    let started = Instant::now();
    let out = f();
    *timings.entry(stage.to_string()).or_insert(0) += started.elapsed().as_millis() as u64;
    out.map_err(|e| StageError { stage: stage.to_string(), message: e.to_string() })
}

pub(crate) fn fail(mut t: Transcript, err: StageError) -> PipelineFailure {
    tracing::warn!(prompt = %t.prompt.id, stage = %err.stage, error = %err.message, "evaluation failed");
    t.status = Status::Failed;
    t.failure = Some(Failure { stage: err.stage.clone(), message: err.message.clone() });
    PipelineFailure { stage: err.stage, message: err.message, partial: Box::new(t) }
}

/// Pipeline configuration for a named variant.
pub fn preset(variant: Variant) -> PipelineConfig {
    PipelineConfig::preset(variant)
}

pub(crate) fn answers_for(questions: &[Question], texts: Vec<String>, model: &str, latency_ms: u64) -> Vec<Answer> {
    questions
        .iter()
        .zip(texts)
        .map(|(q, text)| Answer {
            question_id: q.id.clone(),
            text,
            backend_meta: BTreeMap::from([
                ("latency_ms".to_string(), latency_ms.to_string()),
                ("model".to_string(), model.to_string()),
            ]),
        })
        .collect()
}

pub(crate) fn question_texts(questions: &[Question]) -> Vec<String> {
    questions.iter().map(|q| q.text.clone()).collect()
}

/// Evaluates `image` against `prompt`.
///
/// On failure the returned [`PipelineFailure`] carries the partial transcript
/// with `status = failed` and the name of the failing stage.
pub fn evaluate(
    prompt: &PromptSpec,
    image: &ImageRef,
    cfg: &PipelineConfig,
    backends: &Backends,
) -> Result<Transcript, PipelineFailure> {
    let backends = backends.with_temperature(cfg.temperature);
    let fingerprint = fingerprint_config(cfg, backends.templates.version());
    let mut t = Transcript::empty(prompt.clone(), image.clone(), cfg, fingerprint);
    match run(&mut t, cfg, &backends) {
        Ok(()) => Ok(t),
        Err(e) => Err(fail(t, e)),
    }
}

fn run(t: &mut Transcript, cfg: &PipelineConfig, backends: &Backends) -> Result<(), StageError> {
    let config_errors = cfg.violations();
    if !config_errors.is_empty() {
        return Err(StageError { stage: "config".into(), message: config_errors.join("; ") });
    }
    let mut input_errors = t.prompt.violations();
    input_errors.extend(t.image.check_resolvable().err());
    if let Some(input) = &t.prompt.input_image {
        input_errors.extend(input.check_resolvable().err());
    }
    if !input_errors.is_empty() {
        return Err(StageError { stage: "input".into(), message: input_errors.join("; ") });
    }
    let prompt = t.prompt.clone();
    let image = t.image.clone();
    let retries = cfg.repair_retries;

    if cfg.use_caption {
        let caption = timed(&mut t.timings, "caption", || backends.caption("caption", &image))?;
        t.caption = Some(caption);
    }

    let extraction = match prompt.task {
        TaskKind::Generation => timed(&mut t.timings, "concepts", || extract_concepts(&prompt, backends, retries))?,
        TaskKind::TargetedEdit => {
            let input = prompt.input_image.clone().expect("validated above");
            let input_caption = timed(&mut t.timings, "caption/input", || backends.caption("caption/input", &input))?;
            t.metadata.insert("input_caption".into(), input_caption.clone());
            timed(&mut t.timings, "concepts", || extract_concepts_ite(&prompt, &input_caption, backends, retries))?
        }
    };
    t.concepts = extraction.concepts;
    t.metadata.insert("concepts.prereasoning".into(), extraction.prereasoning);
    if extraction.repairs > 0 {
        t.metadata.insert("concepts.repairs".into(), extraction.repairs.to_string());
    }
    if !extraction.warnings.is_empty() {
        t.metadata.insert("concepts.warnings".into(), extraction.warnings.join("; "));
    }

    let caption = t.caption.clone();
    let blind = timed(&mut t.timings, "blind", || {
        generate_blind(&t.concepts, &prompt, caption.as_deref(), cfg.n_blind, backends, retries)
    })?;
    if blind.truncated {
        t.metadata.insert("blind.truncated".into(), "true".into());
    }
    if blind.repairs > 0 {
        t.metadata.insert("blind.repairs".into(), blind.repairs.to_string());
    }

    let texts = question_texts(&blind.questions);
    let (answers, latency) = timed(&mut t.timings, "vqa/round-0", || backends.vqa("vqa/round-0", &image, &texts))?;
    let model = backends.vision.model_name();
    t.rounds.push(Round {
        index: 0,
        answers: answers_for(&blind.questions, answers, &model, latency),
        questions: blind.questions,
        decision_after: Decision::Stop,
    });

    refinement_loop(t, &image, cfg.max_refine_rounds, cfg, backends)?;

    let score = timed(&mut t.timings, "score", || {
        request_score(&prompt, &t.concepts, &t.rounds, caption.as_deref(), backends, retries)
    })?;
    t.score = Some(score);
    Ok(())
}

/// Decide/refine/answer until the model stops, runs out of new questions, or
/// `max_rounds` refinement rounds have been made.
pub(crate) fn refinement_loop(
    t: &mut Transcript,
    image: &ImageRef,
    max_rounds: u32,
    cfg: &PipelineConfig,
    backends: &Backends,
) -> Result<(), StageError> {
    let prompt = t.prompt.clone();
    let caption = t.caption.clone();
    let model = backends.vision.model_name();
    loop {
        let done = (t.rounds.len() - 1) as u32;
        let next = t.rounds.len();
        let stage = format!("decide/round-{next}");
        let outcome = timed(&mut t.timings, &stage, || {
            decide_refine(&t.rounds, &t.concepts, &prompt, caption.as_deref(), backends, done, max_rounds)
        })?;
        if outcome.fail_closed {
            t.metadata.insert(format!("{stage}.fail_closed"), "true".into());
        }
        if outcome.decision == Decision::Stop {
            break;
        }

        let stage = format!("refine/round-{next}");
        let started = Instant::now();
        let generated = generate_refinement(
            &t.rounds,
            &t.concepts,
            &prompt,
            caption.as_deref(),
            cfg.n_refine_per_round,
            backends,
            cfg.repair_retries,
        );
        t.timings.insert(stage.clone(), started.elapsed().as_millis() as u64);
        let questions = match generated {
            Ok(qs) => qs,
            Err(QuestionError::NoNewQuestions { .. }) => {
                t.metadata.insert(format!("{stage}.no_new_questions"), "true".into());
                break;
            }
            Err(e) => return Err(StageError { stage, message: e.to_string() }),
        };

        let stage = format!("vqa/round-{next}");
        let texts = question_texts(&questions);
        let (answers, latency) = timed(&mut t.timings, &stage, || backends.vqa(&stage, image, &texts))?;
        t.rounds.last_mut().expect("blind round present").decision_after = Decision::Refine;
        t.rounds.push(Round {
            index: next as u32,
            answers: answers_for(&questions, answers, &model, latency),
            questions,
            decision_after: Decision::Stop,
        });
    }
    Ok(())
}

/// One evaluation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub prompt: PromptSpec,
    pub image: ImageRef,
}

/// Evaluates every job with at most `workers` concurrent pipelines. Results
/// are in input order; a failed job yields its failed partial transcript.
pub fn batch_evaluate(
    jobs: &[Job],
    cfg: &PipelineConfig,
    backends: &Backends,
    workers: usize,
) -> Result<Vec<Transcript>, BatchError> {
    if workers == 0 {
        return Err(BatchError::ZeroWorkers);
    }
    Ok(exec::map_ordered(jobs, workers, |_, job| {
        match evaluate(&job.prompt, &job.image, cfg, backends) {
            Ok(t) => t,
            Err(failure) => *failure.partial,
        }
    }))
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {message}")]
    Read { path: String, message: String },
    #[error("{path} line {line}: {message}")]
    Row { path: String, line: usize, message: String },
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    id: String,
    prompt: String,
    image: String,
    #[serde(default)]
    input_image: Option<String>,
    #[serde(default)]
    task: Option<String>,
}

fn resolve(base: &Path, reference: &str) -> ImageRef {
    if reference.starts_with("data:") || Path::new(reference).is_absolute() {
        ImageRef::new(reference)
    } else {
        ImageRef::new(base.join(reference).to_string_lossy().into_owned())
    }
}

fn row_to_job(row: ManifestRow, base: &Path) -> Result<Job, String> {
    let input = row
        .input_image
        .as_deref()
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| resolve(base, s));
    let task = match row.task.as_deref().map(|s| s.trim().to_ascii_lowercase()) {
        None => {
            if input.is_some() {
                TaskKind::TargetedEdit
            } else {
                TaskKind::Generation
            }
        }
        Some(s) if s.is_empty() => {
            if input.is_some() {
                TaskKind::TargetedEdit
            } else {
                TaskKind::Generation
            }
        }
        Some(s) => match s.as_str() {
            "generation" | "t2i" => TaskKind::Generation,
            "targeted_edit" | "targetededit" | "edit" | "ite" => TaskKind::TargetedEdit,
            other => return Err(format!("unknown task {other:?}")),
        },
    };
    let prompt = PromptSpec { id: row.id, text: row.prompt, input_image: input, task };
    let problems = prompt.violations();
    if !problems.is_empty() {
        return Err(problems.join("; "));
    }
    Ok(Job { prompt, image: resolve(base, row.image.trim()) })
}

/// Reads a CSV (by `.csv` extension) or JSONL job manifest. Relative image
/// paths are resolved against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<Job>, ManifestError> {
    let shown = path.display().to_string();
    let base: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = std::fs::read_to_string(path).map_err(|e| ManifestError::Read { path: shown.clone(), message: e.to_string() })?;
    let is_csv = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let mut jobs = Vec::new();
    if is_csv {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
            let line = i + 2;
            let row = row.map_err(|e| ManifestError::Row { path: shown.clone(), line, message: e.to_string() })?;
            jobs.push(row_to_job(row, &base).map_err(|message| ManifestError::Row { path: shown.clone(), line, message })?);
        }
    } else {
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: ManifestRow = serde_json::from_str(line)
                .map_err(|e| ManifestError::Row { path: shown.clone(), line: i + 1, message: e.to_string() })?;
            jobs.push(
                row_to_job(row, &base).map_err(|message| ManifestError::Row { path: shown.clone(), line: i + 1, message })?,
            );
        }
    }
    Ok(jobs)
}
