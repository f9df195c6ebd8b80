//! Wire contracts for the two model roles.
//!
//! The reasoning model is any chat-completion endpoint; the vision model
//! answers caption and question requests about an image. Both are behind
//! traits so that scripted and recorded backends can stand in for live ones.

mod http;
mod scripted;

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::ImageRef;
use crate::templates::TemplateSet;

pub use http::{HttpReasoner, HttpVision, ENV_API_KEY, ENV_REASONING_URL, ENV_VISION_URL};
pub use scripted::{EchoVision, Recorder, ScriptEntry, ScriptMatch, ScriptedBackend, VisionFixture};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("request timed out (budget {0} ms)")]
    Timeout(u64),
    #[error("transport failure after {attempts} attempt(s): {message}")]
    TransportFailure { attempts: u32, message: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("unscripted request (digest {digest}): {detail}")]
    UnscriptedRequest { digest: String, detail: String },
    #[error("script {path}: {message}")]
    ScriptParse { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    /// A blank model reply is echoed back as a placeholder so repair
    /// requests stay well formed.
    pub fn assistant(content: impl Into<String>) -> Self {
        let content = content.into();
        let content = if content.trim().is_empty() { EMPTY_REPLY.to_string() } else { content };
        Self { role: Role::Assistant, content }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendPolicy {
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub temperature: f64,
}

impl Default for BackendPolicy {
    fn default() -> Self {
        Self {
            timeout_ms: 60_000,
            max_retries: 2,
            backoff_base_ms: 500,
            temperature: 0.0,
        }
    }
}

impl BackendPolicy {
    pub fn check(&self) -> Result<(), BackendError> {
        if self.timeout_ms == 0 {
            return Err(BackendError::Precondition("timeout must be > 0".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(BackendError::Precondition(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64 << attempt.min(16);
        Duration::from_millis(self.backoff_base_ms.saturating_mul(factor).min(30_000))
    }
}

/// Outcome of one transport attempt.
#[derive(Debug)]
pub(crate) enum AttemptError {
    Timeout(String),
    Transient(String),
    Fatal(BackendError),
}

/// Runs `attempt` until it succeeds, fails fatally, or `max_retries + 1`
/// attempts have been made, sleeping with exponential backoff in between.
pub(crate) fn with_retries<T>(
    policy: &BackendPolicy,
    label: &str,
    mut attempt: impl FnMut(u32) -> Result<T, AttemptError>,
) -> Result<T, BackendError> {
    let total = policy.max_retries + 1;
    let mut last = None;
    for n in 1..=total {
        match attempt(n) {
            Ok(v) => {
                if n > 1 {
                    tracing::info!(%label, attempts = n, "request succeeded after retries");
                }
                return Ok(v);
            }
            Err(AttemptError::Fatal(e)) => return Err(e),
            Err(e) => {
                tracing::warn!(%label, attempt = n, error = ?e, "transient backend failure");
                last = Some(e);
                if n < total {
                    std::thread::sleep(policy.backoff(n - 1));
                }
            }
        }
    }
    Err(match last {
        Some(AttemptError::Timeout(detail)) => {
            tracing::warn!(%label, %detail, "latency budget exceeded");
            BackendError::Timeout(policy.timeout_ms)
        }
        Some(AttemptError::Transient(message)) => BackendError::TransportFailure { attempts: total, message },
        _ => unreachable!("loop runs at least once"),
    })
}

pub trait ReasoningBackend: Send + Sync {
    /// One chat completion. Implementations own retries and recording.
    fn chat(&self, messages: &[ChatMessage], policy: &BackendPolicy) -> Result<String, BackendError>;

    fn model_name(&self) -> String;

    fn probe(&self, policy: &BackendPolicy) -> Result<(), BackendError> {
        let reply = self.chat(
            &[
                ChatMessage::system("Health probe."),
                ChatMessage::user("Reply with the single word OK."),
            ],
            policy,
        )?;
        if reply.trim().is_empty() {
            return Err(BackendError::MalformedResponse("empty probe reply".into()));
        }
        Ok(())
    }
}

pub trait VisionBackend: Send + Sync {
    fn caption(&self, image: &ImageRef, policy: &BackendPolicy) -> Result<String, BackendError>;

    fn answer(
        &self,
        image: &ImageRef,
        questions: &[String],
        policy: &BackendPolicy,
    ) -> Result<Vec<String>, BackendError>;

    fn model_name(&self) -> String;

    fn probe(&self, policy: &BackendPolicy) -> Result<(), BackendError>;
}

/// Stands in for an empty assistant reply inside a conversation.
pub const EMPTY_REPLY: &str = "(empty reply)";

/// Sends `messages` to the reasoning model and returns the assistant text.
pub fn complete(
    backend: &dyn ReasoningBackend,
    messages: &[ChatMessage],
    policy: &BackendPolicy,
) -> Result<String, BackendError> {
    if messages.is_empty() {
        return Err(BackendError::Precondition("empty message list".into()));
    }
    if let Some(pos) = messages.iter().position(|m| m.content.trim().is_empty()) {
        return Err(BackendError::Precondition(format!("message {pos} has empty content")));
    }
    policy.check()?;
    backend.chat(messages, policy)
}

/// Single-sentence caption of `image`.
pub fn caption(
    backend: &dyn VisionBackend,
    image: &ImageRef,
    policy: &BackendPolicy,
) -> Result<String, BackendError> {
    image.check_resolvable().map_err(BackendError::Precondition)?;
    policy.check()?;
    let text = backend.caption(image, policy)?;
    let text = text.trim();
    if text.is_empty() {
        return Err(BackendError::MalformedResponse("empty caption".into()));
    }
    Ok(text.to_string())
}

/// One answer per question, in question order.
pub fn vqa(
    backend: &dyn VisionBackend,
    image: &ImageRef,
    questions: &[String],
    policy: &BackendPolicy,
) -> Result<Vec<String>, BackendError> {
    if questions.is_empty() {
        return Err(BackendError::Precondition("no questions to answer".into()));
    }
    image.check_resolvable().map_err(BackendError::Precondition)?;
    policy.check()?;
    let answers = backend.answer(image, questions, policy)?;
    if answers.len() != questions.len() {
        return Err(BackendError::MalformedResponse(format!(
            "answer count mismatch: {} questions, {} answers",
            questions.len(),
            answers.len()
        )));
    }
    Ok(answers)
}

fn normalize_content(s: &str) -> String {
    s.replace("\r\n", "\n").trim().to_string()
}

/// Digest of a chat request: roles, normalized contents and temperature.
pub fn request_digest(messages: &[ChatMessage], temperature: f64) -> String {
    let body = serde_json::json!({
        "messages": messages
            .iter()
            .map(|m| serde_json::json!({"role": m.role, "content": normalize_content(&m.content)}))
            .collect::<Vec<_>>(),
        "temperature": temperature,
    });
    hex::encode(Sha256::digest(body.to_string().as_bytes()))
}

/// Digest of a vision request; an empty question list denotes a caption.
pub fn vision_digest(image: &ImageRef, questions: &[String]) -> String {
    let body = serde_json::json!({
        "image": image.id(),
        "questions": questions.iter().map(|q| normalize_content(q)).collect::<Vec<_>>(),
    });
    hex::encode(Sha256::digest(body.to_string().as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    Reasoning,
    Caption,
    Vqa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub kind: CallKind,
    pub stage: String,
    #[serde(default)]
    pub image: Option<String>,
    #[serde(default)]
    pub questions: Vec<String>,
    #[serde(default)]
    pub messages: Vec<ChatMessage>,
}

/// Ordered log of backend calls made through a [`Backends`] bundle.
#[derive(Debug, Clone, Default)]
pub struct CallLog(Arc<Mutex<Vec<CallRecord>>>);

impl CallLog {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, record: CallRecord) {
        self.0.lock().expect("call log poisoned").push(record);
    }

    pub fn records(&self) -> Vec<CallRecord> {
        self.0.lock().expect("call log poisoned").clone()
    }

    pub fn stages(&self) -> Vec<String> {
        self.records().into_iter().map(|r| r.stage).collect()
    }
}

/// Everything an evaluation needs to talk to its models.
#[derive(Clone)]
pub struct Backends {
    pub reasoning: Arc<dyn ReasoningBackend>,
    pub vision: Arc<dyn VisionBackend>,
    pub policy: BackendPolicy,
    pub templates: Arc<TemplateSet>,
    log: Option<CallLog>,
}

impl Backends {
    pub fn new(reasoning: Arc<dyn ReasoningBackend>, vision: Arc<dyn VisionBackend>) -> Self {
        Self {
            reasoning,
            vision,
            policy: BackendPolicy::default(),
            templates: Arc::new(TemplateSet::builtin()),
            log: None,
        }
    }

    pub fn with_policy(mut self, policy: BackendPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_templates(mut self, templates: TemplateSet) -> Self {
        self.templates = Arc::new(templates);
        self
    }

    pub fn with_log(mut self, log: CallLog) -> Self {
        self.log = Some(log);
        self
    }

    pub fn with_temperature(&self, temperature: f64) -> Self {
        let mut out = self.clone();
        out.policy.temperature = temperature;
        out
    }

    pub fn log(&self) -> Option<&CallLog> {
        self.log.as_ref()
    }

    pub fn complete(&self, stage: &str, messages: &[ChatMessage]) -> Result<String, BackendError> {
        if let Some(log) = &self.log {
            log.push(CallRecord {
                kind: CallKind::Reasoning,
                stage: stage.to_string(),
                image: None,
                questions: Vec::new(),
                messages: messages.to_vec(),
            });
        }
        complete(self.reasoning.as_ref(), messages, &self.policy)
    }

    pub fn caption(&self, stage: &str, image: &ImageRef) -> Result<String, BackendError> {
        if let Some(log) = &self.log {
            log.push(CallRecord {
                kind: CallKind::Caption,
                stage: stage.to_string(),
                image: Some(image.id()),
                questions: Vec::new(),
                messages: Vec::new(),
            });
        }
        caption(self.vision.as_ref(), image, &self.policy)
    }

    /// Answers plus the wall-clock latency of the call in milliseconds.
    pub fn vqa(
        &self,
        stage: &str,
        image: &ImageRef,
        questions: &[String],
    ) -> Result<(Vec<String>, u64), BackendError> {
        if let Some(log) = &self.log {
            log.push(CallRecord {
                kind: CallKind::Vqa,
                stage: stage.to_string(),
                image: Some(image.id()),
                questions: questions.to_vec(),
                messages: Vec::new(),
            });
        }
        let started = Instant::now();
        let answers = vqa(self.vision.as_ref(), image, questions, &self.policy)?;
        Ok((answers, started.elapsed().as_millis() as u64))
    }

    pub fn render(&self, template: &str, vars: &[(&str, &str)]) -> String {
        self.templates.render(template, vars)
    }
}
