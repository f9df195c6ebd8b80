use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{request_digest, vision_digest, BackendError, BackendPolicy, ChatMessage, ReasoningBackend, VisionBackend};
use crate::model::{question_key, ImageRef};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScriptMatch {
    Digest(String),
    Index(usize),
}

/// One entry of a script or cassette file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(rename = "match")]
    pub matcher: ScriptMatch,
    pub reply: String,
    /// Human-readable copy of the request; ignored on replay.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request: Option<Value>,
}

#[derive(Debug)]
enum Mode {
    Strict(HashMap<String, String>),
    Sequence { replies: Vec<String>, next: Mutex<usize> },
}

/// Deterministic backend answering from a script.
///
/// Strict scripts look replies up by request digest, so any change to a
/// prompt template makes the lookup fail. Sequence scripts hand out replies
/// in order and are meant for a single pipeline at a time.
#[derive(Debug)]
pub struct ScriptedBackend {
    mode: Mode,
    name: String,
}

impl ScriptedBackend {
    pub fn strict(entries: impl IntoIterator<Item = (String, String)>) -> Self {
        Self {
            mode: Mode::Strict(entries.into_iter().collect()),
            name: "scripted".into(),
        }
    }

    pub fn sequence(replies: Vec<String>) -> Self {
        Self {
            mode: Mode::Sequence { replies, next: Mutex::new(0) },
            name: "scripted".into(),
        }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn from_entries(entries: Vec<ScriptEntry>, label: &str) -> Result<Self, BackendError> {
        let err = |message: String| BackendError::ScriptParse { path: label.to_string(), message };
        let digests = entries.iter().filter(|e| matches!(e.matcher, ScriptMatch::Digest(_))).count();
        if digests == entries.len() {
            let mut map = HashMap::new();
            for e in entries {
                let ScriptMatch::Digest(d) = e.matcher else { unreachable!() };
                if let Some(prev) = map.insert(d.clone(), e.reply.clone()) {
                    if prev != e.reply {
                        return Err(err(format!("digest {d} has conflicting replies")));
                    }
                }
            }
            return Ok(Self::strict(map));
        }
        if digests > 0 {
            return Err(err("script mixes digest and index entries".into()));
        }
        let mut indexed: Vec<(usize, String)> = entries
            .into_iter()
            .map(|e| match e.matcher {
                ScriptMatch::Index(i) => (i, e.reply),
                ScriptMatch::Digest(_) => unreachable!(),
            })
            .collect();
        indexed.sort_by_key(|(i, _)| *i);
        for (pos, (i, _)) in indexed.iter().enumerate() {
            if *i != pos {
                return Err(err(format!("sequence indices must be 0..n without gaps, found {i} at position {pos}")));
            }
        }
        Ok(Self::sequence(indexed.into_iter().map(|(_, r)| r).collect()))
    }

    pub fn parse(text: &str, label: &str) -> Result<Self, BackendError> {
        let entries: Vec<ScriptEntry> = serde_json::from_str(text).map_err(|e| BackendError::ScriptParse {
            path: label.to_string(),
            message: e.to_string(),
        })?;
        Self::from_entries(entries, label)
    }

    /// Reads a script file.
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let label = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| BackendError::ScriptParse {
            path: label.clone(),
            message: e.to_string(),
        })?;
        Ok(Self::parse(&text, &label)?.named(format!("scripted:{}", file_name(path))))
    }

    pub fn is_strict(&self) -> bool {
        matches!(self.mode, Mode::Strict(_))
    }

    /// Replies consumed so far (sequence mode only).
    pub fn consumed(&self) -> usize {
        match &self.mode {
            Mode::Strict(_) => 0,
            Mode::Sequence { next, .. } => *next.lock().expect("script lock poisoned"),
        }
    }

    fn reply_for(&self, digest: String, detail: impl FnOnce() -> String) -> Result<String, BackendError> {
        match &self.mode {
            Mode::Strict(map) => map.get(&digest).cloned().ok_or_else(|| BackendError::UnscriptedRequest {
                digest,
                detail: detail(),
            }),
            Mode::Sequence { replies, next } => {
                let mut next = next.lock().expect("script lock poisoned");
                match replies.get(*next) {
                    Some(r) => {
                        *next += 1;
                        Ok(r.clone())
                    }
                    None => Err(BackendError::UnscriptedRequest {
                        digest,
                        detail: format!("sequence exhausted after {} replies; {}", replies.len(), detail()),
                    }),
                }
            }
        }
    }
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn last_user_excerpt(messages: &[ChatMessage]) -> String {
    let text = messages.last().map(|m| m.content.as_str()).unwrap_or("");
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    format!("last message starts with {:?}", first.chars().take(80).collect::<String>())
}

impl ReasoningBackend for ScriptedBackend {
    fn chat(&self, messages: &[ChatMessage], policy: &BackendPolicy) -> Result<String, BackendError> {
        let digest = request_digest(messages, policy.temperature);
        self.reply_for(digest, || last_user_excerpt(messages))
    }

    fn model_name(&self) -> String {
        self.name.clone()
    }

    fn probe(&self, _policy: &BackendPolicy) -> Result<(), BackendError> {
        Ok(())
    }
}

impl VisionBackend for ScriptedBackend {
    fn caption(&self, image: &ImageRef, _policy: &BackendPolicy) -> Result<String, BackendError> {
        self.reply_for(vision_digest(image, &[]), || format!("caption of {}", image.id()))
    }

    fn answer(
        &self,
        image: &ImageRef,
        questions: &[String],
        _policy: &BackendPolicy,
    ) -> Result<Vec<String>, BackendError> {
        let reply = self.reply_for(vision_digest(image, questions), || {
            format!("{} questions about {}", questions.len(), image.id())
        })?;
        serde_json::from_str::<Vec<String>>(&reply)
            .map_err(|e| BackendError::MalformedResponse(format!("scripted answers are not a JSON string array: {e}")))
    }

    fn model_name(&self) -> String {
        self.name.clone()
    }

    fn probe(&self, _policy: &BackendPolicy) -> Result<(), BackendError> {
        Ok(())
    }
}

/// Per-image scripted vision answers, keyed by image id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageScript {
    #[serde(default)]
    pub caption: Option<String>,
    /// Question text to answer; matched after case and punctuation folding.
    #[serde(default)]
    pub answers: BTreeMap<String, String>,
    #[serde(default)]
    pub default_answer: Option<String>,
    /// Truncates every answer list to this many entries.
    #[serde(default)]
    pub answer_limit: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VisionFixture {
    pub images: BTreeMap<String, ImageScript>,
}

impl VisionFixture {
    pub fn parse(text: &str, label: &str) -> Result<Self, BackendError> {
        serde_json::from_str(text).map_err(|e| BackendError::ScriptParse {
            path: label.to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let label = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| BackendError::ScriptParse {
            path: label.clone(),
            message: e.to_string(),
        })?;
        Self::parse(&text, &label)
    }

    fn script(&self, image: &ImageRef) -> Result<&ImageScript, BackendError> {
        self.images.get(&image.id()).ok_or_else(|| BackendError::UnscriptedRequest {
            digest: vision_digest(image, &[]),
            detail: format!("no vision fixture for image {}", image.id()),
        })
    }
}

impl VisionBackend for VisionFixture {
    fn caption(&self, image: &ImageRef, _policy: &BackendPolicy) -> Result<String, BackendError> {
        self.script(image)?.caption.clone().ok_or_else(|| BackendError::UnscriptedRequest {
            digest: vision_digest(image, &[]),
            detail: format!("no caption scripted for image {}", image.id()),
        })
    }

    fn answer(
        &self,
        image: &ImageRef,
        questions: &[String],
        _policy: &BackendPolicy,
    ) -> Result<Vec<String>, BackendError> {
        let script = self.script(image)?;
        let keyed: HashMap<String, &String> = script.answers.iter().map(|(q, a)| (question_key(q), a)).collect();
        let mut out = Vec::with_capacity(questions.len());
        for q in questions {
            match keyed.get(&question_key(q)).copied().or(script.default_answer.as_ref()) {
                Some(a) => out.push(a.clone()),
                None => {
                    return Err(BackendError::UnscriptedRequest {
                        digest: vision_digest(image, std::slice::from_ref(q)),
                        detail: format!("no answer scripted for {q:?} on image {}", image.id()),
                    })
                }
            }
        }
        if let Some(limit) = script.answer_limit {
            out.truncate(limit);
        }
        Ok(out)
    }

    fn model_name(&self) -> String {
        "scripted-vision".into()
    }

    fn probe(&self, _policy: &BackendPolicy) -> Result<(), BackendError> {
        Ok(())
    }
}

/// In-process stand-in for the vision adapter's echo mode.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoVision;

impl VisionBackend for EchoVision {
    fn caption(&self, image: &ImageRef, _policy: &BackendPolicy) -> Result<String, BackendError> {
        Ok(format!("ECHO:{}", image.id()))
    }

    fn answer(&self, _image: &ImageRef, questions: &[String], _policy: &BackendPolicy) -> Result<Vec<String>, BackendError> {
        Ok(questions.iter().map(|q| format!("ECHO:{q}")).collect())
    }

    fn model_name(&self) -> String {
        "echo".into()
    }

    fn probe(&self, _policy: &BackendPolicy) -> Result<(), BackendError> {
        Ok(())
    }
}

/// Records every successful request/reply of the wrapped backend into a
/// digest-keyed cassette that [`ScriptedBackend`] replays in strict mode.
pub struct Recorder<B: ?Sized> {
    inner: Arc<B>,
    entries: Mutex<(Vec<ScriptEntry>, HashSet<String>)>,
}

impl<B: ?Sized> Recorder<B> {
    pub fn new(inner: Arc<B>) -> Self {
        Self { inner, entries: Mutex::new((Vec::new(), HashSet::new())) }
    }

    fn record(&self, digest: String, reply: &str, request: Value) {
        let mut guard = self.entries.lock().expect("recorder poisoned");
        if guard.1.insert(digest.clone()) {
            guard.0.push(ScriptEntry {
                matcher: ScriptMatch::Digest(digest),
                reply: reply.to_string(),
                request: Some(request),
            });
        }
    }

    pub fn entries(&self) -> Vec<ScriptEntry> {
        self.entries.lock().expect("recorder poisoned").0.clone()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries()).expect("script entries serialize")
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json() + "\n")
    }

    pub fn replay(&self) -> ScriptedBackend {
        ScriptedBackend::from_entries(self.entries(), "recording").expect("recorded entries are digest-keyed")
    }
}

impl ReasoningBackend for Recorder<dyn ReasoningBackend> {
    fn chat(&self, messages: &[ChatMessage], policy: &BackendPolicy) -> Result<String, BackendError> {
        let reply = self.inner.chat(messages, policy)?;
        let request = serde_json::json!({ "messages": messages, "temperature": policy.temperature });
        self.record(request_digest(messages, policy.temperature), &reply, request);
        Ok(reply)
    }

    fn model_name(&self) -> String {
        self.inner.model_name()
    }

    fn probe(&self, policy: &BackendPolicy) -> Result<(), BackendError> {
        self.inner.probe(policy)
    }
}

impl VisionBackend for Recorder<dyn VisionBackend> {
    fn caption(&self, image: &ImageRef, policy: &BackendPolicy) -> Result<String, BackendError> {
        let reply = self.inner.caption(image, policy)?;
        let request = serde_json::json!({ "image": image.id(), "questions": [] });
        self.record(vision_digest(image, &[]), &reply, request);
        Ok(reply)
    }

    fn answer(
        &self,
        image: &ImageRef,
        questions: &[String],
        policy: &BackendPolicy,
    ) -> Result<Vec<String>, BackendError> {
        let answers = self.inner.answer(image, questions, policy)?;
        let reply = serde_json::to_string(&answers).expect("strings serialize");
        let request = serde_json::json!({ "image": image.id(), "questions": questions });
        self.record(vision_digest(image, questions), &reply, request);
        Ok(answers)
    }

    fn model_name(&self) -> String {
        self.inner.model_name()
    }

    fn probe(&self, policy: &BackendPolicy) -> Result<(), BackendError> {
        self.inner.probe(policy)
    }
}
