//! Domain types shared by every stage of an evaluation, plus transcript
//! validation and configuration fingerprinting.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Reference to an image: a filesystem path or a `data:` base64 URI.
///
/// Images are never decoded here; the reference is forwarded verbatim to the
/// vision backend.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageRef(String);

impl ImageRef {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_data_uri(&self) -> bool {
        self.0.starts_with("data:")
    }

    /// Short stable identifier: the file stem for paths, a payload digest
    /// prefix for data URIs.
    pub fn id(&self) -> String {
        if self.is_data_uri() {
            let payload = self.0.split_once(',').map(|(_, p)| p).unwrap_or("");
            let digest = Sha256::digest(payload.as_bytes());
            format!("data-{}", &hex::encode(digest)[..16])
        } else {
            Path::new(&self.0)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| self.0.clone())
        }
    }

    /// Checks that the reference can be handed to a backend: the file exists,
    /// or the data URI carries a decodable base64 payload.
    pub fn check_resolvable(&self) -> Result<(), String> {
        if self.is_data_uri() {
            let Some((header, payload)) = self.0.split_once(',') else {
                return Err(format!("data URI without payload: {}", truncate(&self.0, 40)));
            };
            if !header.ends_with(";base64") {
                return Err("data URI is not base64 encoded".into());
            }
            base64::engine::general_purpose::STANDARD
                .decode(payload.trim())
                .map(|_| ())
                .map_err(|e| format!("data URI payload is not valid base64: {e}"))
        } else if Path::new(&self.0).is_file() {
            Ok(())
        } else {
            Err(format!("image not found: {}", self.0))
        }
    }

    /// The value sent over the wire: data URIs as-is, files as data URIs.
    pub fn to_wire(&self) -> Result<String, String> {
        self.check_resolvable()?;
        if self.is_data_uri() {
            return Ok(self.0.clone());
        }
        let bytes = std::fs::read(&self.0).map_err(|e| format!("{}: {e}", self.0))?;
        let mime = match Path::new(&self.0).extension().and_then(|e| e.to_str()) {
            Some("png") => "image/png",
            Some("jpg" | "jpeg") => "image/jpeg",
            Some("webp") => "image/webp",
            Some("gif") => "image/gif",
            _ => "application/octet-stream",
        };
        Ok(format!(
            "data:{mime};base64,{}",
            base64::engine::general_purpose::STANDARD.encode(bytes)
        ))
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Generation,
    TargetedEdit,
}

/// The generation or editing request under evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_image: Option<ImageRef>,
    pub task: TaskKind,
}

impl PromptSpec {
    pub fn generation(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            input_image: None,
            task: TaskKind::Generation,
        }
    }

    pub fn edit(id: impl Into<String>, instruction: impl Into<String>, input: ImageRef) -> Self {
        Self {
            id: id.into(),
            text: instruction.into(),
            input_image: Some(input),
            task: TaskKind::TargetedEdit,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.text.trim().is_empty() {
            out.push(format!("prompt {} has empty text", self.id));
        }
        match (self.task, &self.input_image) {
            (TaskKind::TargetedEdit, None) => {
                out.push(format!("prompt {} is a targeted edit without input_image", self.id))
            }
            (TaskKind::Generation, Some(_)) => {
                out.push(format!("prompt {} is a generation task with an input_image", self.id))
            }
            _ => {}
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConceptCategory {
    Object,
    Attribute,
    Relation,
    Context,
}

impl ConceptCategory {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "object" => Some(Self::Object),
            "attribute" => Some(Self::Attribute),
            "relation" => Some(Self::Relation),
            "context" => Some(Self::Context),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConceptOrigin {
    Explicit,
    Implicit,
}

impl ConceptOrigin {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "explicit" => Some(Self::Explicit),
            "implicit" => Some(Self::Implicit),
            _ => None,
        }
    }
}

/// Where a concept came from in edit evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptSource {
    Prompt,
    InputImage,
}

/// One expected visual concept.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VisualConcept {
    pub id: String,
    pub text: String,
    pub category: ConceptCategory,
    pub origin: ConceptOrigin,
    /// Prompt fragment an explicit concept was derived from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<ConceptSource>,
}

impl VisualConcept {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        category: ConceptCategory,
        origin: ConceptOrigin,
    ) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            category,
            origin,
            span: None,
            source: None,
        }
    }

    /// An explicit concept is grounded when its text or span note occurs in
    /// the prompt after case folding.
    pub fn is_grounded_in(&self, prompt: &str) -> bool {
        let prompt = prompt.to_lowercase();
        let hit = |s: &str| {
            let s = s.trim().to_lowercase();
            !s.is_empty() && prompt.contains(&s)
        };
        hit(&self.text) || self.span.as_deref().is_some_and(hit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuestionKind {
    Blind,
    Refinement,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub round: u32,
    pub text: String,
    pub kind: QuestionKind,
    #[serde(default)]
    pub target_concepts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub question_id: String,
    pub text: String,
    #[serde(default)]
    pub backend_meta: BTreeMap<String, String>,
}

/// The decision taken after a round: ask more questions or close and score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    Refine,
    Stop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub index: u32,
    pub questions: Vec<Question>,
    pub answers: Vec<Answer>,
    pub decision_after: Decision,
}

impl Round {
    /// Question/answer pairs in question order. Unanswered questions are skipped.
    pub fn pairs(&self) -> impl Iterator<Item = (&Question, &Answer)> {
        self.questions.iter().filter_map(|q| {
            self.answers
                .iter()
                .find(|a| a.question_id == q.id)
                .map(|a| (q, a))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "ViCE")]
    Vice,
    #[serde(rename = "ViCE_5")]
    Vice5,
    #[serde(rename = "ViCE_blind")]
    ViceBlind,
    Custom,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Self::Vice => "ViCE",
            Self::Vice5 => "ViCE_5",
            Self::ViceBlind => "ViCE_blind",
            Self::Custom => "Custom",
        }
    }

    /// Accepts both the display labels and the CLI spellings.
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().replace(['_', '-'], "").as_str() {
            "vice" => Some(Self::Vice),
            "vice5" => Some(Self::Vice5),
            "viceblind" => Some(Self::ViceBlind),
            "custom" => Some(Self::Custom),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub variant: Variant,
    pub n_blind: u32,
    pub n_refine_per_round: u32,
    pub max_refine_rounds: u32,
    pub use_caption: bool,
    pub temperature: f64,
    pub seed: u64,
    pub repair_retries: u32,
    /// Run the refinement loop after the paired round of an edit evaluation.
    #[serde(default)]
    pub ite_refinement: bool,
}

impl PipelineConfig {
    pub fn preset(variant: Variant) -> Self {
        let (n_blind, max_refine_rounds) = match variant {
            Variant::Vice | Variant::Custom => (15, 3),
            Variant::Vice5 => (5, 0),
            Variant::ViceBlind => (15, 0),
        };
        Self {
            variant,
            n_blind,
            n_refine_per_round: 5,
            max_refine_rounds,
            use_caption: true,
            temperature: 0.0,
            seed: 0,
            repair_retries: 1,
            ite_refinement: false,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.n_blind < 1 {
            out.push("n_blind must be >= 1".to_string());
        }
        if self.n_refine_per_round < 1 {
            out.push("n_refine_per_round must be >= 1".to_string());
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            out.push(format!("temperature must be finite and >= 0, got {}", self.temperature));
        }
        let label = self.variant.label();
        match self.variant {
            Variant::Vice => {
                if self.n_blind != 15 {
                    out.push(format!("{label} requires n_blind = 15, got {}", self.n_blind));
                }
                if self.max_refine_rounds < 1 {
                    out.push(format!("{label} requires max_refine_rounds >= 1"));
                }
                if !self.use_caption {
                    out.push(format!("{label} requires use_caption = true"));
                }
            }
            Variant::Vice5 | Variant::ViceBlind => {
                let want = if self.variant == Variant::Vice5 { 5 } else { 15 };
                if self.n_blind != want {
                    out.push(format!("{label} requires n_blind = {want}, got {}", self.n_blind));
                }
                if self.max_refine_rounds != 0 {
                    out.push(format!(
                        "{label} requires max_refine_rounds = 0, got {}",
                        self.max_refine_rounds
                    ));
                }
            }
            Variant::Custom => {}
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationScore {
    pub value: f64,
    pub rationale: String,
    pub raw_model_output: String,
    /// The model emitted a value outside [0, 10] that was clamped.
    #[serde(default)]
    pub clamped: bool,
    /// Number of repair turns needed to obtain a parseable score.
    #[serde(default)]
    pub repairs: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: String,
    pub message: String,
}

fn default_status() -> Status {
    Status::Ok
}

/// Complete record of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub prompt: PromptSpec,
    pub image: ImageRef,
    #[serde(default)]
    pub caption: Option<String>,
    pub concepts: Vec<VisualConcept>,
    pub rounds: Vec<Round>,
    /// Absent on failed transcripts and on the reference pass of an edit
    /// evaluation.
    #[serde(default)]
    pub score: Option<EvaluationScore>,
    pub config_fingerprint: String,
    pub seed: u64,
    #[serde(default)]
    pub timings: BTreeMap<String, u64>,
    #[serde(default = "default_status")]
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<Failure>,
    /// Audit notes: repair counts, truncation and fail-closed flags, the
    /// pre-reasoning turn.
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl Transcript {
    pub fn empty(prompt: PromptSpec, image: ImageRef, cfg: &PipelineConfig, fingerprint: String) -> Self {
        Self {
            prompt,
            image,
            caption: None,
            concepts: Vec::new(),
            rounds: Vec::new(),
            score: None,
            config_fingerprint: fingerprint,
            seed: cfg.seed,
            timings: BTreeMap::new(),
            status: Status::Ok,
            failure: None,
            metadata: BTreeMap::new(),
        }
    }

    pub fn is_failed(&self) -> bool {
        self.status == Status::Failed
    }

    /// Number of refinement rounds (all rounds after the blind one).
    pub fn refinement_rounds(&self) -> usize {
        self.rounds.len().saturating_sub(1)
    }

    /// Reference pass of an edit evaluation: the input image itself.
    pub fn is_edit_reference(&self) -> bool {
        self.prompt.task == TaskKind::TargetedEdit
            && self.prompt.input_image.as_ref() == Some(&self.image)
    }

    /// Zeroes every wall-clock measurement so that transcripts from repeated
    /// runs compare byte for byte.
    pub fn canonicalize(&mut self) {
        for v in self.timings.values_mut() {
            *v = 0;
        }
        for round in &mut self.rounds {
            for a in &mut round.answers {
                if let Some(v) = a.backend_meta.get_mut("latency_ms") {
                    *v = "0".into();
                }
            }
        }
    }

    pub fn canonicalized(mut self) -> Self {
        self.canonicalize();
        self
    }
}

/// Normalizes question text: collapsed whitespace and a trailing `?`.
pub fn normalize_question(text: &str) -> String {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let trimmed = collapsed.trim_end_matches(['.', '!', ' ']);
    if trimmed.ends_with('?') {
        trimmed.to_string()
    } else {
        format!("{trimmed}?")
    }
}

/// Key for duplicate detection: case-folded, whitespace collapsed, trailing
/// punctuation dropped.
pub fn question_key(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
        .trim_end_matches(['?', '.', '!', ' '])
        .to_string()
}

/// Every invariant violation in `t` under `cfg`, in a deterministic order.
pub fn validate_transcript(t: &Transcript, cfg: &PipelineConfig) -> Vec<String> {
    let mut out = Vec::new();
    out.extend(cfg.violations().into_iter().map(|v| format!("config: {v}")));
    out.extend(t.prompt.violations());

    let mut concept_ids = HashSet::new();
    for c in &t.concepts {
        if c.text.trim().is_empty() {
            out.push(format!("concept {} has empty text", c.id));
        }
        if !concept_ids.insert(c.id.as_str()) {
            out.push(format!("duplicate concept id {}", c.id));
        }
    }

    if t.is_failed() {
        if t.failure.is_none() {
            out.push("failed transcript without failure record".into());
        }
        return out;
    }

    if t.rounds.is_empty() {
        out.push("transcript has no rounds".into());
        return out;
    }

    let mut question_ids: HashMap<&str, u32> = HashMap::new();
    for (pos, round) in t.rounds.iter().enumerate() {
        if round.index as usize != pos {
            out.push(format!("round at position {pos} has index {}", round.index));
        }
        if pos == 0 && round.questions.len() != cfg.n_blind as usize {
            out.push(format!(
                "round 0 has {} questions, expected {}",
                round.questions.len(),
                cfg.n_blind
            ));
        }
        for q in &round.questions {
            if !question_ids.contains_key(q.id.as_str()) {
                question_ids.insert(q.id.as_str(), round.index);
            } else {
                out.push(format!("duplicate question id {}", q.id));
            }
            if q.round != round.index {
                out.push(format!("question {} has round {} inside round {}", q.id, q.round, round.index));
            }
            match (q.kind, q.round) {
                (QuestionKind::Blind, r) if r != 0 => {
                    out.push(format!("question {} is blind but belongs to round {r}", q.id))
                }
                (QuestionKind::Refinement, 0) => {
                    out.push(format!("question {} is a refinement question in round 0", q.id))
                }
                _ => {}
            }
            if !q.text.trim_end().ends_with('?') {
                out.push(format!("question {} does not end with '?'", q.id));
            }
            for target in &q.target_concepts {
                if !concept_ids.contains(target.as_str()) {
                    out.push(format!("question {} targets unknown concept {target}", q.id));
                }
            }
        }
        if round.answers.len() != round.questions.len() {
            out.push(format!(
                "round {} has {} answers for {} questions",
                round.index,
                round.answers.len(),
                round.questions.len()
            ));
        }
        let round_qids: HashSet<&str> = round.questions.iter().map(|q| q.id.as_str()).collect();
        let mut answered = HashSet::new();
        for a in &round.answers {
            if !round_qids.contains(a.question_id.as_str()) {
                out.push(format!(
                    "answer in round {} refers to question {} outside the round",
                    round.index, a.question_id
                ));
            } else if !answered.insert(a.question_id.as_str()) {
                out.push(format!("question {} answered more than once", a.question_id));
            }
        }
        let last = pos + 1 == t.rounds.len();
        match (last, round.decision_after) {
            (true, Decision::Refine) => out.push(format!(
                "round {} is the last round but its decision is Refine",
                round.index
            )),
            (false, Decision::Stop) => out.push(format!(
                "round {} decided Stop but is followed by another round",
                round.index
            )),
            _ => {}
        }
    }

    let refinements = t.refinement_rounds() as u32;
    let cap = if t.prompt.task == TaskKind::TargetedEdit && !cfg.ite_refinement {
        0
    } else {
        cfg.max_refine_rounds
    };
    if refinements > cap {
        out.push(format!("{refinements} refinement rounds exceed the cap of {cap}"));
    }

    match &t.score {
        Some(s) => {
            if !(0.0..=10.0).contains(&s.value) {
                out.push(format!("score {} outside [0, 10]", s.value));
            }
        }
        None if !t.is_edit_reference() => out.push("completed transcript has no score".into()),
        None => {}
    }
    out
}

/// Stable content hash of a configuration together with the prompt template
/// version it runs with.
pub fn fingerprint_config(cfg: &PipelineConfig, template_set_version: &str) -> String {
    // serde_json emits struct fields in declaration order and formats floats
    // with a shortest round-trip representation, so the bytes are portable.
    let body = serde_json::json!({
        "config": cfg,
        "templates": template_set_version,
    });
    let digest = Sha256::digest(body.to_string().as_bytes());
    hex::encode(&digest[..16])
}
