#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use vice_core::backend::{
    BackendError, BackendPolicy, Backends, CallLog, ChatMessage, EchoVision, ReasoningBackend, Recorder,
    ScriptedBackend, VisionBackend, VisionFixture,
};
use vice_core::model::{ImageRef, PromptSpec, Transcript, Variant};
use vice_core::pipeline::Job;

pub const VARIANTS: [(Variant, &str); 3] = [(Variant::Vice, "vice"), (Variant::Vice5, "vice5"), (Variant::ViceBlind, "viceblind")];

pub struct Scenario {
    pub name: &'static str,
    pub prompt: &'static str,
    pub image: &'static str,
    pub score: f64,
}

pub const SCENARIOS: [Scenario; 3] = [
    Scenario { name: "gen-success", prompt: "a red apple on a wooden table", image: "apple-table", score: 9.0 },
    Scenario { name: "gen-failure", prompt: "two dogs playing in the snow", image: "cat-grass", score: 1.0 },
    Scenario { name: "cat-stairs", prompt: "a cat on the stairs", image: "cat-stairs", score: 7.0 },
];

pub fn fixtures() -> PathBuf {
    Path::new("tests").join("fixtures")
}

/// Relative path, so transcripts do not depend on where the repo lives.
pub fn image(name: &str) -> ImageRef {
    ImageRef::new(format!("tests/fixtures/images/{name}.png"))
}

pub fn script(name: &str) -> PathBuf {
    fixtures().join("scripts").join(format!("{name}.json"))
}

pub fn vision_fixture() -> Arc<VisionFixture> {
    Arc::new(VisionFixture::load(&fixtures().join("vision.json")).expect("vision fixture"))
}

pub fn scripted(script_name: &str) -> Backends {
    let reasoning = ScriptedBackend::load(&script(script_name)).expect("reasoning script");
    Backends::new(Arc::new(reasoning), vision_fixture())
}

pub fn scenario_backends(s: &Scenario, variant: &str) -> (Backends, CallLog) {
    let log = CallLog::new();
    (scripted(&format!("{}.{variant}", s.name)).with_log(log.clone()), log)
}

pub fn prompt(s: &Scenario) -> PromptSpec {
    PromptSpec::generation(s.name, s.prompt)
}

pub fn golden_path(name: &str) -> PathBuf {
    Path::new("tests").join("golden").join(name)
}

pub fn jsonl(transcripts: &[Transcript]) -> String {
    transcripts.iter().map(|t| serde_json::to_string(&t.clone().canonicalized()).unwrap() + "\n").collect()
}

/// Compares `content` with the stored golden file, or rewrites the file
/// when `VICE_BLESS=1`.
pub fn check_golden(name: &str, content: &str) -> Result<(), String> {
    let path = golden_path(name);
    if std::env::var("VICE_BLESS").as_deref() == Ok("1") {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, content).unwrap();
        return Ok(());
    }
    let want = std::fs::read_to_string(&path)
        .map_err(|e| format!("{}: {e} (run with VICE_BLESS=1 to create it)", path.display()))?;
    if want == content {
        Ok(())
    } else {
        let line = want.lines().zip(content.lines()).position(|(a, b)| a != b).unwrap_or(0) + 1;
        Err(format!("{} differs from the current output at line {line}", path.display()))
    }
}

/// Deterministic reasoning model that answers from the request text alone.
/// With `always_refine` it asks for more information on every decision.
pub struct RuleReasoner {
    pub always_refine: bool,
}

fn quoted_prompt(messages: &[ChatMessage]) -> String {
    messages
        .iter()
        .find_map(|m| {
            let start = m.content.find("Prompt: \"")? + 9;
            let end = m.content[start..].find('"')?;
            Some(m.content[start..start + end].to_string())
        })
        .unwrap_or_default()
}

fn number_after(text: &str, marker: &str) -> Option<usize> {
    let at = text.find(marker)? + marker.len();
    text[at..].split_whitespace().next()?.parse().ok()
}

impl ReasoningBackend for RuleReasoner {
    fn chat(&self, messages: &[ChatMessage], _policy: &BackendPolicy) -> Result<String, BackendError> {
        let last = &messages.last().expect("non-empty").content;
        let prompt = quoted_prompt(messages);
        let reply = if last.contains("describe what you expect") {
            format!("I expect {prompt}, shown clearly.")
        } else if last.contains("turn your expectations into a list") {
            serde_json::json!([
                {"text": prompt, "category": "Object", "origin": "Explicit", "span": prompt},
                {"text": "coherent scene", "category": "Context", "origin": "Implicit"}
            ])
            .to_string()
        } else if let Some(n) = number_after(last, "Write exactly") {
            let qs: Vec<_> = (1..=n)
                .map(|i| serde_json::json!({"text": format!("Does detail {i} of {prompt} appear?"), "target_concept_ids": ["c1"]}))
                .collect();
            serde_json::Value::Array(qs).to_string()
        } else if last.contains("Do you need further information") {
            let asked = last.matches("Follow-up").count();
            if self.always_refine || asked == 0 { "yes, one more check." } else { "no." }.to_string()
        } else if let Some(k) = number_after(last, "Write up to") {
            let asked = last.matches("Follow-up").count();
            let qs: Vec<_> = (asked + 1..=asked + k)
                .map(|i| serde_json::json!({"text": format!("Follow-up {i}: is {prompt} sharp?"), "target_concept_ids": ["c2"]}))
                .collect();
            serde_json::Value::Array(qs).to_string()
        } else if last.contains("SCORE:") {
            format!("SCORE: {}\nJudged from the answers.", prompt.len() % 11)
        } else {
            "I cannot help with that.".to_string()
        };
        Ok(reply)
    }

    fn model_name(&self) -> String {
        "rule-reasoner".into()
    }
}

pub const BATCH_IMAGES: [&str; 3] = ["apple-table", "cat-grass", "cat-stairs"];

pub fn batch_jobs(n: usize) -> Vec<Job> {
    (0..n)
        .map(|i| Job {
            prompt: PromptSpec::generation(format!("job-{i:03}"), format!("scene number {i} with a lamp")),
            image: image(BATCH_IMAGES[i % BATCH_IMAGES.len()]),
        })
        .collect()
}

/// Records a sequential run of `jobs` against the rule-based model and
/// returns backends that replay the strict, digest-keyed cassettes.
pub fn record_cassettes(jobs: &[Job], cfg: &vice_core::model::PipelineConfig) -> Backends {
    let reasoning: Arc<Recorder<dyn ReasoningBackend>> =
        Arc::new(Recorder::new(Arc::new(RuleReasoner { always_refine: false }) as Arc<dyn ReasoningBackend>));
    let vision: Arc<Recorder<dyn VisionBackend>> =
        Arc::new(Recorder::new(Arc::new(EchoVision) as Arc<dyn VisionBackend>));
    let live = Backends::new(reasoning.clone(), vision.clone());
    let _ = vice_core::pipeline::batch_evaluate(jobs, cfg, &live, 1).unwrap();
    let r = reasoning.replay();
    let v = vision.replay();
    assert!(r.is_strict() && v.is_strict());
    Backends::new(Arc::new(r), Arc::new(v))
}

pub struct CliRun {
    pub code: i32,
    pub out: String,
    pub err: String,
}

pub fn cli(args: &[&str], env: &[(&str, &str)]) -> CliRun {
    let env = env.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = vice_core::cli::run_with(std::iter::once("vice").chain(args.iter().copied()), &env, &mut out, &mut err);
    CliRun { code, out: String::from_utf8(out).unwrap(), err: String::from_utf8(err).unwrap() }
}

/// One digest-keyed reasoning cassette covering every scenario under
/// `variant`, so a single script can serve a whole manifest.
pub fn scenario_cassette(variant: &str) -> String {
    let cfg = vice_core::pipeline::preset(Variant::parse(variant).unwrap());
    let mut entries = Vec::new();
    for s in &SCENARIOS {
        let seq: Arc<dyn ReasoningBackend> = Arc::new(ScriptedBackend::load(&script(&format!("{}.{variant}", s.name))).unwrap());
        let rec = Arc::new(Recorder::new(seq));
        let backends = Backends::new(rec.clone(), vision_fixture());
        vice_core::pipeline::evaluate(&prompt(s), &image(s.image), &cfg, &backends).unwrap();
        entries.extend(rec.entries());
    }
    serde_json::to_string_pretty(&entries).unwrap()
}
