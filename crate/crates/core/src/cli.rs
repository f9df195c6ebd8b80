//! The `vice` command line.
//!
//! Settings come from flags, then the `--config` TOML file, then environment
//! variables, highest precedence first. Exit codes: 0 success, 1 usage,
//! configuration or input-schema error, 2 when an evaluation job failed.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::backend::{
    BackendError, BackendPolicy, Backends, EchoVision, HttpReasoner, HttpVision, ReasoningBackend, Recorder,
    ScriptedBackend, VisionBackend, VisionFixture, ENV_API_KEY, ENV_REASONING_URL, ENV_VISION_URL,
};
use crate::exec;
use crate::ite::evaluate_edit;
use crate::model::{ImageRef, PipelineConfig, PromptSpec, Variant};
use crate::pipeline::{batch_evaluate, load_manifest, Job};
use crate::report;
use crate::stats::{agreement, AgreementOptions, ScoreTable};
use crate::templates::TemplateSet;

const DEFAULT_MODEL: &str = "gpt-3.5-turbo";

#[derive(Debug, Parser)]
#[command(name = "vice", version, about = "Question-answering consistency evaluation for generated and edited images")]
struct Cli {
    /// TOML file with [backends], [pipeline] and [stats] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score images against their prompts.
    Evaluate(EvaluateArgs),
    /// Score an edit of an input image against the instruction.
    Ite(IteArgs),
    /// Agreement of metric scores with human ratings.
    Correlate(CorrelateArgs),
    /// Probe the configured backends.
    CheckBackends(CheckArgs),
}

#[derive(Debug, Args, Default)]
struct BackendFlags {
    #[arg(long)]
    reasoning_url: Option<String>,
    #[arg(long)]
    reasoning_model: Option<String>,
    #[arg(long)]
    vision_url: Option<String>,
    /// Scripted reasoning replies (JSON array of entries) instead of a server.
    #[arg(long)]
    reasoning_script: Option<PathBuf>,
    /// Vision script, fixture file, or `echo`.
    #[arg(long)]
    vision_script: Option<PathBuf>,
    #[arg(long)]
    timeout_ms: Option<u64>,
    #[arg(long)]
    max_retries: Option<u32>,
    /// Record live traffic into replayable cassettes in this directory.
    #[arg(long)]
    record_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PipelineFlags {
    /// vice, vice5 or viceblind.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Zero timings and latencies so reruns are byte-identical.
    #[arg(long)]
    canonical: bool,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Prompt text for a single evaluation (with --image).
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long, default_value = "p1")]
    prompt_id: String,
    #[arg(long)]
    image: Option<PathBuf>,
    /// CSV or JSONL file of jobs.
    #[arg(long, conflicts_with_all = ["prompt", "image"])]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "vice-out")]
    out: PathBuf,
    #[command(flatten)]
    pipeline: PipelineFlags,
    #[command(flatten)]
    backends: BackendFlags,
}

#[derive(Debug, Args)]
struct IteArgs {
    #[arg(long)]
    instruction: String,
    #[arg(long)]
    input_image: PathBuf,
    #[arg(long)]
    edited_image: PathBuf,
    #[arg(long, default_value = "edit")]
    id: String,
    #[arg(long, default_value = "vice-out")]
    out: PathBuf,
    #[command(flatten)]
    pipeline: PipelineFlags,
    #[command(flatten)]
    backends: BackendFlags,
}

#[derive(Debug, Args)]
struct CorrelateArgs {
    /// CSV with header id,human,<metric>,...
    #[arg(long)]
    scores: PathBuf,
    /// Metric columns to compare; all of them when omitted.
    #[arg(long, num_args = 1..)]
    metrics: Vec<String>,
    #[arg(long, default_value = "vice-out")]
    out: PathBuf,
    /// Spearman p-value from seeded shuffles instead of the t approximation.
    #[arg(long)]
    permutation_p: bool,
    #[arg(long)]
    shuffles: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Compare raw values in Bland–Altman instead of min–max rescaled ones.
    #[arg(long)]
    no_rescale: bool,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Args)]
struct CheckArgs {
    #[command(flatten)]
    backends: BackendFlags,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    backends: BackendsSection,
    pipeline: PipelineSection,
    stats: StatsSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BackendsSection {
    reasoning_url: Option<String>,
    reasoning_model: Option<String>,
    vision_url: Option<String>,
    reasoning_script: Option<PathBuf>,
    vision_script: Option<PathBuf>,
    timeout_ms: Option<u64>,
    max_retries: Option<u32>,
    backoff_base_ms: Option<u64>,
    record_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PipelineSection {
    variant: Option<String>,
    n_blind: Option<u32>,
    n_refine_per_round: Option<u32>,
    max_refine_rounds: Option<u32>,
    use_caption: Option<bool>,
    temperature: Option<f64>,
    seed: Option<u64>,
    repair_retries: Option<u32>,
    ite_refinement: Option<bool>,
    workers: Option<usize>,
    templates_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct StatsSection {
    rescale: Option<bool>,
    rescale_range: Option<[f64; 2]>,
    permutation: Option<bool>,
    shuffles: Option<usize>,
    seed: Option<u64>,
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut cfg: FileConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let b = &mut cfg.backends;
    let paths = [&mut b.reasoning_script, &mut b.vision_script, &mut b.record_dir, &mut cfg.pipeline.templates_dir];
    for p in paths.into_iter().flatten() {
        if p.is_relative() && p.as_os_str() != "echo" {
            *p = base.join(&*p);
        }
    }
    Ok(cfg)
}

/// Backend settings after precedence is applied.
#[derive(Debug)]
struct BackendSettings {
    reasoning_url: Option<String>,
    reasoning_model: String,
    vision_url: Option<String>,
    reasoning_script: Option<PathBuf>,
    vision_script: Option<PathBuf>,
    api_key: Option<String>,
    policy: BackendPolicy,
    record_dir: Option<PathBuf>,
}

fn resolve_backends(flags: &BackendFlags, file: &BackendsSection, env: &BTreeMap<String, String>) -> BackendSettings {
    let env_var = |k: &str| env.get(k).filter(|v| !v.trim().is_empty()).cloned();
    let mut policy = BackendPolicy::default();
    if let Some(t) = flags.timeout_ms.or(file.timeout_ms) {
        policy.timeout_ms = t;
    }
    if let Some(r) = flags.max_retries.or(file.max_retries) {
        policy.max_retries = r;
    }
    if let Some(b) = file.backoff_base_ms {
        policy.backoff_base_ms = b;
    }
    BackendSettings {
        reasoning_url: flags.reasoning_url.clone().or(file.reasoning_url.clone()).or_else(|| env_var(ENV_REASONING_URL)),
        reasoning_model: flags
            .reasoning_model
            .clone()
            .or(file.reasoning_model.clone())
            .unwrap_or_else(|| DEFAULT_MODEL.to_string()),
        vision_url: flags.vision_url.clone().or(file.vision_url.clone()).or_else(|| env_var(ENV_VISION_URL)),
        reasoning_script: flags.reasoning_script.clone().or(file.reasoning_script.clone()),
        vision_script: flags.vision_script.clone().or(file.vision_script.clone()),
        api_key: env_var(ENV_API_KEY),
        policy,
        record_dir: flags.record_dir.clone().or(file.record_dir.clone()),
    }
}

enum ReasoningSource {
    Script(PathBuf),
    Url(String),
}

enum VisionSource {
    Echo,
    Script(PathBuf),
    Url(String),
}

impl BackendSettings {
    fn reasoning_source(&self) -> Result<ReasoningSource> {
        match (&self.reasoning_script, &self.reasoning_url) {
            (Some(p), _) => Ok(ReasoningSource::Script(p.clone())),
            (None, Some(u)) => Ok(ReasoningSource::Url(u.clone())),
            (None, None) => bail!(
                "no reasoning backend configured: pass --reasoning-url or --reasoning-script, \
                 set [backends].reasoning_url, or set {ENV_REASONING_URL}"
            ),
        }
    }

    fn vision_source(&self) -> Result<VisionSource> {
        match (&self.vision_script, &self.vision_url) {
            (Some(p), _) if p.as_os_str() == "echo" => Ok(VisionSource::Echo),
            (Some(p), _) => Ok(VisionSource::Script(p.clone())),
            (None, Some(u)) => Ok(VisionSource::Url(u.clone())),
            (None, None) => bail!(
                "no vision backend configured: pass --vision-url or --vision-script, \
                 set [backends].vision_url, or set {ENV_VISION_URL}"
            ),
        }
    }
}

fn load_vision_script(path: &Path) -> Result<Arc<dyn VisionBackend>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let label = path.display().to_string();
    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {label}"))?;
    Ok(if value.is_array() {
        Arc::new(ScriptedBackend::parse(&text, &label)?)
    } else {
        Arc::new(VisionFixture::parse(&text, &label)?)
    })
}

/// Live backends wrapped for recording, kept so the cassettes can be saved.
#[derive(Default)]
struct Recordings {
    dir: Option<PathBuf>,
    reasoning: Option<Arc<Recorder<dyn ReasoningBackend>>>,
    vision: Option<Arc<Recorder<dyn VisionBackend>>>,
}

impl Recordings {
    fn save(&self) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        if let Some(r) = &self.reasoning {
            write_atomic(&dir.join("reasoning.json"), r.to_json().as_bytes())?;
        }
        if let Some(v) = &self.vision {
            write_atomic(&dir.join("vision.json"), v.to_json().as_bytes())?;
        }
        Ok(())
    }
}

fn build_backends(s: &BackendSettings, templates: Option<&Path>) -> Result<(Backends, Recordings)> {
    let mut rec = Recordings { dir: s.record_dir.clone(), ..Default::default() };
    let reasoning: Arc<dyn ReasoningBackend> = match s.reasoning_source()? {
        ReasoningSource::Script(p) => Arc::new(ScriptedBackend::load(&p)?),
        ReasoningSource::Url(u) => {
            let live: Arc<dyn ReasoningBackend> = Arc::new(HttpReasoner::new(u, &s.reasoning_model, s.api_key.clone()));
            if s.record_dir.is_some() {
                let r = Arc::new(Recorder::new(live));
                rec.reasoning = Some(r.clone());
                r
            } else {
                live
            }
        }
    };
    let vision: Arc<dyn VisionBackend> = match s.vision_source()? {
        VisionSource::Echo => Arc::new(EchoVision),
        VisionSource::Script(p) => load_vision_script(&p)?,
        VisionSource::Url(u) => {
            let live: Arc<dyn VisionBackend> = Arc::new(HttpVision::new(u, s.api_key.clone()));
            if s.record_dir.is_some() {
                let r = Arc::new(Recorder::new(live));
                rec.vision = Some(r.clone());
                r
            } else {
                live
            }
        }
    };
    s.policy.check()?;
    let mut backends = Backends::new(reasoning, vision).with_policy(s.policy.clone());
    if let Some(dir) = templates {
        backends = backends.with_templates(TemplateSet::load_dir(dir)?);
    }
    Ok((backends, rec))
}

fn pipeline_config(flags: &PipelineFlags, file: &PipelineSection) -> Result<PipelineConfig> {
    let name = flags.variant.as_deref().or(file.variant.as_deref()).unwrap_or("vice");
    let Some(variant) = Variant::parse(name) else {
        bail!("unknown --variant {name:?}: expected vice, vice5 or viceblind")
    };
    let preset = PipelineConfig::preset(variant);
    let mut cfg = preset.clone();
    cfg.n_blind = file.n_blind.unwrap_or(cfg.n_blind);
    cfg.n_refine_per_round = file.n_refine_per_round.unwrap_or(cfg.n_refine_per_round);
    cfg.max_refine_rounds = file.max_refine_rounds.unwrap_or(cfg.max_refine_rounds);
    cfg.use_caption = file.use_caption.unwrap_or(cfg.use_caption);
    cfg.temperature = file.temperature.unwrap_or(cfg.temperature);
    cfg.repair_retries = file.repair_retries.unwrap_or(cfg.repair_retries);
    cfg.ite_refinement = file.ite_refinement.unwrap_or(cfg.ite_refinement);
    if (cfg.n_blind, cfg.n_refine_per_round, cfg.max_refine_rounds, cfg.use_caption)
        != (preset.n_blind, preset.n_refine_per_round, preset.max_refine_rounds, preset.use_caption)
    {
        cfg.variant = Variant::Custom;
    }
    cfg.seed = flags.seed.or(file.seed).unwrap_or(cfg.seed);
    let problems = cfg.violations();
    if !problems.is_empty() {
        bail!("invalid pipeline configuration: {}", problems.join("; "));
    }
    Ok(cfg)
}

/// Writes through a sibling temp file and a rename so readers never see a
/// partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn existing_image(flag: &str, path: &Path) -> Result<ImageRef> {
    let image = ImageRef::new(path.to_string_lossy());
    if let Err(e) = image.check_resolvable() {
        bail!("{flag}: {e}");
    }
    Ok(image)
}

fn cmd_evaluate(a: EvaluateArgs, file: FileConfig, env: &BTreeMap<String, String>, out: &mut dyn Write) -> Result<i32> {
    let jobs = match (&a.manifest, &a.prompt, &a.image) {
        (Some(m), _, _) => load_manifest(m)?,
        (None, Some(text), Some(image)) => vec![Job {
            prompt: PromptSpec::generation(&a.prompt_id, text),
            image: existing_image("--image", image)?,
        }],
        (None, None, Some(_)) => bail!("--image needs --prompt <text>"),
        (None, _, None) => bail!("nothing to evaluate: pass --image <file> with --prompt <text>, or --manifest <file>"),
    };
    if jobs.is_empty() {
        bail!("manifest has no jobs");
    }
    let cfg = pipeline_config(&a.pipeline, &file.pipeline)?;
    let workers = a.pipeline.workers.or(file.pipeline.workers).unwrap_or_else(exec::default_workers);
    if workers == 0 {
        bail!("--workers must be at least 1");
    }
    let settings = resolve_backends(&a.backends, &file.backends, env);
    let (backends, recordings) = build_backends(&settings, file.pipeline.templates_dir.as_deref())?;

    let mut transcripts = batch_evaluate(&jobs, &cfg, &backends, workers)?;
    if a.pipeline.canonical {
        transcripts.iter_mut().for_each(|t| t.canonicalize());
    }
    let mut jsonl = String::new();
    for t in &transcripts {
        jsonl.push_str(&serde_json::to_string(t)?);
        jsonl.push('\n');
    }
    write_atomic(&a.out.join("transcripts.jsonl"), jsonl.as_bytes())?;
    recordings.save()?;
    out.write_all(report::summary_table(&transcripts).as_bytes())?;
    let failed = transcripts.iter().filter(|t| t.is_failed()).count();
    writeln!(out, "{} job(s), {} failed; transcripts in {}", transcripts.len(), failed, a.out.join("transcripts.jsonl").display())?;
    Ok(if failed > 0 { 2 } else { 0 })
}

fn cmd_ite(a: IteArgs, file: FileConfig, env: &BTreeMap<String, String>, out: &mut dyn Write) -> Result<i32> {
    let input = existing_image("--input-image", &a.input_image)?;
    let edited = existing_image("--edited-image", &a.edited_image)?;
    if a.instruction.trim().is_empty() {
        bail!("--instruction is empty");
    }
    let cfg = pipeline_config(&a.pipeline, &file.pipeline)?;
    let settings = resolve_backends(&a.backends, &file.backends, env);
    let (backends, recordings) = build_backends(&settings, file.pipeline.templates_dir.as_deref())?;
    let prompt = PromptSpec::edit(&a.id, &a.instruction, input.clone());
    let result = evaluate_edit(&prompt, &input, &edited, &cfg, &backends);
    recordings.save()?;
    match result {
        Ok(mut r) => {
            if a.pipeline.canonical {
                r.canonicalize();
            }
            let path = a.out.join("ite_report.json");
            write_atomic(&path, (serde_json::to_string_pretty(&r)? + "\n").as_bytes())?;
            writeln!(out, "remain violations: {}", r.remain_violations.len())?;
            writeln!(out, "removal failures: {}", r.removal_failures.len())?;
            writeln!(out, "addition failures: {}", r.addition_failures.len())?;
            writeln!(out, "score: {:.1}", r.score.value)?;
            writeln!(out, "report: {}", path.display())?;
            Ok(0)
        }
        Err(f) => {
            let mut partial = *f.partial;
            if a.pipeline.canonical {
                partial.canonicalize();
            }
            let path = a.out.join("ite_failure.json");
            write_atomic(&path, (serde_json::to_string_pretty(&partial)? + "\n").as_bytes())?;
            writeln!(out, "edit evaluation failed at {}: {}", f.stage, f.message)?;
            writeln!(out, "partial transcript: {}", path.display())?;
            Ok(2)
        }
    }
}

fn file_safe(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn cmd_correlate(a: CorrelateArgs, file: FileConfig, out: &mut dyn Write) -> Result<i32> {
    let table = ScoreTable::load(&a.scores)?;
    let metrics: Vec<String> =
        if a.metrics.is_empty() { table.metric_names().into_iter().map(String::from).collect() } else { a.metrics.clone() };
    if metrics.is_empty() {
        bail!("{} has no metric columns", a.scores.display());
    }
    let s = &file.stats;
    let rescale = !a.no_rescale && s.rescale.unwrap_or(true);
    let [lo, hi] = s.rescale_range.unwrap_or([0.0, 10.0]);
    let opts = AgreementOptions {
        rescale: rescale.then_some((lo, hi)),
        permutation: (a.permutation_p || s.permutation.unwrap_or(false))
            .then(|| (a.shuffles.or(s.shuffles).unwrap_or(10_000), a.seed.or(s.seed).unwrap_or(0))),
        workers: a.workers.unwrap_or_else(exec::default_workers).max(1),
    };
    let mut reports = Vec::new();
    for m in &metrics {
        let paired = table.paired(m)?;
        reports.push(agreement(&paired, &opts).with_context(|| format!("metric {m:?}"))?);
    }
    let md = report::correlation_table(&reports);
    write_atomic(&a.out.join("table.md"), md.as_bytes())?;
    write_atomic(&a.out.join("agreement.json"), (serde_json::to_string_pretty(&reports)? + "\n").as_bytes())?;
    for r in &reports {
        let svg = report::bland_altman_svg(&r.metric, &r.bland_altman);
        write_atomic(&a.out.join(format!("ba_{}.svg", file_safe(&r.metric))), svg.as_bytes())?;
    }
    out.write_all(md.as_bytes())?;
    Ok(0)
}

fn probe_line(
    out: &mut dyn Write,
    role: &str,
    target: &str,
    probe: impl FnOnce() -> Result<(), BackendError>,
) -> Result<bool> {
    let start = Instant::now();
    let result = probe();
    let ms = start.elapsed().as_millis();
    match &result {
        Ok(()) => writeln!(out, "{role:<9}  {target}  {ms}ms  ok")?,
        Err(BackendError::Timeout(budget)) => {
            writeln!(out, "{role:<9}  {target}  {ms}ms  FAIL: latency budget exceeded ({budget} ms)")?
        }
        Err(e) => writeln!(out, "{role:<9}  {target}  {ms}ms  FAIL: {e}")?,
    }
    Ok(result.is_ok())
}

fn cmd_check(a: CheckArgs, file: FileConfig, env: &BTreeMap<String, String>, out: &mut dyn Write) -> Result<i32> {
    let s = resolve_backends(&a.backends, &file.backends, env);
    let mut all_ok = true;
    match s.reasoning_source() {
        Ok(ReasoningSource::Script(p)) => {
            let b = ScriptedBackend::load(&p)?;
            all_ok &= probe_line(out, "reasoning", &format!("script:{}", p.display()), || {
                ReasoningBackend::probe(&b, &s.policy)
            })?;
        }
        Ok(ReasoningSource::Url(u)) => {
            let b = HttpReasoner::new(&u, &s.reasoning_model, s.api_key.clone());
            all_ok &= probe_line(out, "reasoning", &u, || b.probe(&s.policy))?;
        }
        Err(e) => {
            writeln!(out, "reasoning  -  FAIL: {e}")?;
            all_ok = false;
        }
    }
    match s.vision_source() {
        Ok(VisionSource::Echo) => {
            all_ok &= probe_line(out, "vision", "echo", || EchoVision.probe(&s.policy))?;
        }
        Ok(VisionSource::Script(p)) => {
            let b = load_vision_script(&p)?;
            all_ok &= probe_line(out, "vision", &format!("script:{}", p.display()), || b.probe(&s.policy))?;
        }
        Ok(VisionSource::Url(u)) => {
            let b = HttpVision::new(&u, s.api_key.clone());
            all_ok &= probe_line(out, "vision", &u, || b.probe(&s.policy))?;
        }
        Err(e) => {
            writeln!(out, "vision     -  FAIL: {e}")?;
            all_ok = false;
        }
    }
    Ok(if all_ok { 0 } else { 1 })
}

/// Runs the command line with an explicit environment and output streams.
pub fn run_with<I, T>(args: I, env: &BTreeMap<String, String>, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    0
                }
                _ => {
                    let _ = write!(err, "{e}");
                    1
                }
            };
            return code;
        }
    };
    let result = load_config(cli.config.as_deref()).and_then(|file| match cli.command {
        Command::Evaluate(a) => cmd_evaluate(a, file, env, out),
        Command::Ite(a) => cmd_ite(a, file, env, out),
        Command::Correlate(a) => cmd_correlate(a, file, out),
        Command::CheckBackends(a) => cmd_check(a, file, env, out),
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            1
        }
    }
}

/// Runs the command line against the process arguments and environment.
pub fn run() -> i32 {
    let env: BTreeMap<String, String> = std::env::vars().collect();
    run_with(std::env::args_os(), &env, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str], env: &[(&str, &str)]) -> (i32, String, String) {
        let env = env.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run_with(std::iter::once("vice").chain(args.iter().copied()), &env, &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn missing_inputs_name_both_flags() {
        let (code, _, err) = run(&["evaluate", "--prompt", "a cat"], &[]);
        assert_eq!(code, 1);
        assert!(err.contains("--image") && err.contains("--manifest"), "{err}");
    }

    #[test]
    fn bad_flags_exit_one() {
        assert_eq!(run(&["evaluate", "--bogus"], &[]).0, 1);
        assert_eq!(run(&[], &[]).0, 1);
        assert_eq!(run(&["--help"], &[]).0, 0);
    }

    #[test]
    fn unknown_variant() {
        let flags = PipelineFlags { variant: Some("vice7".into()), seed: None, workers: None, canonical: false };
        let e = pipeline_config(&flags, &PipelineSection::default()).unwrap_err();
        assert!(e.to_string().contains("vice7"));
    }

    #[test]
    fn precedence_is_flags_then_file_then_env() {
        let env: BTreeMap<String, String> = [(ENV_VISION_URL.to_string(), "http://env".to_string())].into();
        let file = BackendsSection { vision_url: Some("http://file".into()), ..Default::default() };
        let mut flags = BackendFlags::default();
        assert_eq!(resolve_backends(&flags, &BackendsSection::default(), &env).vision_url.as_deref(), Some("http://env"));
        assert_eq!(resolve_backends(&flags, &file, &env).vision_url.as_deref(), Some("http://file"));
        flags.vision_url = Some("http://flag".into());
        assert_eq!(resolve_backends(&flags, &file, &env).vision_url.as_deref(), Some("http://flag"));
    }

    #[test]
    fn overrides_make_a_custom_variant() {
        let flags = PipelineFlags { variant: Some("vice".into()), seed: Some(9), workers: None, canonical: false };
        let file = PipelineSection { n_blind: Some(10), ..Default::default() };
        let cfg = pipeline_config(&flags, &file).unwrap();
        assert_eq!((cfg.variant, cfg.n_blind, cfg.seed), (Variant::Custom, 10, 9));
    }

    #[test]
    fn check_names_missing_vision_url() {
        let (code, out, _) = run(&["check-backends", "--reasoning-url", "http://127.0.0.1:9"], &[]);
        assert_eq!(code, 1);
        assert!(out.contains(ENV_VISION_URL), "{out}");
    }
}
