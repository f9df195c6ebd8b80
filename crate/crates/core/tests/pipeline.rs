mod common;

use std::sync::Arc;

use common::{batch_jobs, image, prompt, record_cassettes, scenario_backends, scripted, RuleReasoner, SCENARIOS};
use vice_core::backend::{Backends, CallKind, CallLog, EchoVision, ScriptedBackend};
use vice_core::model::{validate_transcript, Decision, ImageRef, PromptSpec, Status, Variant};
use vice_core::pipeline::{batch_evaluate, evaluate, load_manifest, preset, Job};
use vice_core::report::summary_table;

#[test]
fn stage_order() {
    let (backends, log) = scenario_backends(&SCENARIOS[2], "vice");
    evaluate(&prompt(&SCENARIOS[2]), &image("cat-stairs"), &preset(Variant::Vice), &backends).unwrap();
    assert_eq!(
        log.stages(),
        [
            "caption",
            "concepts/expect",
            "concepts/list",
            "blind",
            "vqa/round-0",
            "decide/round-1",
            "refine/round-1",
            "vqa/round-1",
            "decide/round-2",
            "score"
        ]
    );
}

#[test]
fn no_vision_call_before_blind_questions_without_caption() {
    let mut cfg = preset(Variant::Vice5);
    cfg.use_caption = false;
    let log = CallLog::new();
    let backends = Backends::new(Arc::new(RuleReasoner { always_refine: false }), Arc::new(EchoVision)).with_log(log.clone());
    let t = evaluate(&PromptSpec::generation("p", "a lamp"), &image("apple-table"), &cfg, &backends).unwrap();
    assert!(t.caption.is_none());
    let records = log.records();
    let blind = records.iter().position(|r| r.stage == "blind").unwrap();
    assert!(records[..blind].iter().all(|r| r.kind == CallKind::Reasoning));
    assert!(records.iter().all(|r| r.kind != CallKind::Caption));
}

#[test]
fn endless_refinement_requests_are_capped() {
    let log = CallLog::new();
    let backends = Backends::new(Arc::new(RuleReasoner { always_refine: true }), Arc::new(EchoVision)).with_log(log.clone());
    let cfg = preset(Variant::Vice);
    let t = evaluate(&PromptSpec::generation("p", "a lamp"), &image("apple-table"), &cfg, &backends).unwrap();
    assert_eq!(t.rounds.len() as u32, cfg.max_refine_rounds + 1);
    assert_eq!(t.rounds.last().unwrap().decision_after, Decision::Stop);
    assert!(t.rounds[..3].iter().all(|r| r.decision_after == Decision::Refine));
    let decides = log.stages().iter().filter(|s| s.starts_with("decide/")).count();
    assert_eq!(decides as u32, cfg.max_refine_rounds);
    assert!(validate_transcript(&t, &cfg).is_empty());
}

#[test]
fn vision_failure_keeps_the_partial_transcript() {
    let mut cfg = preset(Variant::Vice5);
    cfg.use_caption = false;
    let reasoning = ScriptedBackend::load(&common::script("cat-stairs.vice5")).unwrap();
    let backends = Backends::new(Arc::new(reasoning), Arc::new(ScriptedBackend::strict(Vec::new())));
    let f = evaluate(&prompt(&SCENARIOS[2]), &image("cat-stairs"), &cfg, &backends).unwrap_err();
    assert_eq!(f.stage, "vqa/round-0");
    let t = *f.partial;
    assert_eq!(t.status, Status::Failed);
    assert_eq!(t.concepts.len(), 4);
    assert!(t.score.is_none());
    assert_eq!(t.failure.unwrap().stage, "vqa/round-0");
}

#[test]
fn unparseable_score_fails_the_score_stage() {
    let mut entries: Vec<String> = serde_json::from_str::<Vec<serde_json::Value>>(
        &std::fs::read_to_string(common::script("cat-stairs.vice5")).unwrap(),
    )
    .unwrap()
    .into_iter()
    .map(|e| e["reply"].as_str().unwrap().to_string())
    .collect();
    entries.pop();
    entries.push("The image is fine.".into());
    entries.push("I would rather not give a number.".into());
    let backends = Backends::new(Arc::new(ScriptedBackend::sequence(entries)), common::vision_fixture());
    let f = evaluate(&prompt(&SCENARIOS[2]), &image("cat-stairs"), &preset(Variant::Vice5), &backends).unwrap_err();
    assert_eq!(f.stage, "score");
    assert_eq!(f.partial.rounds.len(), 1);
}

#[test]
fn missing_image_fails_before_any_call() {
    let log = CallLog::new();
    let backends = scripted("cat-stairs.vice5").with_log(log.clone());
    let f = evaluate(&prompt(&SCENARIOS[2]), &ImageRef::new("tests/fixtures/images/nope.png"), &preset(Variant::Vice5), &backends)
        .unwrap_err();
    assert_eq!(f.stage, "input");
    assert!(log.records().is_empty());
}

#[test]
fn batch_is_deterministic_across_worker_counts() {
    let jobs = batch_jobs(100);
    let cfg = preset(Variant::Vice);
    let replay = record_cassettes(&jobs, &cfg);
    let one = batch_evaluate(&jobs, &cfg, &replay, 1).unwrap();
    let eight = batch_evaluate(&jobs, &cfg, &replay, 8).unwrap();
    assert_eq!(common::jsonl(&one), common::jsonl(&eight));
    assert_eq!(summary_table(&one), summary_table(&eight));
    assert!(one.iter().all(|t| t.status == Status::Ok && t.refinement_rounds() == 1));
    let ids: Vec<&str> = one.iter().map(|t| t.prompt.id.as_str()).collect();
    assert_eq!(ids, jobs.iter().map(|j| j.prompt.id.as_str()).collect::<Vec<_>>());
}

#[test]
fn one_failed_job_does_not_affect_the_others() {
    let mut jobs = batch_jobs(6);
    let cfg = preset(Variant::Vice5);
    let backends = record_cassettes(&jobs, &cfg);
    let clean = batch_evaluate(&jobs, &cfg, &backends, 4).unwrap();
    jobs[3].image = ImageRef::new("tests/fixtures/images/missing.png");
    let mixed = batch_evaluate(&jobs, &cfg, &backends, 4).unwrap();
    for (i, (a, b)) in clean.iter().zip(&mixed).enumerate() {
        if i == 3 {
            assert_eq!(b.status, Status::Failed);
        } else {
            assert_eq!(a.clone().canonicalized(), b.clone().canonicalized());
        }
    }
    assert!(summary_table(&mixed).lines().nth(4).unwrap().contains("failed (input)"));
}

#[test]
fn zero_workers_is_rejected() {
    let backends = scripted("cat-stairs.vice5");
    assert!(batch_evaluate(&[], &preset(Variant::Vice5), &backends, 0).is_err());
}

#[test]
fn manifest_fixture_loads() {
    let jobs: Vec<Job> = load_manifest(&common::fixtures().join("jobs.csv")).unwrap();
    assert_eq!(jobs.len(), 3);
    assert_eq!(jobs[2].prompt.text, "a cat on the stairs");
    jobs.iter().for_each(|j| j.image.check_resolvable().unwrap());
}
