mod common;

use std::sync::Arc;

use common::{image, scripted, vision_fixture};
use vice_core::backend::{vision_digest, Backends, CallKind, CallLog, ScriptedBackend};
use vice_core::ite::{evaluate_edit, ITEReport};
use vice_core::model::{validate_transcript, PromptSpec, Variant};
use vice_core::pipeline::preset;

const INSTRUCTION: &str = "change the color of the motorbike to green";

fn run(input: &str, edited: &str, backends: &Backends) -> ITEReport {
    let prompt = PromptSpec::edit("motorbike", INSTRUCTION, image(input));
    evaluate_edit(&prompt, &image(input), &image(edited), &preset(Variant::Vice), backends).unwrap()
}

#[test]
fn faithful_edit() {
    let r = run("motorbike-red", "motorbike-green", &scripted("motorbike.ite"));
    assert!(r.remain_violations.is_empty());
    assert!(r.removal_failures.is_empty() && r.addition_failures.is_empty());
    assert!(r.edit_successful());
    assert_eq!(r.score.value, 9.0);
    assert_eq!(r.partition.remain.len(), 3);
    assert_eq!(r.input_transcript.caption.as_deref(), Some("a red motorbike parked on a street"));
    let cfg = preset(Variant::Vice);
    assert!(validate_transcript(&r.input_transcript, &cfg).is_empty(), "{:?}", validate_transcript(&r.input_transcript, &cfg));
    assert!(validate_transcript(&r.edited_transcript, &cfg).is_empty(), "{:?}", validate_transcript(&r.edited_transcript, &cfg));
}

#[test]
fn report_matches_golden() {
    let mut r = run("motorbike-red", "motorbike-green", &scripted("motorbike.ite"));
    r.canonicalize();
    let json = serde_json::to_string_pretty(&r).unwrap() + "\n";
    common::check_golden("motorbike.ite.json", &json).unwrap();
}

#[test]
fn swapping_the_images_reverses_the_verdict() {
    let r = run("motorbike-green", "motorbike-red", &scripted("motorbike.ite"));
    assert_eq!(r.removal_failures, ["remove-1"]);
    assert_eq!(r.addition_failures, ["add-1"]);
    assert!(r.remain_violations.is_empty());
    assert!(!r.edit_successful());
}

#[test]
fn same_questions_go_to_both_images() {
    let log = CallLog::new();
    let r = run("motorbike-red", "motorbike-green", &scripted("motorbike.ite").with_log(log.clone()));
    let vqa: Vec<_> = log.records().into_iter().filter(|c| c.kind == CallKind::Vqa).collect();
    assert_eq!(vqa.len(), 2);
    assert_eq!(vqa[0].questions, vqa[1].questions);
    assert_ne!(vqa[0].image, vqa[1].image);
    let ids = |t: &vice_core::model::Transcript| t.rounds[0].questions.iter().map(|q| q.id.clone()).collect::<Vec<_>>();
    assert_eq!(ids(&r.input_transcript), ids(&r.edited_transcript));

    // A strict vision script keyed on (image, questions) accepts the run only
    // if both images received exactly the same question list.
    let questions: Vec<String> = vqa[0].questions.clone();
    let fixture = vision_fixture();
    let answer = |name: &str| {
        use vice_core::backend::{BackendPolicy, VisionBackend};
        serde_json::to_string(&fixture.answer(&image(name), &questions, &BackendPolicy::default()).unwrap()).unwrap()
    };
    let caption = |name: &str| {
        use vice_core::backend::{BackendPolicy, VisionBackend};
        fixture.caption(&image(name), &BackendPolicy::default()).unwrap()
    };
    let strict = ScriptedBackend::strict([
        (vision_digest(&image("motorbike-red"), &[]), caption("motorbike-red")),
        (vision_digest(&image("motorbike-red"), &questions), answer("motorbike-red")),
        (vision_digest(&image("motorbike-green"), &questions), answer("motorbike-green")),
    ]);
    let reasoning = ScriptedBackend::load(&common::script("motorbike.ite")).unwrap();
    let strict_run = run("motorbike-red", "motorbike-green", &Backends::new(Arc::new(reasoning), Arc::new(strict)));
    assert!(strict_run.edit_successful());
}

#[test]
fn missing_edited_image_is_an_input_failure() {
    let prompt = PromptSpec::edit("m", INSTRUCTION, image("motorbike-red"));
    let f = evaluate_edit(
        &prompt,
        &image("motorbike-red"),
        &vice_core::model::ImageRef::new("tests/fixtures/images/none.png"),
        &preset(Variant::Vice),
        &scripted("motorbike.ite"),
    )
    .unwrap_err();
    assert_eq!(f.stage, "input");
}
