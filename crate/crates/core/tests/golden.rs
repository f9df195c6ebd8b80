mod common;

use common::{check_golden, image, jsonl, prompt, scenario_backends, SCENARIOS, VARIANTS};
use vice_core::model::{validate_transcript, QuestionKind, Status};
use vice_core::pipeline::{evaluate, preset};

#[test]
fn scripted_fixtures_match_goldens() {
    let mut failures = Vec::new();
    for s in &SCENARIOS {
        for (variant, label) in VARIANTS {
            let cfg = preset(variant);
            let (backends, _) = scenario_backends(s, label);
            let t = evaluate(&prompt(s), &image(s.image), &cfg, &backends)
                .unwrap_or_else(|f| panic!("{}.{label}: {f}", s.name));
            assert_eq!(t.status, Status::Ok);
            assert!(validate_transcript(&t, &cfg).is_empty(), "{:?}", validate_transcript(&t, &cfg));
            assert_eq!(t.score.as_ref().unwrap().value, s.score, "{}.{label}", s.name);
            if let Err(e) = check_golden(&format!("{}.{label}.jsonl", s.name), &jsonl(&[t])) {
                failures.push(e);
            }
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn variant_shapes() {
    for s in &SCENARIOS {
        for (variant, label) in VARIANTS {
            let (backends, _) = scenario_backends(s, label);
            let t = evaluate(&prompt(s), &image(s.image), &preset(variant), &backends).unwrap();
            let blind = t.rounds[0].questions.len();
            assert!(t.rounds[0].questions.iter().all(|q| q.kind == QuestionKind::Blind));
            match label {
                "vice5" => assert_eq!((blind, t.refinement_rounds()), (5, 0)),
                "viceblind" => assert_eq!((blind, t.refinement_rounds()), (15, 0)),
                _ => {
                    assert_eq!(blind, 15);
                    assert!(t.refinement_rounds() >= 1);
                    assert!(t.rounds[1..].iter().flat_map(|r| &r.questions).all(|q| q.kind == QuestionKind::Refinement));
                }
            }
        }
    }
}

#[test]
fn reruns_are_byte_identical() {
    let s = &SCENARIOS[2];
    let run = || {
        let (backends, _) = scenario_backends(s, "vice");
        jsonl(&[evaluate(&prompt(s), &image(s.image), &preset(vice_core::model::Variant::Vice), &backends).unwrap()])
    };
    assert_eq!(run(), run());
}
