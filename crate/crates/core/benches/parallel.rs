//! Sequential (one worker) against parallel batch evaluation and
//! permutation testing. Build with `--no-default-features` to compare the
//! sequential fallback of the whole crate.

use std::sync::Arc;
use std::thread::sleep;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use vice_core::backend::{BackendError, BackendPolicy, Backends, ChatMessage, EchoVision, ReasoningBackend};
use vice_core::model::{ImageRef, PromptSpec, Variant};
use vice_core::pipeline::{batch_evaluate, preset, Job};
use vice_core::stats::permutation_p;

/// Answers each pipeline request from its template wording, after a fixed
/// delay that stands in for network latency.
struct SlowReasoner(Duration);

impl ReasoningBackend for SlowReasoner {
    fn chat(&self, messages: &[ChatMessage], _policy: &BackendPolicy) -> Result<String, BackendError> {
        sleep(self.0);
        let last = &messages.last().expect("non-empty").content;
        let reply = if last.contains("turn your expectations into a list") {
            r#"[{"text": "lamp", "category": "Object", "origin": "Explicit", "span": "lamp"}]"#.to_string()
        } else if let Some(at) = last.find("Write exactly") {
            let n: usize = last[at + 13..].split_whitespace().next().and_then(|w| w.parse().ok()).unwrap_or(1);
            let qs: Vec<_> = (1..=n).map(|i| serde_json::json!({"text": format!("Is detail {i} present?")})).collect();
            serde_json::Value::Array(qs).to_string()
        } else if last.contains("SCORE:") {
            "SCORE: 7".to_string()
        } else {
            "A lamp on a desk.".to_string()
        };
        Ok(reply)
    }

    fn model_name(&self) -> String {
        "slow-reasoner".into()
    }
}

fn batch(c: &mut Criterion) {
    let image = ImageRef::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/images/apple-table.png"));
    let jobs: Vec<Job> = (0..32)
        .map(|i| Job { prompt: PromptSpec::generation(format!("job-{i}"), "a lamp on a desk"), image: image.clone() })
        .collect();
    let backends = Backends::new(Arc::new(SlowReasoner(Duration::from_micros(500))), Arc::new(EchoVision));
    let cfg = preset(Variant::Vice5);
    let mut group = c.benchmark_group("batch_evaluate");
    group.sample_size(10);
    for workers in [1, 8] {
        group.bench_with_input(BenchmarkId::from_parameter(workers), &workers, |b, &w| {
            b.iter(|| batch_evaluate(&jobs, &cfg, &backends, w).unwrap())
        });
    }
    group.finish();
}

fn permutation(c: &mut Criterion) {
    let x: Vec<f64> = (0..200).map(|i| ((i * 37) % 101) as f64).collect();
    let y: Vec<f64> = (0..200).map(|i| ((i * 53) % 97) as f64 + i as f64 * 0.1).collect();
    let mut group = c.benchmark_group("permutation_p");
    group.sample_size(10);
    for workers in [1, 4] {
        group.bench_with_input(BenchmarkId::from_parameter(workers), &workers, |b, &w| {
            b.iter(|| permutation_p(&x, &y, 2000, 42, w).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, batch, permutation);
criterion_main!(benches);
