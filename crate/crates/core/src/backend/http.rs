use std::time::Duration;

use serde_json::{json, Value};

use super::{with_retries, AttemptError, BackendError, BackendPolicy, ChatMessage, ReasoningBackend, VisionBackend};
use crate::model::ImageRef;

pub const ENV_REASONING_URL: &str = "VICE_REASONING_URL";
pub const ENV_VISION_URL: &str = "VICE_VISION_URL";
pub const ENV_API_KEY: &str = "VICE_API_KEY";

fn agent() -> ureq::Agent {
    ureq::AgentBuilder::new().build()
}

fn join(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path.trim_start_matches('/'))
}

fn is_timeout(err: &ureq::Transport) -> bool {
    use std::error::Error;
    let mut source = err.source();
    while let Some(s) = source {
        if let Some(io) = s.downcast_ref::<std::io::Error>() {
            if matches!(io.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock) {
                return true;
            }
        }
        source = s.source();
    }
    err.to_string().contains("timed out")
}

/// Sends one JSON request and classifies the outcome for the retry loop.
fn send(
    agent: &ureq::Agent,
    method: &str,
    url: &str,
    body: Option<&Value>,
    api_key: Option<&str>,
    policy: &BackendPolicy,
) -> Result<Value, AttemptError> {
    let mut req = agent
        .request(method, url)
        .timeout(Duration::from_millis(policy.timeout_ms));
    if let Some(key) = api_key {
        req = req.set("Authorization", &format!("Bearer {key}"));
    }
    let result = match body {
        Some(b) => req.send_json(b),
        None => req.call(),
    };
    match result {
        Ok(resp) => resp.into_json::<Value>().map_err(|e| {
            AttemptError::Fatal(BackendError::MalformedResponse(format!("{url}: body is not JSON: {e}")))
        }),
        Err(ureq::Error::Status(code, resp)) => {
            let text = resp.into_string().unwrap_or_default();
            let message = format!("{url}: HTTP {code}: {}", text.chars().take(200).collect::<String>());
            if code >= 500 || code == 429 {
                Err(AttemptError::Transient(message))
            } else {
                Err(AttemptError::Fatal(BackendError::TransportFailure { attempts: 1, message }))
            }
        }
        Err(ureq::Error::Transport(t)) => {
            if is_timeout(&t) {
                Err(AttemptError::Timeout(format!("{url}: {t}")))
            } else {
                Err(AttemptError::Transient(format!("{url}: {t}")))
            }
        }
    }
}

/// Chat-completion client: `POST {base}/v1/chat/completions`.
#[derive(Debug, Clone)]
pub struct HttpReasoner {
    base_url: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpReasoner {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key,
            agent: agent(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }
}

impl ReasoningBackend for HttpReasoner {
    fn chat(&self, messages: &[ChatMessage], policy: &BackendPolicy) -> Result<String, BackendError> {
        let url = join(&self.base_url, "v1/chat/completions");
        let body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": policy.temperature,
        });
        let value = with_retries(policy, &url, |_| {
            send(&self.agent, "POST", &url, Some(&body), self.api_key.as_deref(), policy)
        })?;
        value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::MalformedResponse("missing choices[0].message.content".into()))
    }

    fn model_name(&self) -> String {
        self.model.clone()
    }
}

/// Vision client: `POST {base}/caption`, `POST {base}/vqa`, `GET {base}/healthz`.
#[derive(Debug, Clone)]
pub struct HttpVision {
    base_url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpVision {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Self {
        Self { base_url: base_url.into(), api_key, agent: agent() }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn post(&self, path: &str, body: Value, policy: &BackendPolicy) -> Result<Value, BackendError> {
        let url = join(&self.base_url, path);
        with_retries(policy, &url, |_| {
            send(&self.agent, "POST", &url, Some(&body), self.api_key.as_deref(), policy)
        })
    }
}

impl VisionBackend for HttpVision {
    fn caption(&self, image: &ImageRef, policy: &BackendPolicy) -> Result<String, BackendError> {
        let wire = image.to_wire().map_err(BackendError::Precondition)?;
        let value = self.post("caption", json!({ "image": wire }), policy)?;
        value
            .get("caption")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::MalformedResponse("missing caption".into()))
    }

    fn answer(
        &self,
        image: &ImageRef,
        questions: &[String],
        policy: &BackendPolicy,
    ) -> Result<Vec<String>, BackendError> {
        let wire = image.to_wire().map_err(BackendError::Precondition)?;
        let value = self.post("vqa", json!({ "image": wire, "questions": questions }), policy)?;
        let answers = value
            .get("answers")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::MalformedResponse("missing answers array".into()))?;
        answers
            .iter()
            .map(|a| {
                a.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| BackendError::MalformedResponse("non-string answer".into()))
            })
            .collect()
    }

    fn model_name(&self) -> String {
        format!("http:{}", self.base_url)
    }

    fn probe(&self, policy: &BackendPolicy) -> Result<(), BackendError> {
        let url = join(&self.base_url, "healthz");
        let value = with_retries(policy, &url, |_| {
            send(&self.agent, "GET", &url, None, self.api_key.as_deref(), policy)
        })?;
        match value.get("status").and_then(Value::as_str) {
            Some("ok") => Ok(()),
            other => Err(BackendError::MalformedResponse(format!("health status {other:?}"))),
        }
    }
}
