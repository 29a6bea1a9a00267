//! HTTP clients for the LLM selection backend and adapter-backed models.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use cohort_core::models::{AdapterEndpoint, ScoringTransport};
use cohort_core::policy::LlmBackend;
use cohort_core::PatientRecord;
use serde_json::{json, Value};

/// Counting semaphore bounding concurrent outbound requests.
pub struct InFlight {
    limit: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a>(&'a InFlight);

impl InFlight {
    pub fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            used: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().unwrap_or_else(|e| e.into_inner());
        while *used >= self.limit {
            used = self.freed.wait(used).unwrap_or_else(|e| e.into_inner());
        }
        *used += 1;
        Permit(self)
    }

    pub fn in_use(&self) -> usize {
        *self.used.lock().unwrap_or_else(|e| e.into_inner())
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut used = self.0.used.lock().unwrap_or_else(|e| e.into_inner());
        *used -= 1;
        self.0.freed.notify_one();
    }
}

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .build()
        .into()
}

/// Completion endpoint speaking `{"prompt": ...}` in and a text field out.
pub struct HttpLlm {
    url: String,
    agent: ureq::Agent,
    inflight: InFlight,
}

impl HttpLlm {
    pub fn new(url: impl Into<String>, timeout: Duration, max_inflight: usize) -> Self {
        Self {
            url: url.into(),
            agent: agent(timeout),
            inflight: InFlight::new(max_inflight),
        }
    }
}

/// Accepts `text`, `completion`, `response`, or the first choice of an
/// OpenAI-style body.
pub fn completion_text(body: &Value) -> Option<String> {
    for key in ["text", "completion", "response"] {
        if let Some(s) = body.get(key).and_then(Value::as_str) {
            return Some(s.to_string());
        }
    }
    let choice = body.get("choices")?.get(0)?;
    choice
        .get("text")
        .or_else(|| choice.get("message").and_then(|m| m.get("content")))
        .and_then(Value::as_str)
        .map(str::to_string)
}

impl LlmBackend for HttpLlm {
    fn complete(&self, prompt: &str) -> Result<String, String> {
        let _permit = self.inflight.acquire();
        let body: Value = self
            .agent
            .post(&self.url)
            .send_json(json!({ "prompt": prompt, "max_tokens": 16, "temperature": 0.0 }))
            .map_err(|e| e.to_string())?
            .into_body()
            .read_json()
            .map_err(|e| e.to_string())?;
        completion_text(&body).ok_or_else(|| "completion body has no text field".to_string())
    }
}

/// Posts the patient to the adapter and reads `{"probability": p}`.
pub struct HttpScoring {
    inflight: InFlight,
}

impl HttpScoring {
    pub fn new(max_inflight: usize) -> Self {
        Self {
            inflight: InFlight::new(max_inflight),
        }
    }
}

impl ScoringTransport for HttpScoring {
    fn score(&self, endpoint: &AdapterEndpoint, record: &PatientRecord) -> Result<f64, String> {
        let _permit = self.inflight.acquire();
        let body = json!({
            "patient_id": record.patient_id,
            "cohort": record.cohort,
            "metadata": record.metadata,
            "features": record.features.to_rows(),
            "timepoints": record.timepoints,
        });
        let reply: Value = agent(Duration::from_millis(endpoint.timeout_ms))
            .post(&endpoint.url)
            .send_json(body)
            .map_err(|e| e.to_string())?
            .into_body()
            .read_json()
            .map_err(|e| e.to_string())?;
        reply
            .get("probability")
            .and_then(Value::as_f64)
            .ok_or_else(|| "adapter reply has no numeric probability".to_string())
    }
}
