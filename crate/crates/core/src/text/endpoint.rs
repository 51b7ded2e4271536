//! Language-model endpoint clients.
//!
//! The HTTP client sends `{"prompt": .., "max_tokens": .., "temperature": ..}`
//! with a bearer token and accepts either `{"text": ..}` or
//! `{"choices": [{"text": ..}]}` back. The offline corpus and replay clients
//! answer from local files so runs can be hermetic.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::describe::DescriptionRecord;
use crate::error::{Error, Result};

pub const ENDPOINT_ENV: &str = "XALIGN_LLM_ENDPOINT";
pub const API_KEY_ENV: &str = "XALIGN_LLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionRequest {
    pub category: String,
    pub template_id: u8,
    pub prompt: String,
}

pub trait EndpointClient: Send + Sync {
    /// Raw completion text for one prompt. `Err` carries a human-readable
    /// reason; retrying is the caller's concern.
    fn complete(&self, req: &CompletionRequest) -> std::result::Result<String, String>;

    /// Provenance tag written to description records.
    fn source(&self) -> &str;

    /// Requests served so far.
    fn request_count(&self) -> usize;
}

#[derive(Serialize)]
struct WireRequest<'a> {
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
}

#[derive(Deserialize)]
struct WireChoice {
    text: String,
}

#[derive(Deserialize)]
struct WireResponse {
    text: Option<String>,
    choices: Option<Vec<WireChoice>>,
}

/// Extracts the completion text from a response body.
pub fn parse_completion(body: &str) -> Result<String> {
    let wire: WireResponse = serde_json::from_str(body)?;
    wire.text
        .or_else(|| wire.choices.and_then(|c| c.into_iter().next()).map(|c| c.text))
        .ok_or_else(|| Error::InvalidArgument("response carries neither `text` nor `choices[0].text`".into()))
}

pub struct HttpClient {
    url: String,
    api_key: Option<String>,
    timeout: Duration,
    max_tokens: u32,
    requests: AtomicUsize,
}

impl HttpClient {
    pub fn new(url: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            url: url.into(),
            api_key,
            timeout: Duration::from_secs(60),
            max_tokens: 256,
            requests: AtomicUsize::new(0),
        }
    }

    /// Endpoint URL and key from `XALIGN_LLM_ENDPOINT` / `XALIGN_LLM_API_KEY`.
    pub fn from_env() -> Result<Self> {
        let url = std::env::var(ENDPOINT_ENV)
            .map_err(|_| Error::Config(format!("{ENDPOINT_ENV} is not set")))?;
        Ok(Self::new(url, std::env::var(API_KEY_ENV).ok()))
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

impl EndpointClient for HttpClient {
    fn complete(&self, req: &CompletionRequest) -> std::result::Result<String, String> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        let body = serde_json::to_string(&WireRequest {
            prompt: &req.prompt,
            max_tokens: self.max_tokens,
            temperature: 0.0,
        })
        .map_err(|e| e.to_string())?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut call = agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = call.send(body.as_bytes()).map_err(|e| e.to_string())?;
        let text = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        parse_completion(&text).map_err(|e| e.to_string())
    }

    fn source(&self) -> &str {
        "endpoint"
    }

    fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

/// Answers from a JSONL corpus in the descriptions schema, keyed by
/// (category, template id). The response is the record's sentences joined
/// by single spaces.
pub struct OfflineCorpus {
    responses: HashMap<(String, u8), String>,
    requests: AtomicUsize,
}

impl OfflineCorpus {
    pub fn from_records(records: impl IntoIterator<Item = DescriptionRecord>) -> Self {
        let responses = records
            .into_iter()
            .map(|r| ((r.category, r.template_id), r.sentences.join(" ")))
            .collect();
        Self {
            responses,
            requests: AtomicUsize::new(0),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_records(super::describe::read_records(path)?))
    }
}

impl EndpointClient for OfflineCorpus {
    fn complete(&self, req: &CompletionRequest) -> std::result::Result<String, String> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        self.responses
            .get(&(req.category.clone(), req.template_id))
            .cloned()
            .ok_or_else(|| format!("offline corpus has no entry for template {}", req.template_id))
    }

    fn source(&self) -> &str {
        "offline"
    }

    fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordedResponse {
    pub prompt: String,
    pub response: String,
}

/// Replays recorded prompt → response fixtures.
pub struct ReplayClient {
    responses: HashMap<String, String>,
    requests: AtomicUsize,
}

impl ReplayClient {
    pub fn new(recorded: impl IntoIterator<Item = RecordedResponse>) -> Self {
        Self {
            responses: recorded.into_iter().map(|r| (r.prompt, r.response)).collect(),
            requests: AtomicUsize::new(0),
        }
    }

    /// A JSON array of `{"prompt", "response"}` objects.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let recorded: Vec<RecordedResponse> = serde_json::from_str(&text)?;
        Ok(Self::new(recorded))
    }
}

impl EndpointClient for ReplayClient {
    fn complete(&self, req: &CompletionRequest) -> std::result::Result<String, String> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        self.responses
            .get(&req.prompt)
            .cloned()
            .ok_or_else(|| format!("no recorded response for prompt {:?}", req.prompt))
    }

    fn source(&self) -> &str {
        "replay"
    }

    fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}
