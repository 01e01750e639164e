//! OpenAI-compatible chat-completions client with retry and a persistent response cache.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::cache::{now_secs, CacheEntry, ResponseCache};
use super::{PredictRequest, Predictor};
use crate::error::{Error, Result};
use crate::types::{canonical_key, sha256_hex};

pub const API_KEY_ENV: &str = "DEMOVAL_API_KEY";
pub const API_BASE_ENV: &str = "DEMOVAL_API_BASE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmBackendSpec {
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_initial_backoff_ms")]
    pub initial_backoff_ms: u64,
    #[serde(default = "default_max_backoff_ms")]
    pub max_backoff_ms: u64,
    #[serde(default)]
    pub cache_path: Option<std::path::PathBuf>,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

fn default_max_tokens() -> u32 {
    8
}
fn default_timeout_secs() -> u64 {
    60
}
fn default_max_retries() -> u32 {
    5
}
fn default_initial_backoff_ms() -> u64 {
    500
}
fn default_max_backoff_ms() -> u64 {
    30_000
}
fn default_max_in_flight() -> usize {
    8
}

impl LlmBackendSpec {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            max_tokens: default_max_tokens(),
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            initial_backoff_ms: default_initial_backoff_ms(),
            max_backoff_ms: default_max_backoff_ms(),
            cache_path: None,
            max_in_flight: default_max_in_flight(),
        }
    }

    /// Decode parameters as they enter the cache key. Temperature is always 0.
    pub fn decode_params(&self) -> String {
        format!("temperature=0;max_tokens={}", self.max_tokens)
    }

    pub fn endpoint(&self) -> String {
        format!("{}/v1/chat/completions", self.base_url.trim_end_matches('/'))
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .initial_backoff_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.max_backoff_ms);
        Duration::from_millis(ms)
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f32,
    max_tokens: u32,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

/// Counting semaphore bounding in-flight requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

pub struct LlmClient {
    spec: LlmBackendSpec,
    api_key: Option<String>,
    agent: ureq::Agent,
    cache: Option<ResponseCache>,
    gate: Gate,
    network_calls: AtomicU64,
}

impl LlmClient {
    pub fn new(spec: LlmBackendSpec, api_key: Option<String>) -> Result<Self> {
        if spec.base_url.trim().is_empty() {
            return Err(Error::Config("LLM base_url is empty".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(spec.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let cache = spec.cache_path.as_ref().map(ResponseCache::open).transpose()?;
        Ok(Self {
            gate: Gate::new(spec.max_in_flight),
            spec,
            api_key,
            agent,
            cache,
            network_calls: AtomicU64::new(0),
        })
    }

    /// Reads the API key from `DEMOVAL_API_KEY`; `DEMOVAL_API_BASE`, when set, overrides the
    /// configured base URL.
    pub fn from_env(mut spec: LlmBackendSpec) -> Result<Self> {
        if let Ok(base) = std::env::var(API_BASE_ENV) {
            spec.base_url = base;
        }
        let key = std::env::var(API_KEY_ENV)
            .map_err(|_| Error::Config(format!("{API_KEY_ENV} is not set")))?;
        Self::new(spec, Some(key))
    }

    pub fn spec(&self) -> &LlmBackendSpec {
        &self.spec
    }

    pub fn cache(&self) -> Option<&ResponseCache> {
        self.cache.as_ref()
    }

    /// Number of HTTP requests actually sent (retries included).
    pub fn network_calls(&self) -> u64 {
        self.network_calls.load(Ordering::SeqCst)
    }

    /// Returns the first choice's message content, consulting the cache first.
    pub fn predict_text(&self, prompt: &str) -> Result<String> {
        if prompt.is_empty() {
            return Err(Error::Config("empty prompt".into()));
        }
        let key = canonical_key(prompt, &self.spec.model, &self.spec.decode_params());
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            return Ok(hit.response);
        }
        let response = self.request_with_retry(prompt)?;
        if let Some(cache) = &self.cache {
            cache.insert(CacheEntry {
                key,
                prompt_sha: sha256_hex(prompt.as_bytes()),
                model: self.spec.model.clone(),
                response: response.clone(),
                timestamp: now_secs(),
            })?;
        }
        Ok(response)
    }

    fn request_with_retry(&self, prompt: &str) -> Result<String> {
        let mut attempt = 0;
        loop {
            match self.request_once(prompt) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retryable(msg)) => {
                    if attempt >= self.spec.max_retries {
                        return Err(Error::Backend(format!(
                            "giving up after {} attempts: {msg}",
                            attempt + 1
                        )));
                    }
                    let wait = self.spec.backoff(attempt);
                    log::debug!("retrying in {wait:?} after: {msg}");
                    std::thread::sleep(wait);
                    attempt += 1;
                }
            }
        }
    }

    fn request_once(&self, prompt: &str) -> Result<String, Attempt> {
        let body = ChatRequest {
            model: &self.spec.model,
            messages: [ChatMessage {
                role: "user",
                content: prompt,
            }],
            temperature: 0.0,
            max_tokens: self.spec.max_tokens,
        };
        let _slot = self.gate.acquire();
        self.network_calls.fetch_add(1, Ordering::SeqCst);
        let mut req = self.agent.post(&self.spec.endpoint());
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let resp = match req.send_json(&body) {
            Ok(r) => r,
            Err(e) => return Err(Attempt::Retryable(format!("transport: {e}"))),
        };
        let status = resp.status().as_u16();
        let text = resp
            .into_body()
            .read_to_string()
            .map_err(|e| Attempt::Retryable(format!("reading body: {e}")))?;
        if status == 429 || (500..600).contains(&status) {
            return Err(Attempt::Retryable(format!("HTTP {status}")));
        }
        if !(200..300).contains(&status) {
            return Err(Attempt::Fatal(Error::Backend(format!("HTTP {status}: {text}"))));
        }
        let parsed: ChatResponse = serde_json::from_str(&text)
            .map_err(|e| Attempt::Fatal(Error::Protocol(format!("malformed response: {e}"))))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Attempt::Fatal(Error::Protocol("response has no message content".into())))
    }
}

enum Attempt {
    Retryable(String),
    Fatal(Error),
}

impl Predictor for LlmClient {
    fn model_id(&self) -> String {
        self.spec.model.clone()
    }

    fn predict(&self, request: &PredictRequest<'_>) -> Result<String> {
        self.predict_text(request.prompt)
    }
}
