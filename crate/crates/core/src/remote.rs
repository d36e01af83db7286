//! Blocking client for OpenAI-compatible endpoints, with bounded retries and an
//! in-flight request cap shared by every clone of the client.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff_ms: 250,
        }
    }
}

impl RetryPolicy {
    fn backoff(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(1 << attempt.min(16)))
    }
}

/// Counting semaphore.
#[derive(Debug)]
struct InFlight {
    cap: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().unwrap_or_else(|e| e.into_inner());
        while *used >= self.cap {
            used = self.freed.wait(used).unwrap_or_else(|e| e.into_inner());
        }
        *used += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut used = self.0.used.lock().unwrap_or_else(|e| e.into_inner());
        *used -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    /// Base URL, e.g. `http://localhost:8000/v1`.
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token. No header is sent when unset.
    pub api_key_env: Option<String>,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
    /// Log request and response bodies at debug level.
    pub debug: bool,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            model: String::new(),
            api_key_env: None,
            max_in_flight: 8,
            timeout_secs: 60,
            retry: RetryPolicy::default(),
            debug: false,
        }
    }
}

#[derive(Clone)]
pub struct JsonClient {
    config: EndpointConfig,
    http: reqwest::blocking::Client,
    in_flight: Arc<InFlight>,
}

impl std::fmt::Debug for JsonClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("JsonClient")
            .field("base_url", &self.config.base_url)
            .field("model", &self.config.model)
            .finish()
    }
}

impl JsonClient {
    pub fn new(config: EndpointConfig) -> Result<Self> {
        if config.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be positive".into()));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        let in_flight = Arc::new(InFlight {
            cap: config.max_in_flight,
            used: Mutex::new(0),
            freed: Condvar::new(),
        });
        Ok(Self {
            config,
            http,
            in_flight,
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), path)
    }

    /// POSTs `body` to `path` under the base URL, retrying transport errors, 429 and 5xx.
    pub fn post(&self, path: &str, body: &Value) -> Result<Value> {
        let url = self.url(path);
        let key = match &self.config.api_key_env {
            Some(var) => {
                Some(std::env::var(var).map_err(|_| Error::Config(format!("environment variable {var} is not set")))?)
            }
            None => None,
        };
        if self.config.debug {
            log::debug!("POST {url} (authorization redacted) body={body}");
        }

        let _permit = self.in_flight.acquire();
        let attempts = self.config.retry.attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.config.retry.backoff(attempt - 1));
            }
            let mut req = self.http.post(&url).json(body);
            if let Some(k) = &key {
                req = req.bearer_auth(k);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().unwrap_or_default();
                    if status.is_success() {
                        if self.config.debug {
                            log::debug!("response from {url}: {text}");
                        }
                        return serde_json::from_str(&text).map_err(|e| Error::Remote {
                            endpoint: url.clone(),
                            attempts: attempt + 1,
                            message: format!("invalid JSON response: {e}"),
                        });
                    }
                    last = format!("HTTP {status}: {}", truncate(&text, 200));
                    let retryable = status.as_u16() == 429 || status.is_server_error();
                    if !retryable {
                        return Err(Error::Remote {
                            endpoint: url,
                            attempts: attempt + 1,
                            message: last,
                        });
                    }
                }
                Err(e) => last = e.to_string(),
            }
            log::warn!("attempt {} to {url} failed: {last}", attempt + 1);
        }
        Err(Error::Remote {
            endpoint: url,
            attempts,
            message: last,
        })
    }
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Request for `/chat/completions`.
#[derive(Clone, Debug, Serialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub stop: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: &str, content: impl Into<String>) -> Self {
        Self {
            role: role.into(),
            content: content.into(),
        }
    }
}

/// Completion text and finish reason of the first choice.
pub fn chat(client: &JsonClient, request: &ChatRequest) -> Result<(String, Option<String>)> {
    let body = serde_json::to_value(request).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let resp = client.post("chat/completions", &body)?;
    let choice = resp
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| Error::Remote {
            endpoint: client.url("chat/completions"),
            attempts: 1,
            message: "response has no choices".into(),
        })?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let finish = choice.get("finish_reason").and_then(Value::as_str).map(str::to_string);
    Ok((text, finish))
}
