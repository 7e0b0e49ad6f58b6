use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde_json::{json, Value};

use super::fixtures::{record_fixture, FixtureStore};
use super::{CompletionRequest, CompletionResponse, GatewayError, TokenUsage};

/// A completion service. Implementations accept concurrent calls.
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, GatewayError>;
}

/// Answers from recorded fixtures only; a miss is an error.
#[derive(Debug, Clone)]
pub struct ReplayBackend {
    store: Arc<FixtureStore>,
}

impl ReplayBackend {
    pub fn new(store: Arc<FixtureStore>) -> Self {
        Self { store }
    }
}

impl Backend for ReplayBackend {
    fn id(&self) -> &str {
        "replay"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        let text = self
            .store
            .get(&request.fixture_key)
            .ok_or_else(|| GatewayError::FixtureMissing(request.fixture_key.to_string()))?;
        Ok(CompletionResponse {
            text,
            backend_id: self.id().to_string(),
            latency_ms: 0,
            token_usage: None,
            attempts: 0,
        })
    }
}

/// Serves stored fixtures and records whatever the inner backend answers
/// for keys it has not seen.
pub struct CachingBackend {
    inner: Arc<dyn Backend>,
    store: Arc<FixtureStore>,
    id: String,
}

impl CachingBackend {
    pub fn new(inner: Arc<dyn Backend>, store: Arc<FixtureStore>) -> Self {
        let id = format!("record:{}", inner.id());
        Self { inner, store, id }
    }
}

impl Backend for CachingBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        if let Some(text) = self.store.get(&request.fixture_key) {
            return Ok(CompletionResponse {
                text,
                backend_id: self.id.clone(),
                latency_ms: 0,
                token_usage: None,
                attempts: 0,
            });
        }
        let response = self.inner.complete(request)?;
        record_fixture(request, &response, &self.store)?;
        Ok(response)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    /// Delay before the first retry; doubles each time.
    pub base_delay: Duration,
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_secs(1),
            timeout: Duration::from_secs(120),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LiveConfig {
    /// Chat-completion endpoint, e.g. `https://host/v1/chat/completions`.
    pub url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub retry: RetryPolicy,
}

impl LiveConfig {
    /// Reads `BLOCKIE_API_URL`, `BLOCKIE_API_KEY` and `BLOCKIE_MODEL`.
    pub fn from_env() -> Result<Self, GatewayError> {
        let url = std::env::var("BLOCKIE_API_URL")
            .map_err(|_| GatewayError::Unavailable("BLOCKIE_API_URL is not set".into()))?;
        Ok(Self {
            url,
            api_key: std::env::var("BLOCKIE_API_KEY").ok(),
            model: std::env::var("BLOCKIE_MODEL").unwrap_or_else(|_| "default".into()),
            retry: RetryPolicy::default(),
        })
    }
}

/// HTTP backend speaking the common chat-completion JSON contract.
pub struct LiveBackend {
    config: LiveConfig,
    agent: ureq::Agent,
}

enum Attempt {
    Done(CompletionResponse),
    Transient(String),
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.retry.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    fn attempt(&self, request: &CompletionRequest, started: Instant) -> Result<Attempt, GatewayError> {
        let body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        });
        let mut call = self.agent.post(&self.config.url).header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            call = call.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = match call.send_json(&body) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(GatewayError::Timeout),
            Err(e) => return Ok(Attempt::Transient(e.to_string())),
        };
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Ok(Attempt::Transient(format!("HTTP {status}")));
        }
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(ureq::Error::Timeout(_)) => return Err(GatewayError::Timeout),
            Err(e) => return Ok(Attempt::Transient(e.to_string())),
        };
        if !(200..300).contains(&status) {
            return Err(GatewayError::Rejected { status, body: text });
        }
        let parsed: Value = serde_json::from_str(&text).map_err(|e| GatewayError::Rejected {
            status,
            body: format!("{e}: {text}"),
        })?;
        let content = parsed["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| GatewayError::Rejected {
                status,
                body: format!("no choices[0].message.content in {text}"),
            })?;
        let token_usage = parsed.get("usage").map(|u| TokenUsage {
            prompt_tokens: u["prompt_tokens"].as_u64().unwrap_or(0),
            completion_tokens: u["completion_tokens"].as_u64().unwrap_or(0),
        });
        Ok(Attempt::Done(CompletionResponse {
            text: content.to_string(),
            backend_id: self.id().to_string(),
            latency_ms: started.elapsed().as_millis() as u64,
            token_usage,
            attempts: 0,
        }))
    }
}

impl Backend for LiveBackend {
    fn id(&self) -> &str {
        "live"
    }

    /// Retries 429, 5xx and transport failures with exponential backoff.
    /// Timeouts are not retried.
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        let started = Instant::now();
        let policy = self.config.retry;
        let mut last = String::new();
        for attempt in 0..=policy.max_retries {
            if attempt > 0 {
                let delay = policy.base_delay * 2u32.pow(attempt - 1);
                debug!("{}: retry {attempt} in {delay:?} after {last}", request.tag);
                thread::sleep(delay);
            }
            match self.attempt(request, started)? {
                Attempt::Done(mut r) => {
                    r.attempts = attempt + 1;
                    return Ok(r);
                }
                Attempt::Transient(why) => last = why,
            }
        }
        warn!("{}: giving up after {} attempts: {last}", request.tag, policy.max_retries + 1);
        Err(GatewayError::Unavailable(last))
    }
}
