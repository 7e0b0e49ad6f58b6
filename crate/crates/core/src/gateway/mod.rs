//! Prompt rendering, completion backends and structured-output recovery.

mod backend;
mod fixtures;
mod structured;
mod template;

use std::fmt;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use backend::{Backend, CachingBackend, LiveBackend, LiveConfig, ReplayBackend, RetryPolicy};
pub use fixtures::{record_fixture, FixtureKey, FixtureStore};
pub use structured::extract_structured;
pub use template::{bbox_lines, PromptPassages, PromptTemplate, TemplateKind};

/// Appended to a prompt whose answer held no parseable dictionary.
pub const REPROMPT_SUFFIX: &str = "\n\nReturn only the dictionary, with no other text.";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("missing slot {0}")]
    MissingSlot(String),
    #[error("template {kind} lacks anchor passage {anchor:?}")]
    MissingAnchor { kind: String, anchor: String },
    #[error("fixture missing {0}")]
    FixtureMissing(String),
    #[error("fixture conflict {0}")]
    FixtureConflict(String),
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend timeout")]
    Timeout,
    #[error("backend rejected request with HTTP {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("unstructured response: {0}")]
    Unstructured(String),
    #[error("fixture store: {0}")]
    Io(String),
}

/// Identifies a request within a run.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RequestTag {
    pub stage: String,
    pub doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_id: Option<String>,
}

impl RequestTag {
    pub fn new(stage: &str, doc_id: &str, block_id: Option<&str>) -> Self {
        Self {
            stage: stage.to_string(),
            doc_id: doc_id.to_string(),
            block_id: block_id.map(str::to_string),
        }
    }
}

impl fmt::Display for RequestTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.stage, self.doc_id)?;
        if let Some(b) = &self.block_id {
            write!(f, "/{b}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub tag: RequestTag,
    pub fixture_key: FixtureKey,
}

impl CompletionRequest {
    pub fn new(prompt: String, tag: RequestTag, fixture_key: FixtureKey) -> Self {
        Self {
            prompt,
            temperature: 0.0,
            max_output_tokens: 4096,
            tag,
            fixture_key,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    /// Verbatim model output.
    pub text: String,
    pub backend_id: String,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_usage: Option<TokenUsage>,
    /// HTTP attempts made; 0 when served from fixtures.
    pub attempts: u32,
}

/// Audit record of one request and its outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub tag: RequestTag,
    pub fixture_key: FixtureKey,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Caps in-flight requests and spaces request starts.
#[derive(Debug)]
pub struct Limiter {
    max_in_flight: usize,
    min_interval: Duration,
    in_flight: Mutex<usize>,
    freed: Condvar,
    next_start: Mutex<Instant>,
}

pub struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().expect("limiter lock") -= 1;
        self.0.freed.notify_one();
    }
}

impl Limiter {
    /// `requests_per_second` of 0 means unlimited.
    pub fn new(max_in_flight: usize, requests_per_second: f64) -> Self {
        let min_interval = if requests_per_second > 0.0 {
            Duration::from_secs_f64(1.0 / requests_per_second)
        } else {
            Duration::ZERO
        };
        Self {
            max_in_flight: max_in_flight.max(1),
            min_interval,
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            next_start: Mutex::new(Instant::now()),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().expect("limiter lock");
        while *n >= self.max_in_flight {
            n = self.freed.wait(n).expect("limiter lock");
        }
        *n += 1;
        drop(n);
        if !self.min_interval.is_zero() {
            let wait = {
                let mut next = self.next_start.lock().expect("limiter lock");
                let now = Instant::now();
                let start = (*next).max(now);
                *next = start + self.min_interval;
                start - now
            };
            std::thread::sleep(wait);
        }
        Permit(self)
    }
}

/// Outcome of a structured request: the parsed object (if any) plus every
/// exchange made to get it.
#[derive(Debug, Clone)]
pub struct StructuredOutcome {
    pub value: Result<Value, String>,
    pub exchanges: Vec<Exchange>,
}

/// Backend plus limiter; the entry point for pipeline stages.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn Backend>,
    limiter: Arc<Limiter>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, limiter: Limiter) -> Self {
        Self {
            backend,
            limiter: Arc::new(limiter),
        }
    }

    pub fn unlimited(backend: Arc<dyn Backend>) -> Self {
        Self::new(backend, Limiter::new(usize::MAX, 0.0))
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        let _permit = self.limiter.acquire();
        self.backend.complete(request)
    }

    fn exchange(&self, request: &CompletionRequest) -> (Result<CompletionResponse, GatewayError>, Exchange) {
        let result = self.complete(request);
        let ex = Exchange {
            tag: request.tag.clone(),
            fixture_key: request.fixture_key.clone(),
            prompt: request.prompt.clone(),
            response: result.as_ref().ok().map(|r| r.text.clone()),
            error: result.as_ref().err().map(|e| e.to_string()),
        };
        (result, ex)
    }

    /// Sends the request and extracts a dictionary from the answer. An
    /// unstructured answer earns one reprompt under a derived key.
    pub fn complete_structured(&self, request: &CompletionRequest) -> StructuredOutcome {
        let (first, ex) = self.exchange(request);
        let mut exchanges = vec![ex];
        let raw = match first {
            Ok(r) => r.text,
            Err(e) => {
                return StructuredOutcome {
                    value: Err(e.to_string()),
                    exchanges,
                }
            }
        };
        if let Ok(v) = extract_structured(&raw) {
            return StructuredOutcome { value: Ok(v), exchanges };
        }
        let retry = CompletionRequest {
            prompt: format!("{}{REPROMPT_SUFFIX}", request.prompt),
            fixture_key: request.fixture_key.derive("reprompt"),
            ..request.clone()
        };
        let (second, ex) = self.exchange(&retry);
        exchanges.push(ex);
        let value = second
            .map_err(|e| e.to_string())
            .and_then(|r| extract_structured(&r.text).map_err(|e| e.to_string()));
        StructuredOutcome { value, exchanges }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Scripted {
        answers: Vec<&'static str>,
        calls: AtomicUsize,
    }

    impl Backend for Scripted {
        fn id(&self) -> &str {
            "scripted"
        }

        fn complete(&self, _: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
            let i = self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(CompletionResponse {
                text: self.answers[i.min(self.answers.len() - 1)].to_string(),
                backend_id: "scripted".into(),
                latency_ms: 0,
                token_usage: None,
                attempts: 1,
            })
        }
    }

    fn req() -> CompletionRequest {
        CompletionRequest::new("p".into(), RequestTag::new("parse", "d", Some("block_1")), FixtureKey::compute("k", "s", "t", &[], ""))
    }

    #[test]
    fn replay_hits_and_misses() {
        let store = Arc::new(FixtureStore::in_memory());
        let r = req();
        store.insert(r.fixture_key.clone(), "{\"a\": 1}".into()).unwrap();
        let gw = Gateway::unlimited(Arc::new(ReplayBackend::new(store)));
        let resp = gw.complete(&r).unwrap();
        assert_eq!((resp.text.as_str(), resp.latency_ms), ("{\"a\": 1}", 0));
        let miss = CompletionRequest {
            fixture_key: FixtureKey("nope".into()),
            ..r
        };
        assert_eq!(gw.complete(&miss).unwrap_err().to_string(), "fixture missing nope");
    }

    #[test]
    fn unstructured_answer_gets_one_reprompt() {
        let backend = Arc::new(Scripted {
            answers: vec!["I think so.", "{\"a\": 1}"],
            calls: AtomicUsize::new(0),
        });
        let gw = Gateway::unlimited(backend.clone());
        let out = gw.complete_structured(&req());
        assert_eq!(out.value.unwrap(), serde_json::json!({"a": 1}));
        assert_eq!(out.exchanges.len(), 2);
        assert!(out.exchanges[1].prompt.ends_with(REPROMPT_SUFFIX));
        assert_ne!(out.exchanges[0].fixture_key, out.exchanges[1].fixture_key);

        let stubborn = Arc::new(Scripted {
            answers: vec!["no", "still no"],
            calls: AtomicUsize::new(0),
        });
        let out = Gateway::unlimited(stubborn.clone()).complete_structured(&req());
        assert!(out.value.unwrap_err().starts_with("unstructured response"));
        assert_eq!(stubborn.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn caching_backend_records_then_serves() {
        let store = Arc::new(FixtureStore::in_memory());
        let inner = Arc::new(Scripted {
            answers: vec!["{\"x\": 1}", "{\"x\": 2}"],
            calls: AtomicUsize::new(0),
        });
        let cache = CachingBackend::new(inner.clone(), store.clone());
        assert_eq!(cache.complete(&req()).unwrap().text, "{\"x\": 1}");
        assert_eq!(cache.complete(&req()).unwrap().text, "{\"x\": 1}");
        assert_eq!(inner.calls.load(Ordering::SeqCst), 1);
        assert_eq!(ReplayBackend::new(store).complete(&req()).unwrap().text, "{\"x\": 1}");
    }

    #[test]
    fn limiter_caps_in_flight_requests() {
        let limiter = Arc::new(Limiter::new(2, 0.0));
        let active = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (l, a, p) = (limiter.clone(), active.clone(), peak.clone());
                std::thread::spawn(move || {
                    let _permit = l.acquire();
                    let now = a.fetch_add(1, Ordering::SeqCst) + 1;
                    p.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                    a.fetch_sub(1, Ordering::SeqCst);
                })
            })
            .collect();
        handles.into_iter().for_each(|h| h.join().unwrap());
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn limiter_spaces_request_starts() {
        let limiter = Limiter::new(4, 200.0);
        let t = Instant::now();
        for _ in 0..5 {
            drop(limiter.acquire());
        }
        assert!(t.elapsed() >= Duration::from_millis(19));
    }
}
