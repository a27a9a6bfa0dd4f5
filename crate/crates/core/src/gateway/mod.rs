//! Chat-completion and embedding client.
//!
//! A [`Gateway`] owns the endpoint table and the retry policy; the wire work
//! is delegated to a [`Backend`] (HTTP in production, [`MockBackend`] for
//! offline runs). Batches run on at most `max_in_flight` worker threads and
//! come back index-aligned with their inputs.

mod http;
mod mock;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::HttpBackend;
pub use mock::{FaultKind, MockBackend, MockEntry, MockScript, HASH_EMBEDDING_DIM};

pub const DEFAULT_TRAJECTORY_MAX_TOKENS: u32 = 2048;
pub const DEFAULT_TEMPLATE_MAX_TOKENS: u32 = 1024;

const MAX_BACKOFF_MS: u64 = 30_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Message { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub endpoint_id: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Correlates a request with its log line and its mock script entry.
    pub request_tag: String,
}

impl PromptRequest {
    pub fn new(
        endpoint_id: impl Into<String>,
        request_tag: impl Into<String>,
        messages: Vec<Message>,
        temperature: f64,
        max_tokens: u32,
    ) -> Self {
        PromptRequest {
            endpoint_id: endpoint_id.into(),
            messages,
            temperature,
            max_tokens,
            request_tag: request_tag.into(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self.messages.last() {
            None => return Err("request has no messages".into()),
            Some(m) if m.role != Role::User => return Err("last message must come from the user".into()),
            _ => {}
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(format!("temperature {} outside [0, 2]", self.temperature));
        }
        if self.max_tokens == 0 {
            return Err("max_tokens must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Finish {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub finish: Finish,
    pub attempt_count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Completion {
    fn error(attempt_count: u32, message: impl Into<String>) -> Self {
        Completion { text: String::new(), finish: Finish::Error, attempt_count, error: Some(message.into()) }
    }

    pub fn is_error(&self) -> bool {
        self.finish == Finish::Error
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    /// Environment variable holding the bearer token. Absent for open endpoints.
    #[serde(default)]
    pub auth_env: Option<String>,
    pub model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub endpoints: BTreeMap<String, EndpointConfig>,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub max_in_flight: usize,
    pub timeout_ms: u64,
    pub embed_batch_size: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            endpoints: BTreeMap::new(),
            max_retries: 3,
            backoff_base_ms: 500,
            max_in_flight: 8,
            timeout_ms: 120_000,
            embed_batch_size: 64,
        }
    }
}

/// Reply from a backend before retry bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatReply {
    pub text: String,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransportError {
    /// Worth retrying: 429, 5xx, timeouts, dropped connections.
    #[error("transient: {message}")]
    Transient { message: String, retry_after_ms: Option<u64> },
    /// Retrying cannot help: auth failures, malformed bodies, bad requests.
    #[error("fatal: {0}")]
    Fatal(String),
}

impl TransportError {
    pub fn transient(message: impl Into<String>) -> Self {
        TransportError::Transient { message: message.into(), retry_after_ms: None }
    }
}

pub trait Backend: Send + Sync {
    fn chat(&self, endpoint: &EndpointConfig, req: &PromptRequest) -> Result<ChatReply, TransportError>;

    fn embed(&self, endpoint: &EndpointConfig, texts: &[String]) -> Result<Vec<Vec<f64>>, TransportError>;
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("endpoint `{0}` is not configured")]
    UnknownEndpoint(String),
    #[error("invalid embedding request: {0}")]
    InvalidInput(String),
    #[error("embedding failed after {attempts} attempt(s): {message}")]
    Embedding { attempts: u32, message: String },
    #[error("endpoint returned {got} vectors for {expected} texts")]
    CountMismatch { expected: usize, got: usize },
    #[error("endpoint returned vectors of differing dimension ({0} vs {1})")]
    RaggedVectors(usize, usize),
}

#[derive(Clone)]
pub struct Gateway {
    config: GatewayConfig,
    backend: Arc<dyn Backend>,
}

impl Gateway {
    pub fn new(config: GatewayConfig, backend: Arc<dyn Backend>) -> Self {
        Gateway { config, backend }
    }

    pub fn http(config: GatewayConfig) -> Self {
        let backend = HttpBackend::new(Duration::from_millis(config.timeout_ms));
        Gateway::new(config, Arc::new(backend))
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    fn endpoint(&self, id: &str) -> Option<&EndpointConfig> {
        self.config.endpoints.get(id)
    }

    fn backoff(&self, attempt: u32, hint_ms: Option<u64>) -> Duration {
        let exp = self
            .config
            .backoff_base_ms
            .saturating_mul(1u64 << (attempt - 1).min(20))
            .min(MAX_BACKOFF_MS);
        Duration::from_millis(exp.max(hint_ms.unwrap_or(0)))
    }

    /// Sends one chat request, retrying transient failures.
    ///
    /// Never panics and never returns `Err`: every failure is reported as a
    /// completion with `finish == Error`.
    pub fn complete(&self, req: &PromptRequest) -> Completion {
        if let Err(e) = req.validate() {
            return Completion::error(1, format!("invalid request {}: {e}", req.request_tag));
        }
        let Some(endpoint) = self.endpoint(&req.endpoint_id) else {
            return Completion::error(1, format!("endpoint `{}` is not configured", req.endpoint_id));
        };
        let max_attempts = self.config.max_retries + 1;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let err = match self.backend.chat(endpoint, req) {
                Ok(reply) if reply.truncated => {
                    return Completion { text: reply.text, finish: Finish::Length, attempt_count: attempt, error: None }
                }
                Ok(reply) if reply.text.trim().is_empty() => TransportError::transient("empty completion"),
                Ok(reply) => {
                    return Completion { text: reply.text, finish: Finish::Stop, attempt_count: attempt, error: None }
                }
                Err(e) => e,
            };
            match err {
                TransportError::Transient { message, retry_after_ms } if attempt < max_attempts => {
                    log::debug!("{} attempt {attempt} failed ({message}); retrying", req.request_tag);
                    thread::sleep(self.backoff(attempt, retry_after_ms));
                }
                e => {
                    log::warn!("{} failed after {attempt} attempt(s): {e}", req.request_tag);
                    return Completion::error(attempt, e.to_string());
                }
            }
        }
    }

    /// Index-aligned completions for a batch; at most `max_in_flight`
    /// requests are outstanding at once.
    pub fn complete_batch(&self, reqs: &[PromptRequest]) -> Vec<Completion> {
        run_bounded(reqs.len(), self.config.max_in_flight, |i| self.complete(&reqs[i]))
    }

    /// One vector per text, order-aligned, all of one dimension.
    pub fn embed(&self, endpoint_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        if texts.iter().any(|t| t.is_empty()) {
            return Err(GatewayError::InvalidInput("texts must be non-empty".into()));
        }
        let endpoint = self
            .endpoint(endpoint_id)
            .ok_or_else(|| GatewayError::UnknownEndpoint(endpoint_id.to_string()))?;
        let chunk = self.config.embed_batch_size.max(1);
        let chunks: Vec<&[String]> = texts.chunks(chunk).collect();
        let results = run_bounded(chunks.len(), self.config.max_in_flight, |i| self.embed_chunk(endpoint, chunks[i]));

        let mut out = Vec::with_capacity(texts.len());
        for (chunk, result) in chunks.iter().zip(results) {
            let vectors = result?;
            if vectors.len() != chunk.len() {
                return Err(GatewayError::CountMismatch { expected: chunk.len(), got: vectors.len() });
            }
            out.extend(vectors);
        }
        let dim = out[0].len();
        if let Some(bad) = out.iter().find(|v| v.len() != dim) {
            return Err(GatewayError::RaggedVectors(dim, bad.len()));
        }
        Ok(out)
    }

    fn embed_chunk(&self, endpoint: &EndpointConfig, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        let max_attempts = self.config.max_retries + 1;
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.backend.embed(endpoint, texts) {
                Ok(v) => return Ok(v),
                Err(TransportError::Transient { retry_after_ms, .. }) if attempt < max_attempts => {
                    thread::sleep(self.backoff(attempt, retry_after_ms));
                }
                Err(e) => return Err(GatewayError::Embedding { attempts: attempt, message: e.to_string() }),
            }
        }
    }
}

/// Runs `f(0..n)` on at most `workers` threads and returns results in index order.
pub fn run_bounded<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    if n == 0 {
        return Vec::new();
    }
    let workers = workers.clamp(1, n);
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let done: Vec<Vec<(usize, T)>> = thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= n {
                            break;
                        }
                        local.push((i, f(i)));
                    }
                    local
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("batch worker panicked")).collect()
    });
    for (i, v) in done.into_iter().flatten() {
        slots[i] = Some(v);
    }
    slots.into_iter().map(|s| s.expect("every index is visited once")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gateway(script: &str, max_retries: u32, max_in_flight: usize) -> (Gateway, Arc<MockBackend>) {
        let mock = Arc::new(MockBackend::from_json(script).unwrap());
        let mut config = GatewayConfig { max_retries, backoff_base_ms: 1, max_in_flight, ..Default::default() };
        config
            .endpoints
            .insert("m".into(), EndpointConfig { base_url: "mock://".into(), auth_env: None, model: "m".into() });
        (Gateway::new(config, mock.clone()), mock)
    }

    fn req(tag: &str) -> PromptRequest {
        PromptRequest::new("m", tag, vec![Message::user("hi")], 0.0, 16)
    }

    #[test]
    fn mock_echo() {
        let (gw, _) = gateway(r#"{"t": ["ok"]}"#, 3, 1);
        let c = gw.complete(&req("t"));
        assert_eq!((c.text.as_str(), c.finish, c.attempt_count), ("ok", Finish::Stop, 1));
    }

    #[test]
    fn retries_until_success() {
        let (gw, mock) = gateway(r#"{"t": [{"fault": "unavailable"}, {"fault": "unavailable"}, "ok"]}"#, 3, 1);
        let c = gw.complete(&req("t"));
        assert_eq!((c.finish, c.attempt_count), (Finish::Stop, 3));
        assert_eq!(mock.request_log().len(), 3);
    }

    #[test]
    fn exhausted_retries_report_error() {
        let (gw, mock) = gateway(r#"{"t": [{"fault": "unavailable"}]}"#, 2, 1);
        let c = gw.complete(&req("t"));
        assert_eq!((c.finish, c.attempt_count), (Finish::Error, 3));
        assert_eq!(mock.request_log().len(), 3);
    }

    #[test]
    fn fatal_faults_are_not_retried() {
        let (gw, mock) = gateway(r#"{"a": [{"fault": "auth"}], "b": [{"fault": "malformed"}]}"#, 5, 1);
        for tag in ["a", "b"] {
            let c = gw.complete(&req(tag));
            assert_eq!((c.finish, c.attempt_count), (Finish::Error, 1));
        }
        assert_eq!(mock.request_log().len(), 2);
    }

    #[test]
    fn invalid_requests_are_refused() {
        let (gw, mock) = gateway(r#"{"t": ["ok"]}"#, 0, 1);
        let mut r = req("t");
        r.messages.push(Message::assistant("x"));
        assert!(gw.complete(&r).is_error());
        let mut r = req("t");
        r.temperature = 2.5;
        assert!(gw.complete(&r).is_error());
        let mut r = req("t");
        r.endpoint_id = "nope".into();
        assert!(gw.complete(&r).is_error());
        assert!(mock.request_log().is_empty());
    }

    #[test]
    fn empty_batch() {
        let (gw, _) = gateway("{}", 0, 3);
        assert!(gw.complete_batch(&[]).is_empty());
    }

    #[test]
    fn batch_is_index_aligned_under_concurrency() {
        let script: BTreeMap<String, Vec<String>> = (0..10).map(|i| (format!("t{i}"), vec![format!("r{i}")])).collect();
        let (gw, mock) = gateway(&serde_json::to_string(&script).unwrap(), 0, 3);
        let mock = mock.with_latency(Duration::from_millis(10));
        let gw = Gateway::new(gw.config.clone(), Arc::new(mock.clone()));
        let reqs: Vec<_> = (0..10).map(|i| req(&format!("t{i}"))).collect();
        let out = gw.complete_batch(&reqs);
        for (i, c) in out.iter().enumerate() {
            assert_eq!(c.text, format!("r{i}"));
        }
        assert!(mock.peak_in_flight() <= 3);
        assert_eq!(mock.request_log().len(), 10);
    }

    #[test]
    fn one_failing_item_does_not_abort_batch() {
        let script = r#"{"t0":["a"],"t1":["b"],"t2":["c"],"t3":[{"fault":"unavailable"}],"t4":["e"]}"#;
        let (gw, _) = gateway(script, 1, 2);
        let reqs: Vec<_> = (0..5).map(|i| req(&format!("t{i}"))).collect();
        let out = gw.complete_batch(&reqs);
        let errors: Vec<usize> = out.iter().enumerate().filter(|(_, c)| c.is_error()).map(|(i, _)| i).collect();
        assert_eq!(errors, vec![3]);
    }

    #[test]
    fn peak_in_flight_bound_for_large_batch() {
        let (gw, mock) = gateway("{}", 0, 4);
        let mock = mock.with_latency(Duration::from_millis(2));
        let gw = Gateway::new(gw.config.clone(), Arc::new(mock.clone()));
        let reqs: Vec<_> = (0..100).map(|i| req(&format!("unscripted{i}"))).collect();
        let out = gw.complete_batch(&reqs);
        assert_eq!(out.len(), 100);
        assert!(mock.peak_in_flight() <= 4);
        assert!(out.iter().all(|c| c.attempt_count <= 1));
    }

    #[test]
    fn embed_passthrough_and_shapes() {
        let (gw, _) = gateway(
            r#"{"embed:a": [{"embedding": [0.0, 1.0, 0.0]}],
                "embed:p": [{"embedding": [1, 2, 3, 4]}], "embed:q": [{"embedding": [4, 3, 2, 1]}]}"#,
            0,
            2,
        );
        assert_eq!(gw.embed("m", &["a".into()]).unwrap(), vec![vec![0.0, 1.0, 0.0]]);
        let two = gw.embed("m", &["p".into(), "q".into()]).unwrap();
        assert_eq!(two.len(), 2);
        assert!(two.iter().all(|v| v.len() == 4));
    }

    #[test]
    fn embed_is_deterministic_for_duplicates() {
        let (gw, _) = gateway("{}", 0, 2);
        let v = gw.embed("m", &["x".into(), "x".into()]).unwrap();
        assert_eq!(v[0], v[1]);
        assert_eq!(v[0].len(), HASH_EMBEDDING_DIM);
    }

    #[test]
    fn embed_rejects_empty_text_and_reports_failure() {
        let (gw, _) = gateway(r#"{"embed:bad": [{"fault": "unavailable"}]}"#, 1, 1);
        assert!(matches!(gw.embed("m", &["".into()]), Err(GatewayError::InvalidInput(_))));
        assert!(matches!(gw.embed("m", &["bad".into()]), Err(GatewayError::Embedding { attempts: 2, .. })));
    }

    #[test]
    fn embed_rejects_ragged_vectors() {
        let (gw, _) = gateway(r#"{"embed:a": [{"embedding": [1, 0]}], "embed:b": [{"embedding": [1, 0, 0]}]}"#, 0, 1);
        assert!(matches!(gw.embed("m", &["a".into(), "b".into()]), Err(GatewayError::RaggedVectors(2, 3))));
    }

    #[test]
    fn backoff_grows_and_caps() {
        let (gw, _) = gateway("{}", 0, 1);
        let gw = Gateway::new(GatewayConfig { backoff_base_ms: 100, ..gw.config.clone() }, gw.backend.clone());
        assert_eq!(gw.backoff(1, None), Duration::from_millis(100));
        assert_eq!(gw.backoff(3, None), Duration::from_millis(400));
        assert_eq!(gw.backoff(3, Some(1000)), Duration::from_millis(1000));
        assert_eq!(gw.backoff(30, None), Duration::from_millis(MAX_BACKOFF_MS));
    }
}
