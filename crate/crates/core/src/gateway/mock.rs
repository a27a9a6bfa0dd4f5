use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, ChatReply, EndpointConfig, PromptRequest, TransportError};

/// Dimension of the pseudo-embeddings returned for unscripted texts.
pub const HASH_EMBEDDING_DIM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    /// HTTP 503; retried.
    Unavailable,
    /// HTTP 429; retried.
    RateLimited,
    /// Request timed out; retried.
    Timeout,
    /// HTTP 401; not retried.
    Auth,
    /// Body is not the expected JSON; not retried.
    Malformed,
}

impl FaultKind {
    fn to_error(self) -> TransportError {
        match self {
            FaultKind::Unavailable => TransportError::transient("HTTP 503 service unavailable"),
            FaultKind::RateLimited => TransportError::transient("HTTP 429 rate limited"),
            FaultKind::Timeout => TransportError::transient("request timed out"),
            FaultKind::Auth => TransportError::Fatal("HTTP 401 unauthorized".into()),
            FaultKind::Malformed => TransportError::Fatal("malformed response body".into()),
        }
    }
}

/// One scripted reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockEntry {
    Text(String),
    Fault { fault: FaultKind },
    Truncated { truncated: String },
    Embedding { embedding: Vec<f64> },
}

/// Request tag → successive replies. The last reply repeats once a list is
/// exhausted. Embedding requests look up `embed:<text>` per text.
pub type MockScript = BTreeMap<String, Vec<MockEntry>>;

#[derive(Default)]
struct State {
    script: MockScript,
    cursors: Mutex<HashMap<String, usize>>,
    log: Mutex<Vec<String>>,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

/// Scripted in-process responder keyed by request tag.
#[derive(Clone, Default)]
pub struct MockBackend {
    state: Arc<State>,
    latency: Duration,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        MockBackend { state: Arc::new(State { script, ..Default::default() }), latency: Duration::ZERO }
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        Ok(MockBackend::new(serde_json::from_str(json)?))
    }

    /// Same script and request log, with a fixed per-request delay.
    pub fn with_latency(&self, latency: Duration) -> Self {
        MockBackend { state: self.state.clone(), latency }
    }

    /// Tags in the order requests arrived (one entry per attempt).
    pub fn request_log(&self) -> Vec<String> {
        self.state.log.lock().unwrap().clone()
    }

    pub fn peak_in_flight(&self) -> usize {
        self.state.peak.load(Ordering::SeqCst)
    }

    fn next_entry(&self, tag: &str) -> Option<MockEntry> {
        self.state.log.lock().unwrap().push(tag.to_string());
        let entries = self.state.script.get(tag)?;
        let mut cursors = self.state.cursors.lock().unwrap();
        let cursor = cursors.entry(tag.to_string()).or_insert(0);
        let entry = entries.get(*cursor).or_else(|| entries.last()).cloned();
        *cursor += 1;
        entry
    }

    fn enter(&self) -> InFlight<'_> {
        let now = self.state.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.state.peak.fetch_max(now, Ordering::SeqCst);
        if !self.latency.is_zero() {
            thread::sleep(self.latency);
        }
        InFlight(&self.state.in_flight)
    }
}

struct InFlight<'a>(&'a AtomicUsize);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

impl Backend for MockBackend {
    fn chat(&self, _endpoint: &EndpointConfig, req: &PromptRequest) -> Result<ChatReply, TransportError> {
        let _guard = self.enter();
        match self.next_entry(&req.request_tag) {
            Some(MockEntry::Text(text)) => Ok(ChatReply { text, truncated: false }),
            Some(MockEntry::Truncated { truncated }) => Ok(ChatReply { text: truncated, truncated: true }),
            Some(MockEntry::Fault { fault }) => Err(fault.to_error()),
            Some(MockEntry::Embedding { .. }) => Err(TransportError::Fatal("scripted an embedding for a chat tag".into())),
            None => Err(TransportError::Fatal(format!("no scripted reply for tag `{}`", req.request_tag))),
        }
    }

    fn embed(&self, _endpoint: &EndpointConfig, texts: &[String]) -> Result<Vec<Vec<f64>>, TransportError> {
        let _guard = self.enter();
        texts
            .iter()
            .map(|text| match self.next_entry(&format!("embed:{text}")) {
                Some(MockEntry::Embedding { embedding }) => Ok(embedding),
                Some(MockEntry::Fault { fault }) => Err(fault.to_error()),
                Some(_) => Err(TransportError::Fatal("scripted a chat reply for an embedding tag".into())),
                None => Ok(hash_embedding(text)),
            })
            .collect()
    }
}

/// Deterministic pseudo-embedding seeded from the SHA-256 of the text.
fn hash_embedding(text: &str) -> Vec<f64> {
    let seed: [u8; 32] = Sha256::digest(text.as_bytes()).into();
    let mut rng = ChaCha8Rng::from_seed(seed);
    (0..HASH_EMBEDDING_DIM).map(|_| rng.random_range(-1.0..1.0)).collect()
}
