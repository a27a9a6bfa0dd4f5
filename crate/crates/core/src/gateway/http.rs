//! OpenAI-compatible wire format over blocking HTTP.

use std::env;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use ureq::Agent;

use super::{Backend, ChatReply, EndpointConfig, Message, PromptRequest, TransportError};

#[derive(Serialize)]
struct ChatBody<'a> {
    model: &'a str,
    messages: &'a [Message],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Serialize)]
struct EmbedBody<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f64>,
}

pub struct HttpBackend {
    agent: Agent,
}

impl HttpBackend {
    pub fn new(timeout: Duration) -> Self {
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpBackend { agent }
    }

    fn post<B: Serialize>(&self, endpoint: &EndpointConfig, path: &str, body: &B) -> Result<String, TransportError> {
        let url = format!("{}/{}", endpoint.base_url.trim_end_matches('/'), path);
        let mut request = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(var) = &endpoint.auth_env {
            let token = env::var(var)
                .map_err(|_| TransportError::Fatal(format!("auth: environment variable {var} is not set")))?;
            request = request.header("Authorization", format!("Bearer {token}"));
        }
        let payload = serde_json::to_vec(body).map_err(|e| TransportError::Fatal(e.to_string()))?;
        let mut response = request.send(&payload[..]).map_err(classify_io)?;
        let status = response.status().as_u16();
        let retry_after_ms = response
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok())
            .map(|secs| secs * 1000);
        let text = response.body_mut().read_to_string().map_err(classify_io)?;
        match status {
            200..=299 => Ok(text),
            401 | 403 => Err(TransportError::Fatal(format!("auth: HTTP {status}"))),
            408 | 409 | 425 | 429 | 500..=599 => {
                Err(TransportError::Transient { message: format!("HTTP {status}"), retry_after_ms })
            }
            _ => Err(TransportError::Fatal(format!("HTTP {status}: {}", truncate(&text, 200)))),
        }
    }
}

fn classify_io(e: ureq::Error) -> TransportError {
    match e {
        ureq::Error::Timeout(_) => TransportError::transient("request timed out"),
        ureq::Error::Io(e) => TransportError::transient(format!("io: {e}")),
        ureq::Error::ConnectionFailed | ureq::Error::HostNotFound => TransportError::transient(e.to_string()),
        other => TransportError::Fatal(other.to_string()),
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

impl Backend for HttpBackend {
    fn chat(&self, endpoint: &EndpointConfig, req: &PromptRequest) -> Result<ChatReply, TransportError> {
        let body = ChatBody {
            model: &endpoint.model,
            messages: &req.messages,
            temperature: req.temperature,
            max_tokens: req.max_tokens,
        };
        let text = self.post(endpoint, "chat/completions", &body)?;
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| TransportError::Fatal(format!("malformed chat response: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| TransportError::Fatal("chat response has no choices".into()))?;
        Ok(ChatReply {
            text: choice.message.content.unwrap_or_default(),
            truncated: choice.finish_reason.as_deref() == Some("length"),
        })
    }

    fn embed(&self, endpoint: &EndpointConfig, texts: &[String]) -> Result<Vec<Vec<f64>>, TransportError> {
        let body = EmbedBody { model: &endpoint.model, input: texts };
        let text = self.post(endpoint, "embeddings", &body)?;
        let parsed: EmbedResponse = serde_json::from_str(&text)
            .map_err(|e| TransportError::Fatal(format!("malformed embedding response: {e}")))?;
        let mut data = parsed.data;
        if data.iter().all(|d| d.index.is_some()) {
            data.sort_by_key(|d| d.index);
        }
        Ok(data.into_iter().map(|d| d.embedding).collect())
    }
}
