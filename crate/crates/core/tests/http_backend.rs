use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use thoughtlog_core::gateway::{EndpointConfig, Finish, Gateway, GatewayConfig, Message, PromptRequest};

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    auth: Option<String>,
    body: serde_json::Value,
}

struct Canned {
    status: u16,
    extra_headers: &'static str,
    body: String,
}

fn canned(status: u16, body: serde_json::Value) -> Canned {
    Canned { status, extra_headers: "", body: body.to_string() }
}

/// Serves the canned responses in order, one per connection.
fn serve(responses: Vec<Canned>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let mut queue: VecDeque<Canned> = responses.into();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Some(reply) = queue.pop_front() else { break };
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let path = request_line.split_whitespace().nth(1).unwrap_or_default().to_string();
            let mut length = 0;
            let mut auth = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => length = value.trim().parse().unwrap(),
                    "authorization" => auth = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            log.lock().unwrap().push(Seen { path, auth, body: serde_json::from_slice(&body).unwrap() });
            let response = format!(
                "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n{}\r\n{}",
                reply.status,
                reply.body.len(),
                reply.extra_headers,
                reply.body
            );
            stream.write_all(response.as_bytes()).unwrap();
        }
    });
    (format!("http://{addr}/v1"), seen)
}

fn gateway(base_url: String, auth_env: Option<&str>) -> Gateway {
    let mut config = GatewayConfig { backoff_base_ms: 1, max_retries: 2, timeout_ms: 10_000, ..Default::default() };
    config.endpoints.insert(
        "teacher".into(),
        EndpointConfig { base_url, auth_env: auth_env.map(str::to_string), model: "big-model".into() },
    );
    Gateway::http(config)
}

fn request() -> PromptRequest {
    PromptRequest::new("teacher", "t1", vec![Message::system("be brief"), Message::user("hi")], 0.0, 64)
}

fn chat_ok(text: &str, finish: &str) -> serde_json::Value {
    serde_json::json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": finish}]})
}

#[test]
fn chat_round_trip_with_bearer_token() {
    std::env::set_var("THOUGHTLOG_TEST_KEY", "sekret");
    let (url, seen) = serve(vec![canned(200, chat_ok("hello", "stop"))]);
    let c = gateway(url, Some("THOUGHTLOG_TEST_KEY")).complete(&request());
    assert_eq!(c.text, "hello");
    assert_eq!(c.finish, Finish::Stop);
    assert_eq!(c.attempt_count, 1);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/v1/chat/completions");
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer sekret"));
    assert_eq!(seen[0].body["model"], "big-model");
    assert_eq!(seen[0].body["max_tokens"], 64);
    assert_eq!(seen[0].body["messages"][0]["role"], "system");
    assert_eq!(seen[0].body["messages"][1]["content"], "hi");
}

#[test]
fn rate_limit_then_success() {
    let (url, seen) = serve(vec![
        Canned { status: 429, extra_headers: "Retry-After: 0\r\n", body: "{}".into() },
        canned(503, serde_json::json!({"error": "busy"})),
        canned(200, chat_ok("ok", "stop")),
    ]);
    let c = gateway(url, None).complete(&request());
    assert_eq!(c.text, "ok");
    assert_eq!(c.attempt_count, 3);
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn auth_failure_is_not_retried() {
    let (url, seen) = serve(vec![canned(401, serde_json::json!({})), canned(200, chat_ok("never", "stop"))]);
    let c = gateway(url, None).complete(&request());
    assert!(c.is_error());
    assert_eq!(c.attempt_count, 1);
    assert!(c.error.unwrap().contains("auth"));
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn length_finish_is_reported() {
    let (url, _) = serve(vec![canned(200, chat_ok("partial", "length"))]);
    let c = gateway(url, None).complete(&request());
    assert_eq!(c.finish, Finish::Length);
    assert_eq!(c.text, "partial");
}

#[test]
fn malformed_body_is_fatal() {
    let (url, _) = serve(vec![Canned { status: 200, extra_headers: "", body: "not json".into() }]);
    let c = gateway(url, None).complete(&request());
    assert!(c.is_error());
    assert_eq!(c.attempt_count, 1);
}

#[test]
fn missing_credential_is_fatal() {
    let (url, seen) = serve(vec![canned(200, chat_ok("x", "stop"))]);
    let c = gateway(url, Some("THOUGHTLOG_SURELY_UNSET_VAR")).complete(&request());
    assert!(c.is_error());
    assert!(seen.lock().unwrap().is_empty());
}

#[test]
fn embeddings_are_reordered_by_index() {
    let body = serde_json::json!({"data": [
        {"index": 1, "embedding": [0.0, 1.0]},
        {"index": 0, "embedding": [1.0, 0.0]}
    ]});
    let (url, seen) = serve(vec![canned(200, body)]);
    let v = gateway(url, None).embed("teacher", &["a".to_string(), "b".to_string()]).unwrap();
    assert_eq!(v, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/v1/embeddings");
    assert_eq!(seen[0].body["input"], serde_json::json!(["a", "b"]));
}
