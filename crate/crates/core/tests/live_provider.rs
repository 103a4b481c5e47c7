//! The HTTP client against a local mock of a chat/embedding endpoint.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use treecode::model::NodePath;
use treecode::provider::{
    CallMeta, CompletionProvider, CompletionRequest, Embedder, LiveConfig, LiveProvider, Message, Phase, ProviderError,
};

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    authorization: Option<String>,
    body: serde_json::Value,
}

/// Serves the canned `(status, body)` responses in order, one per connection.
fn serve(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut length = 0;
            let mut authorization = None;
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
                    "authorization" => authorization = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen {
                path: request_line.split_whitespace().nth(1).unwrap().to_string(),
                authorization,
                body: serde_json::from_slice(&buf).unwrap(),
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (format!("http://{addr}/v1"), seen)
}

fn config(endpoint: String) -> LiveConfig {
    LiveConfig { endpoint, embedding_dimension: 3, max_retries: 2, timeout_secs: 5, ..LiveConfig::default() }
}

fn request() -> CompletionRequest {
    CompletionRequest::new(
        CallMeta { path: NodePath::root(), phase: Phase::Plan, round: 0 },
        vec![Message::system("be brief"), Message::user("plan it")],
    )
}

const CHAT_OK: &str =
    r#"{"choices":[{"message":{"role":"assistant","content":"VERDICT: PROCEED"}}],"usage":{"prompt_tokens":12,"completion_tokens":3}}"#;

#[test]
fn chat_completion_round_trip() {
    let (endpoint, seen) = serve(vec![(200, CHAT_OK.into())]);
    let provider = LiveProvider::with_api_key(config(endpoint), Some("sk-test".into())).unwrap();
    let reply = provider.complete(&request()).unwrap();
    assert_eq!(reply.content, "VERDICT: PROCEED");
    assert_eq!((reply.input_tokens, reply.output_tokens), (12, 3));
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/v1/chat/completions");
    assert_eq!(seen[0].authorization.as_deref(), Some("Bearer sk-test"));
    assert_eq!(seen[0].body["temperature"], 0.0);
    assert_eq!(seen[0].body["messages"][1]["content"], "plan it");
    assert_eq!(seen[0].body["messages"][0]["role"], "system");
}

#[test]
fn server_errors_are_retried() {
    let (endpoint, seen) = serve(vec![(503, "{}".into()), (429, "{}".into()), (200, CHAT_OK.into())]);
    let provider = LiveProvider::with_api_key(config(endpoint), None).unwrap();
    assert_eq!(provider.complete(&request()).unwrap().content, "VERDICT: PROCEED");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (endpoint, seen) = serve(vec![(400, r#"{"error":"bad"}"#.into()), (200, CHAT_OK.into())]);
    let provider = LiveProvider::with_api_key(config(endpoint), None).unwrap();
    let err = provider.complete(&request()).unwrap_err();
    assert!(matches!(err, ProviderError::Transport { retryable: false, .. }), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn retries_are_bounded() {
    let (endpoint, _) = serve(vec![(500, "{}".into()), (500, "{}".into()), (500, "{}".into())]);
    let provider = LiveProvider::with_api_key(config(endpoint), None).unwrap();
    assert!(matches!(provider.complete(&request()), Err(ProviderError::Transport { retryable: true, .. })));
}

#[test]
fn embeddings_are_normalized_and_dimension_checked() {
    let (endpoint, seen) = serve(vec![
        (200, r#"{"data":[{"embedding":[3.0,0.0,4.0]}]}"#.into()),
        (200, r#"{"data":[{"embedding":[1.0,2.0]}]}"#.into()),
    ]);
    let provider = LiveProvider::with_api_key(config(endpoint), None).unwrap();
    let v = provider.embed("sort a list").unwrap();
    assert_eq!(v.values(), &[0.6, 0.0, 0.8]);
    assert_eq!(seen.lock().unwrap()[0].path, "/v1/embeddings");
    assert_eq!(
        provider.embed("sort a list").unwrap_err(),
        ProviderError::DimensionMismatch { expected: 3, actual: 2 }
    );
    assert_eq!(provider.embed("  ").unwrap_err(), ProviderError::EmptyInput);
}
