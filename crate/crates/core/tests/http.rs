//! HTTP clients against a throwaway local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use schemex::gateway::{Gateway, GatewayError, HttpBackend, ProfileConfig, PromptRequest};
use schemex::store::{Embedder, HttpEmbedder, HttpEmbedderConfig, StoreError};
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Seen {
    headers: Vec<String>,
    body: Value,
}

/// Serve one scripted `(status, body)` reply per connection, in order.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>, JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let handle = std::thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut headers = Vec::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end().to_string();
                if line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                headers.push(line);
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen {
                headers,
                body: serde_json::from_slice(&buf).unwrap_or(Value::Null),
            });
            let mut stream = reader.into_inner();
            write!(
                stream,
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, seen, handle)
}

fn gateway(url: &str, key_env: Option<&str>) -> Gateway {
    let mut cfg = ProfileConfig::http(url, "m1");
    cfg.api_key_env = key_env.map(str::to_string);
    cfg.max_retries = 2;
    Gateway::builder()
        .profile("remote", cfg, Arc::new(HttpBackend))
        .sleeper(|_| {})
        .build()
}

#[test]
fn completion_round_trip_with_key() {
    let (url, seen, h) = serve(vec![(200, r#"{"text":"hello","usage":{"input_tokens":3,"output_tokens":1}}"#.into())]);
    std::env::set_var("SCHEMEX_TEST_KEY", "secret");
    let gw = gateway(&url, Some("SCHEMEX_TEST_KEY"));
    let resp = gw.complete(&PromptRequest::new("remote", "sys", "hi")).unwrap();
    h.join().unwrap();
    assert_eq!(resp.text, "hello");
    assert_eq!(resp.usage.output_tokens, 1);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].body["model"], "m1");
    assert_eq!(seen[0].body["user"], "hi");
    assert!(seen[0].headers.iter().any(|l| l == "authorization: Bearer secret" || l == "Authorization: Bearer secret"));
}

#[test]
fn server_errors_are_retried() {
    let (url, seen, h) = serve(vec![
        (503, "{}".into()),
        (429, "{}".into()),
        (200, r#"{"text":"ok"}"#.into()),
    ]);
    let gw = gateway(&url, None);
    let resp = gw.complete(&PromptRequest::new("remote", "sys", "hi")).unwrap();
    h.join().unwrap();
    assert_eq!(resp.text, "ok");
    assert_eq!(seen.lock().unwrap().len(), 3);
    assert_eq!(gw.audit().last().unwrap().retry_count, 2);
}

#[test]
fn auth_failure_is_not_retried() {
    let (url, seen, h) = serve(vec![(401, "{}".into())]);
    let gw = gateway(&url, None);
    let err = gw.complete(&PromptRequest::new("remote", "sys", "hi")).unwrap_err();
    h.join().unwrap();
    assert!(matches!(err, GatewayError::AuthFailure(_)), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

fn embedder(url: &str) -> HttpEmbedder {
    HttpEmbedder::new(HttpEmbedderConfig {
        endpoint: url.to_string(),
        model: "e1".into(),
        dimension: 3,
        api_key_env: None,
        max_retries: 1,
        timeout_ms: 5_000,
        backoff_base_ms: 1,
    })
}

#[test]
fn embedder_normalizes_service_vectors() {
    let (url, seen, h) = serve(vec![(200, json!({"vectors": [[3.0, 4.0, 0.0], [0.0, 0.0, 2.0]]}).to_string())]);
    let e = embedder(&url);
    let v = e.embed_batch(&["a".into(), "b".into()]).unwrap();
    h.join().unwrap();
    assert_eq!(v[0].values(), &[0.6, 0.8, 0.0]);
    assert_eq!(v[1].values(), &[0.0, 0.0, 1.0]);
    assert_eq!(seen.lock().unwrap()[0].body["texts"], json!(["a", "b"]));
    assert_eq!(e.tag(), "http:e1:3");
}

#[test]
fn embedder_rejects_wrong_dimension_and_gives_up_after_retries() {
    let (url, _, h) = serve(vec![(200, json!({"vectors": [[1.0, 0.0]]}).to_string())]);
    let err = embedder(&url).embed("a").unwrap_err();
    h.join().unwrap();
    assert!(matches!(err, StoreError::DimensionMismatch { expected: 3, got: 2 }));

    let (url, seen, h) = serve(vec![(500, "{}".into()), (500, "{}".into())]);
    let err = embedder(&url).embed("a").unwrap_err();
    h.join().unwrap();
    assert!(matches!(err, StoreError::ServiceUnavailable(_)));
    assert_eq!(seen.lock().unwrap().len(), 2);
}
