//! The HTTP backend against a scripted local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use bugpilot::model_client::{ask, default_tokenizer, LiveBackend, LiveConfig, ModelError, SamplingParams};

struct Seen {
    bodies: Vec<serde_json::Value>,
    auth: Vec<Option<String>>,
}

/// Serves one canned `(status, body)` per connection, in order.
fn serve(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Seen>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Seen { bodies: Vec::new(), auth: Vec::new() }));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            let mut auth = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = Some(line["authorization:".len()..].trim().to_string());
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            {
                let mut s = log.lock().unwrap();
                s.bodies.push(serde_json::from_slice(&buf).unwrap());
                s.auth.push(auth);
            }
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

fn backend(base_url: String, retries: u32) -> LiveBackend {
    LiveBackend::new(
        LiveConfig {
            base_url,
            model: "test-model".into(),
            api_key: Some("sk-test".into()),
            context_window: 10_000,
            max_retries: retries,
            initial_backoff_ms: 1,
            max_backoff_ms: 5,
            request_timeout_ms: 5_000,
        },
        default_tokenizer(),
    )
}

const OK: &str = r#"{"choices":[{"message":{"role":"assistant","content":"hello"}}],"usage":{"prompt_tokens":12,"completion_tokens":1}}"#;

#[test]
fn transient_failures_are_retried() {
    let (url, seen) = serve(vec![(503, "busy".into()), (429, "slow down".into()), (200, OK.into())]);
    let params = SamplingParams { temperature: 0.5, max_tokens: None, seed: 9 };
    let r = ask(&backend(url, 3), "e", "sys", "hi", &params).unwrap();
    assert_eq!((r.assistant_content.as_str(), r.prompt_tokens, r.completion_tokens), ("hello", 12, 1));
    let s = seen.lock().unwrap();
    assert_eq!(s.bodies.len(), 3);
    assert!(s.bodies.windows(2).all(|w| w[0] == w[1]), "retries resend the same body");
    assert_eq!(s.bodies[0]["model"], "test-model");
    assert_eq!(s.bodies[0]["seed"], 9);
    assert_eq!(s.bodies[0]["messages"][1]["content"], "hi");
    assert_eq!(s.auth[0].as_deref(), Some("Bearer sk-test"));
}

#[test]
fn retries_run_out() {
    let (url, seen) = serve(vec![(500, "a".into()), (502, "b".into())]);
    let err = ask(&backend(url, 1), "e", "sys", "hi", &SamplingParams::default()).unwrap_err();
    assert!(matches!(err, ModelError::BackendExhausted { attempts: 2, ref last_error } if last_error.contains("502")));
    assert_eq!(seen.lock().unwrap().bodies.len(), 2);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = serve(vec![(400, "bad request".into()), (200, OK.into())]);
    let err = ask(&backend(url, 3), "e", "sys", "hi", &SamplingParams::default()).unwrap_err();
    assert!(matches!(err, ModelError::Rejected { status: 400, .. }));
    assert_eq!(seen.lock().unwrap().bodies.len(), 1);
}
