use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use autofuzz_core::llm::{EndpointKind, RetryPolicy};
use autofuzz_core::{Gateway, LlmError, ModelEndpoint, Prompt, SamplingParams};
use serde_json::Value;

struct Seen {
    path: String,
    auth: Option<String>,
    body: Value,
}

/// Serves one canned `(status, body)` per connection, in order.
fn serve(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<Seen>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
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
            let mut raw = vec![0; length];
            reader.read_exact(&mut raw).unwrap();
            tx.send(Seen {
                path,
                auth,
                body: serde_json::from_slice(&raw).unwrap(),
            })
            .unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (format!("http://{addr}/v1"), rx)
}

fn endpoint(kind: EndpointKind, base_url: String, token_env: Option<&str>) -> ModelEndpoint {
    ModelEndpoint {
        kind,
        base_url,
        model_name: "m".into(),
        auth_token_env: token_env.map(str::to_string),
        request_timeout: Duration::from_secs(5),
        context_tokens: None,
        script: None,
    }
}

fn fast_retry(n: u32) -> RetryPolicy {
    RetryPolicy {
        max_retries: n,
        initial_backoff: Duration::from_millis(1),
    }
}

#[test]
fn completion_endpoint_retries_server_errors_and_fills_batch() {
    std::env::set_var("AUTOFUZZ_HTTP_TEST_TOKEN", "secret-token");
    let (url, seen) = serve(vec![
        (503, "overloaded".into()),
        (200, r#"{"choices":[{"text":"a","finish_reason":"stop"}]}"#.into()),
        (200, r#"{"choices":[{"text":"b","finish_reason":"length"}]}"#.into()),
    ]);
    let gateway = Gateway::from_endpoint(endpoint(
        EndpointKind::HttpCompletion,
        url,
        Some("AUTOFUZZ_HTTP_TEST_TOKEN"),
    ))
    .unwrap()
    .with_retry(fast_retry(2));
    let out = gateway
        .sample(&Prompt::Text("P".into()), &SamplingParams::generation().with_batch_size(2))
        .unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(out[0].text, "a");
    assert!(!out[0].hit_length_limit);
    assert!(out[1].hit_length_limit);

    let first = seen.recv().unwrap();
    assert_eq!(first.path, "/v1/completions");
    assert_eq!(first.auth.as_deref(), Some("Bearer secret-token"));
    assert_eq!(first.body["prompt"], "P");
    assert_eq!(first.body["n"], 2);
    assert_eq!(first.body["max_tokens"], 1024);
    assert_eq!(first.body["temperature"], 1.0);
    let _retry = seen.recv().unwrap();
    let top_up = seen.recv().unwrap();
    assert_eq!(top_up.body["n"], 1);
    // The recorded request log never carries the token.
    let log = serde_json::to_string(&gateway.requests()).unwrap();
    assert!(!log.contains("secret-token"));
}

#[test]
fn chat_endpoint_sends_roles() {
    let (url, seen) = serve(vec![(
        200,
        r#"{"choices":[{"message":{"role":"assistant","content":"summary"}}]}"#.into(),
    )]);
    let gateway = Gateway::from_endpoint(endpoint(EndpointKind::HttpChat, url, None)).unwrap();
    let prompt = Prompt::Chat {
        system: "sys".into(),
        user: "docs".into(),
    };
    let out = gateway.sample(&prompt, &SamplingParams::distillation()).unwrap();
    assert_eq!(out[0].text, "summary");
    let req = seen.recv().unwrap();
    assert_eq!(req.path, "/v1/chat/completions");
    assert_eq!(req.auth, None);
    assert_eq!(req.body["messages"][0]["role"], "system");
    assert_eq!(req.body["messages"][1]["content"], "docs");
    assert_eq!(req.body["max_tokens"], 500);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = serve(vec![(400, "bad request".into()), (200, r#"{"choices":[]}"#.into())]);
    let gateway = Gateway::from_endpoint(endpoint(EndpointKind::HttpCompletion, url, None))
        .unwrap()
        .with_retry(fast_retry(3));
    let err = gateway
        .sample(&Prompt::Text("P".into()), &SamplingParams::generation().with_batch_size(1))
        .unwrap_err();
    assert!(matches!(err, LlmError::Http { status: 400, .. }), "{err}");
    seen.recv().unwrap();
    assert!(seen.recv_timeout(Duration::from_millis(100)).is_err());
}

#[test]
fn retries_give_up_eventually() {
    let (url, _seen) = serve(vec![(500, "x".into()), (500, "y".into())]);
    let gateway = Gateway::from_endpoint(endpoint(EndpointKind::HttpCompletion, url, None))
        .unwrap()
        .with_retry(fast_retry(1));
    let err = gateway
        .sample(&Prompt::Text("P".into()), &SamplingParams::generation().with_batch_size(1))
        .unwrap_err();
    assert!(matches!(err, LlmError::Http { status: 500, .. }), "{err}");
}

#[test]
fn unreachable_server_is_a_network_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let gateway = Gateway::from_endpoint(endpoint(EndpointKind::HttpCompletion, url, None))
        .unwrap()
        .with_retry(RetryPolicy::none());
    let err = gateway
        .sample(&Prompt::Text("P".into()), &SamplingParams::generation().with_batch_size(1))
        .unwrap_err();
    assert!(err.is_retryable(), "{err}");
}
