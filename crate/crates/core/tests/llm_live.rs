use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;

use pdesynth_core::llm::{Backend, CallInfo, Conversation, GenParams, LiveBackend, LiveConfig, LlmError, Purpose};

/// Serves the given (status, body) pairs, one per connection, and reports each request body.
fn stub(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<String>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in replies {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            let _ = tx.send(String::from_utf8(buf).unwrap());
            let head = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                body.len()
            );
            stream.write_all(head.as_bytes()).unwrap();
            stream.write_all(body.as_bytes()).unwrap();
        }
    });
    (url, rx)
}

fn backend(url: String, var: &str) -> LiveBackend {
    std::env::set_var(var, "secret");
    LiveBackend::from_env(LiveConfig { base_url: url, api_key_env: var.into(), max_attempts: 3, backoff_ms: 5, timeout_s: 10 })
        .unwrap()
}

const OK: &str = r#"{"choices":[{"message":{"role":"assistant","content":"fixed body"}}],"usage":{"prompt_tokens":12,"completion_tokens":3}}"#;

#[test]
fn stub_reply_and_usage_are_parsed() {
    let (url, requests) = stub(vec![(200, OK.into())]);
    let mut live = backend(url, "PDESYNTH_TEST_KEY_A");
    let req = Conversation::new("model-x", GenParams { temperature: 0.3, max_tokens: 64 }).user("hi").request();
    let out = live.complete(CallInfo { seq: 0, purpose: Purpose::Genesis }, &req).unwrap();
    assert_eq!(out.text, "fixed body");
    assert_eq!((out.usage.input_tokens, out.usage.output_tokens), (12, 3));
    let sent: serde_json::Value = serde_json::from_str(&requests.recv().unwrap()).unwrap();
    assert_eq!(sent["model"], "model-x");
    assert_eq!(sent["messages"][0]["role"], "user");
    assert_eq!(sent["max_tokens"], 64);
}

#[test]
fn transient_failures_are_retried() {
    let (url, _) = stub(vec![(503, "busy".into()), (429, "slow".into()), (200, OK.into())]);
    let mut live = backend(url, "PDESYNTH_TEST_KEY_B");
    let req = Conversation::new("m", GenParams::default()).user("hi").request();
    assert_eq!(live.complete(CallInfo { seq: 0, purpose: Purpose::Debug }, &req).unwrap().text, "fixed body");
}

#[test]
fn retries_are_capped() {
    let (url, _) = stub(vec![(500, "a".into()), (500, "b".into()), (500, "c".into())]);
    let mut live = backend(url, "PDESYNTH_TEST_KEY_C");
    let req = Conversation::new("m", GenParams::default()).user("hi").request();
    let err = live.complete(CallInfo { seq: 0, purpose: Purpose::Debug }, &req).unwrap_err();
    assert!(matches!(err, LlmError::Transport { attempts: 3, .. }), "{err}");
}

#[test]
fn client_errors_are_not_retried() {
    let (url, _) = stub(vec![(401, "denied".into())]);
    let mut live = backend(url, "PDESYNTH_TEST_KEY_D");
    let req = Conversation::new("m", GenParams::default()).user("hi").request();
    let err = live.complete(CallInfo { seq: 0, purpose: Purpose::Debug }, &req).unwrap_err();
    assert_eq!(err, LlmError::Http { status: 401, body: "denied".into() });
}

#[test]
fn missing_credential() {
    let cfg = LiveConfig {
        base_url: "http://127.0.0.1:9".into(),
        api_key_env: "PDESYNTH_TEST_KEY_UNSET".into(),
        max_attempts: 1,
        backoff_ms: 1,
        timeout_s: 1,
    };
    assert!(matches!(LiveBackend::from_env(cfg), Err(LlmError::MissingCredential(_))));
}
