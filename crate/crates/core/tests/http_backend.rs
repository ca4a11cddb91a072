//! The HTTP backend against a throwaway local server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use dsc_core::llmclient::{BackendConfig, BackendKind, CompletionRequest, LlmClient, LlmError};

#[derive(Default)]
struct Stats {
    hits: AtomicUsize,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

/// How the stub answers: (status, body) for the n-th hit (0-based).
type Responder = dyn Fn(usize, &str) -> (u16, String) + Send + Sync;

fn read_request(stream: &mut TcpStream) -> (String, String) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut len = 0usize;
    let mut auth = String::new();
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
            auth = line["authorization:".len()..].trim().to_string();
        }
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).unwrap();
    (auth, String::from_utf8(body).unwrap())
}

fn serve(responder: Arc<Responder>, delay: Duration) -> (String, Arc<Stats>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let stats = Arc::new(Stats::default());
    let s = stats.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let responder = responder.clone();
            let stats = s.clone();
            std::thread::spawn(move || {
                let (auth, body) = read_request(&mut stream);
                let n = stats.hits.fetch_add(1, Ordering::SeqCst);
                let now = stats.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                stats.peak.fetch_max(now, Ordering::SeqCst);
                std::thread::sleep(delay);
                let (status, reply) = if auth == "Bearer test-key" {
                    responder(n, &body)
                } else {
                    (401, "{}".into())
                };
                stats.in_flight.fetch_sub(1, Ordering::SeqCst);
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                    reply.len()
                );
            });
        }
    });
    (url, stats)
}

fn chat_body(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

fn client(url: &str, key_env: &str, max_retries: u32, max_parallel: usize) -> LlmClient {
    std::env::set_var(key_env, "test-key");
    LlmClient::from_config(&BackendConfig {
        kind: BackendKind::Http,
        endpoint: Some(url.to_string()),
        api_key_env: key_env.to_string(),
        timeout_secs: 10.0,
        max_retries,
        max_parallel,
        retry_base_ms: 1,
        retry_max_ms: 5,
        ..BackendConfig::default()
    })
    .unwrap()
}

fn request(id: &str) -> CompletionRequest {
    CompletionRequest {
        id: id.to_string(),
        prompt: format!("prompt for {id}"),
        bundle: None,
    }
}

#[test]
fn extracts_reply_text_and_sends_the_prompt() {
    let (url, _) = serve(
        Arc::new(|_, body: &str| {
            let v: serde_json::Value = serde_json::from_str(body).unwrap();
            let prompt = v["messages"][0]["content"].as_str().unwrap().to_string();
            (200, chat_body(&format!("echo: {prompt}")))
        }),
        Duration::ZERO,
    );
    let c = client(&url, "DSC_TEST_KEY_ECHO", 0, 1);
    let out = c.complete(&request("a")).unwrap();
    assert_eq!(out.text, "echo: prompt for a");
    assert_eq!(out.attempts, 1);
}

#[test]
fn service_unavailable_is_retried() {
    let (url, stats) = serve(
        Arc::new(|n, _: &str| if n < 2 { (503, "busy".into()) } else { (200, chat_body("ok")) }),
        Duration::ZERO,
    );
    let out = client(&url, "DSC_TEST_KEY_RETRY", 3, 1).complete(&request("a")).unwrap();
    assert_eq!(out.text, "ok");
    assert_eq!(out.attempts, 3);
    assert_eq!(stats.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn attempts_stop_after_the_retry_budget() {
    let (url, stats) = serve(Arc::new(|_, _: &str| (500, "down".into())), Duration::ZERO);
    let err = client(&url, "DSC_TEST_KEY_BUDGET", 2, 1).complete(&request("a")).unwrap_err();
    assert!(matches!(err, LlmError::RetriesExhausted { attempts: 3, .. }), "{err:?}");
    assert_eq!(stats.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn unauthorized_is_not_retried() {
    let (url, stats) = serve(Arc::new(|_, _: &str| (401, "no".into())), Duration::ZERO);
    let err = client(&url, "DSC_TEST_KEY_AUTH", 5, 1).complete(&request("a")).unwrap_err();
    assert!(matches!(err, LlmError::Auth(_)), "{err:?}");
    assert_eq!(stats.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn bad_request_and_garbage_bodies_are_not_retried() {
    let (url, stats) = serve(
        Arc::new(|n, _: &str| if n == 0 { (400, "bad".into()) } else { (200, "not json".into()) }),
        Duration::ZERO,
    );
    let c = client(&url, "DSC_TEST_KEY_BAD", 5, 1);
    assert!(matches!(c.complete(&request("a")), Err(LlmError::Rejected { status: 400, .. })));
    assert!(matches!(c.complete(&request("b")), Err(LlmError::Malformed(_))));
    assert_eq!(stats.hits.load(Ordering::SeqCst), 2);
}

#[test]
fn in_flight_requests_respect_max_parallel() {
    let (url, stats) = serve(Arc::new(|_, _: &str| (200, chat_body("fine"))), Duration::from_millis(40));
    let c = client(&url, "DSC_TEST_KEY_PAR", 0, 3);
    let requests: Vec<_> = (0..12).map(|i| request(&format!("r{i:02}"))).collect();
    let results = c.complete_all(&requests);
    assert_eq!(results.len(), 12);
    assert!(results.iter().all(|(_, r)| r.is_ok()));
    let ids: Vec<_> = results.iter().map(|(id, _)| id.clone()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
    let peak = stats.peak.load(Ordering::SeqCst);
    assert!(peak <= 3, "peak concurrency {peak}");
    assert!(peak >= 2, "requests never overlapped");
}
