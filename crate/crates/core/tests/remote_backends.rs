//! Wire-level tests for the remote embedding and LM backends against a
//! minimal in-process HTTP double.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use chunkrag_core::{
    Embedder, EmbedderBackend, EmbedderConfig, Error, LmScoringBackend,
};

struct Seen {
    bodies: Mutex<Vec<String>>,
    auth: Mutex<Vec<Option<String>>>,
    hits: AtomicUsize,
    inflight: AtomicUsize,
    high_water: AtomicUsize,
    delay_ms: u64,
}

struct TestServer {
    url: String,
    seen: Arc<Seen>,
}

/// Serves every connection in its own thread; the handler maps
/// (request index, body) to (status, response body).
fn serve<F>(delay_ms: u64, handler: F) -> TestServer
where
    F: Fn(usize, &str) -> (u16, String) + Send + Sync + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Seen {
        bodies: Mutex::new(Vec::new()),
        auth: Mutex::new(Vec::new()),
        hits: AtomicUsize::new(0),
        inflight: AtomicUsize::new(0),
        high_water: AtomicUsize::new(0),
        delay_ms,
    });
    let handler = Arc::new(handler);
    let seen_srv = Arc::clone(&seen);
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { break };
            let seen = Arc::clone(&seen_srv);
            let handler = Arc::clone(&handler);
            std::thread::spawn(move || handle(stream, &seen, &*handler));
        }
    });
    TestServer { url, seen }
}

fn handle(mut stream: TcpStream, seen: &Seen, handler: &dyn Fn(usize, &str) -> (u16, String)) {
    let idx = seen.hits.fetch_add(1, Ordering::SeqCst);
    let cur = seen.inflight.fetch_add(1, Ordering::SeqCst) + 1;
    seen.high_water.fetch_max(cur, Ordering::SeqCst);

    let mut raw = Vec::new();
    let mut buf = [0u8; 1024];
    let header_end = loop {
        let n = stream.read(&mut buf).unwrap_or(0);
        if n == 0 {
            seen.inflight.fetch_sub(1, Ordering::SeqCst);
            return;
        }
        raw.extend_from_slice(&buf[..n]);
        if let Some(pos) = raw.windows(4).position(|w| w == b"\r\n\r\n") {
            break pos + 4;
        }
    };
    let head = String::from_utf8_lossy(&raw[..header_end]).to_string();
    let content_length: usize = head
        .lines()
        .find_map(|l| {
            let (name, value) = l.split_once(':')?;
            name.eq_ignore_ascii_case("content-length").then(|| value.trim().parse().ok())?
        })
        .unwrap_or(0);
    while raw.len() < header_end + content_length {
        let n = stream.read(&mut buf).unwrap_or(0);
        if n == 0 {
            break;
        }
        raw.extend_from_slice(&buf[..n]);
    }
    let body = String::from_utf8_lossy(&raw[header_end..]).to_string();
    let auth = head.lines().find_map(|l| {
        let (name, value) = l.split_once(':')?;
        name.eq_ignore_ascii_case("authorization").then(|| value.trim().to_string())
    });
    seen.bodies.lock().unwrap().push(body.clone());
    seen.auth.lock().unwrap().push(auth);

    if seen.delay_ms > 0 {
        std::thread::sleep(std::time::Duration::from_millis(seen.delay_ms));
    }
    let (status, resp_body) = handler(idx, &body);
    seen.inflight.fetch_sub(1, Ordering::SeqCst);
    let reason = if status == 200 { "OK" } else { "Error" };
    let resp = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{resp_body}",
        resp_body.len()
    );
    let _ = stream.write_all(resp.as_bytes());
    let _ = stream.shutdown(std::net::Shutdown::Both);
}

fn remote_embedder(url: &str, dim: usize, concurrency: usize) -> Embedder {
    Embedder::new(EmbedderConfig {
        backend: EmbedderBackend::Remote,
        dim,
        endpoint: Some(url.to_string()),
        cache_path: None,
        max_concurrent_requests: concurrency,
    })
    .unwrap()
}

fn vectors_json(v: &[f32]) -> String {
    serde_json::json!({ "vectors": [v] }).to_string()
}

#[test]
fn remote_embedder_fetches_and_normalizes_vectors() {
    let srv = serve(0, |_, _| (200, vectors_json(&[3.0, 4.0, 0.0, 0.0])));
    let e = remote_embedder(&srv.url, 4, 1);
    let emb = e.embed_one("alpha beta").unwrap();
    assert!((emb.values()[0] - 0.6).abs() < 1e-6);
    assert!((emb.values()[1] - 0.8).abs() < 1e-6);
    let norm: f32 = emb.values().iter().map(|v| v * v).sum::<f32>().sqrt();
    assert!((norm - 1.0).abs() < 1e-6);
    let bodies = srv.seen.bodies.lock().unwrap();
    assert_eq!(bodies.len(), 1);
    assert!(bodies[0].contains("\"texts\":[\"alpha beta\"]"), "body was {}", bodies[0]);
}

#[test]
fn remote_embedder_rejects_wrong_dimension() {
    let srv = serve(0, |_, _| (200, vectors_json(&[1.0, 2.0, 3.0])));
    let e = remote_embedder(&srv.url, 4, 1);
    match e.embed_one("text") {
        Err(Error::DimensionMismatch { left: 3, right: 4 }) => {}
        other => panic!("expected dimension mismatch, got {other:?}"),
    }
}

#[test]
fn remote_embedder_retries_transient_failures() {
    let srv = serve(0, |idx, _| {
        if idx < 2 {
            (500, String::new())
        } else {
            (200, vectors_json(&[1.0, 1.0]))
        }
    });
    let e = remote_embedder(&srv.url, 2, 1);
    let emb = e.embed_one("retry me").unwrap();
    assert!((emb.values()[0] - emb.values()[1]).abs() < 1e-6);
    assert_eq!(srv.seen.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn remote_embedder_fails_after_exhausting_retries() {
    let srv = serve(0, |_, _| (500, String::new()));
    let e = remote_embedder(&srv.url, 2, 1);
    match e.embed_one("doomed") {
        Err(Error::BackendUnavailable(msg)) => assert!(msg.contains("3"), "message: {msg}"),
        other => panic!("expected backend failure, got {other:?}"),
    }
    assert_eq!(srv.seen.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn remote_embedder_memoizes_repeat_texts() {
    let srv = serve(0, |_, _| (200, vectors_json(&[0.5, 0.5])));
    let e = remote_embedder(&srv.url, 2, 1);
    e.embed_one("same text").unwrap();
    e.embed_one("same text").unwrap();
    e.embed(&["same text", "same text"]).unwrap();
    assert_eq!(srv.seen.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn remote_embedder_bounds_concurrent_requests() {
    let srv = serve(25, |_, body| {
        // Vector encodes the text index so order preservation is checkable.
        let parsed: serde_json::Value = serde_json::from_str(body).unwrap();
        let text = parsed["texts"][0].as_str().unwrap();
        let k: f32 = text.trim_start_matches('t').parse().unwrap();
        (200, vectors_json(&[k + 1.0, 1.0]))
    });
    let e = remote_embedder(&srv.url, 2, 3);
    let texts: Vec<String> = (0..12).map(|i| format!("t{i}")).collect();
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let embs = e.embed(&refs).unwrap();
    for (i, emb) in embs.iter().enumerate() {
        let ratio = emb.values()[0] / emb.values()[1];
        assert!((ratio - (i as f32 + 1.0)).abs() < 1e-4, "slot {i} got ratio {ratio}");
    }
    let hwm = srv.seen.high_water.load(Ordering::SeqCst);
    assert!(hwm <= 3, "high-water mark {hwm} exceeded the cap");
    assert!(hwm >= 2, "requests never overlapped");
    assert_eq!(srv.seen.hits.load(Ordering::SeqCst), 12);
}

#[test]
fn lm_score_is_mean_logprob_exponentiated() {
    let srv = serve(0, |_, _| (200, r#"{"logprobs":[-0.5,-1.5]}"#.to_string()));
    let llm = LmScoringBackend::remote(&srv.url, 4096);
    let p = llm.score_continuation("a prompt", "a target").unwrap();
    assert!((p - (-1.0f64).exp()).abs() < 1e-12);
    let bodies = srv.seen.bodies.lock().unwrap();
    assert!(bodies[0].contains("\"prompt\":\"a prompt\""));
    assert!(bodies[0].contains("\"target\":\"a target\""));
}

#[test]
fn lm_score_clamps_to_at_most_one() {
    let srv = serve(0, |_, _| (200, r#"{"logprobs":[0.5]}"#.to_string()));
    let llm = LmScoringBackend::remote(&srv.url, 4096);
    assert_eq!(llm.score_continuation("p", "t").unwrap(), 1.0);
}

#[test]
fn lm_missing_logprobs_is_a_backend_error() {
    let srv = serve(0, |_, _| (200, r#"{"unexpected":true}"#.to_string()));
    let llm = LmScoringBackend::remote(&srv.url, 4096);
    assert!(matches!(
        llm.score_continuation("p", "t"),
        Err(Error::BackendUnavailable(_))
    ));
}

#[test]
fn lm_generate_returns_completion_text() {
    let srv = serve(0, |_, _| (200, r#"{"text":"(a, rel, b)"}"#.to_string()));
    let llm = LmScoringBackend::remote(&srv.url, 4096);
    assert_eq!(llm.generate("continue this").unwrap(), "(a, rel, b)");
}

#[test]
fn lm_forwards_bearer_token_from_environment() {
    let srv = serve(0, |_, _| (200, r#"{"text":"ok"}"#.to_string()));
    std::env::set_var(chunkrag_core::llm::API_TOKEN_ENV, "sekret-token");
    let llm = LmScoringBackend::remote(&srv.url, 4096);
    llm.generate("hello").unwrap();
    std::env::remove_var(chunkrag_core::llm::API_TOKEN_ENV);
    let auth = srv.seen.auth.lock().unwrap();
    assert_eq!(auth[0].as_deref(), Some("Bearer sekret-token"));
}
