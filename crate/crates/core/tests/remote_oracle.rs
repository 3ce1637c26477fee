//! Remote adapter against a local mock chat-completion server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;

use seqsel::oracle::{CachedOracle, Oracle, PromptTemplate, RemoteConfig, RemoteOracle};
use seqsel::{CandidatePool, Example, ExampleId, ExampleSequence, Query};

struct Request {
    head: String,
    body: serde_json::Value,
}

/// Serves one canned `(status, body)` reply per connection and reports each request.
fn mock(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<Request>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, reply) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                head.push_str(&line);
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            tx.send(Request {
                head,
                body: serde_json::from_slice(&body).unwrap(),
            })
            .unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            )
            .unwrap();
        }
    });
    (url, rx)
}

fn completion(text: &str) -> String {
    serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": text}}],
        "usage": {"total_tokens": 17},
    })
    .to_string()
}

fn fixture() -> (CandidatePool, Query, ExampleSequence) {
    let pool = CandidatePool::new(vec![Example {
        id: ExampleId(0),
        input: "2+2".into(),
        label: "4".into(),
        skills: vec![],
    }])
    .unwrap();
    let query = Query {
        id: ExampleId(1),
        input: "1+1".into(),
        label: Some("2".into()),
        skills: vec![],
    };
    let seq = ExampleSequence::from_ids(&[ExampleId(0)], 7).unwrap();
    (pool, query, seq)
}

fn config(url: String, key_env: &str) -> RemoteConfig {
    RemoteConfig {
        base_url: url,
        api_key_env: key_env.into(),
        max_attempts: 3,
        retry_backoff_ms: 1,
        timeout_secs: 10,
        ..RemoteConfig::default()
    }
}

#[test]
fn retries_server_errors_then_scores_by_exact_match() {
    std::env::set_var("SEQSEL_MOCK_TOKEN", "secret");
    let (url, rx) = mock(vec![(503, "{}".into()), (200, completion(" 2 "))]);
    let oracle = RemoteOracle::new(config(url, "SEQSEL_MOCK_TOKEN"), PromptTemplate::default()).unwrap();
    let (pool, query, seq) = fixture();
    let verdict = oracle.evaluate(&query, &seq, &pool).unwrap();
    assert_eq!(verdict.quality, 1.0);
    assert_eq!(verdict.cost_hint, Some(17));
    let first = rx.recv().unwrap();
    assert!(first.head.starts_with("POST /v1/chat/completions"));
    assert!(first.head.to_ascii_lowercase().contains("authorization: bearer secret"));
    assert_eq!(first.body["temperature"], 0);
    assert_eq!(first.body["messages"][0]["content"], "2+2 → 4\n1+1 →");
    rx.recv().unwrap();
}

#[test]
fn client_errors_are_not_retried() {
    let (url, rx) = mock(vec![(400, "{\"error\":\"bad\"}".into())]);
    let oracle = RemoteOracle::new(config(url, "SEQSEL_MOCK_UNSET"), PromptTemplate::default()).unwrap();
    let (pool, query, seq) = fixture();
    let err = oracle.evaluate(&query, &seq, &pool).unwrap_err();
    assert!(err.to_string().contains("1 attempt"), "{err}");
    let req = rx.recv().unwrap();
    assert!(!req.head.to_ascii_lowercase().contains("authorization"));
}

#[test]
fn wrong_answers_score_zero_and_the_cache_avoids_repeat_calls() {
    let (url, rx) = mock(vec![(200, completion("5"))]);
    let oracle = CachedOracle::in_memory(
        RemoteOracle::new(config(url, "SEQSEL_MOCK_UNSET"), PromptTemplate::default()).unwrap(),
    );
    let (pool, query, seq) = fixture();
    assert_eq!(oracle.evaluate(&query, &seq, &pool).unwrap().quality, 0.0);
    assert_eq!(oracle.evaluate(&query, &seq, &pool).unwrap().quality, 0.0);
    rx.recv().unwrap();
    assert!(rx.try_recv().is_err());
}
