mod common;

use std::io::Write;

use common::StubServer;
use demoval::backends::{evaluate_prompt, LlmBackendSpec, LlmClient, PerExampleEvaluator, ResponseCache};
use demoval::{Error, LabeledExample, TaskSpec};

fn spec(stub: &StubServer, cache: Option<&std::path::Path>) -> LlmBackendSpec {
    let mut s = LlmBackendSpec::new(stub.base_url.clone(), "stub-model");
    s.initial_backoff_ms = 5;
    s.max_backoff_ms = 20;
    s.max_retries = 3;
    s.timeout_secs = 10;
    s.cache_path = cache.map(|p| p.to_path_buf());
    s
}

fn task() -> TaskSpec {
    TaskSpec::new("Classify.", vec!["POS".into(), "NEG".into()]).unwrap()
}

fn dev() -> Vec<LabeledExample> {
    (0..6)
        .map(|i| LabeledExample::new(format!("q{i}"), format!("text {i}"), if i % 3 == 0 { "NEG" } else { "POS" }))
        .collect()
}

#[test]
fn echo_and_bearer_auth() {
    let stub = StubServer::constant("POS");
    let client = LlmClient::new(spec(&stub, None), Some("sk-test".into())).unwrap();
    assert_eq!(client.predict_text("hello").unwrap(), "POS");
    assert_eq!(stub.auth_headers(), vec!["Bearer sk-test"]);
}

#[test]
fn retries_after_429_then_succeeds() {
    let stub = StubServer::constant("POS");
    stub.inject(429, r#"{"error":"slow down"}"#);
    stub.inject(503, "");
    let client = LlmClient::new(spec(&stub, None), None).unwrap();
    assert_eq!(client.predict_text("p").unwrap(), "POS");
    assert_eq!(stub.requests(), 3);
    assert_eq!(client.network_calls(), 3);
}

#[test]
fn gives_up_after_max_retries() {
    let stub = StubServer::constant("POS");
    for _ in 0..4 {
        stub.inject(500, "");
    }
    let client = LlmClient::new(spec(&stub, None), None).unwrap();
    assert!(matches!(client.predict_text("p"), Err(Error::Backend(_))));
    assert_eq!(stub.requests(), 4);
}

#[test]
fn client_errors_are_not_retried_and_bad_json_is_protocol() {
    let stub = StubServer::constant("POS");
    stub.inject(400, r#"{"error":"bad"}"#);
    let client = LlmClient::new(spec(&stub, None), None).unwrap();
    assert!(matches!(client.predict_text("p"), Err(Error::Backend(_))));
    assert_eq!(stub.requests(), 1);
    stub.inject(200, "not json");
    assert!(matches!(client.predict_text("p"), Err(Error::Protocol(_))));
}

#[test]
fn identical_calls_hit_the_network_once() {
    let dir = tempfile::tempdir().unwrap();
    let stub = StubServer::constant("NEG");
    let client = LlmClient::new(spec(&stub, Some(&dir.path().join("c.jsonl"))), Some("sk-secret".into())).unwrap();
    assert_eq!(client.predict_text("same").unwrap(), "NEG");
    assert_eq!(client.predict_text("same").unwrap(), "NEG");
    assert_eq!(stub.requests(), 1);
    let on_disk = std::fs::read_to_string(dir.path().join("c.jsonl")).unwrap();
    assert!(!on_disk.contains("sk-secret"));
}

#[test]
fn second_evaluation_is_served_from_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache.jsonl");
    let stub = StubServer::start(|prompt| if prompt.ends_with("text 0\nLabel:") { "NEG".into() } else { "POS".into() });
    let first = {
        let client = LlmClient::new(spec(&stub, Some(&cache)), None).unwrap();
        let eval = PerExampleEvaluator::new(client);
        evaluate_prompt(&eval, &task(), &[], &dev()).unwrap()
    };
    let calls = stub.requests();
    assert_eq!(calls, 6);
    let client = LlmClient::new(spec(&stub, Some(&cache)), None).unwrap();
    let eval = PerExampleEvaluator::new(client);
    let second = evaluate_prompt(&eval, &task(), &[], &dev()).unwrap();
    assert_eq!(first, second);
    assert_eq!(stub.requests(), calls);
    assert_eq!(eval.predictor().network_calls(), 0);
    // q0 and q3 are NEG; only q0 is answered NEG
    assert!((first.score - 5.0 / 6.0).abs() < 1e-12);
}

#[test]
fn corrupt_trailing_line_is_recovered() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache.jsonl");
    let stub = StubServer::constant("POS");
    {
        let client = LlmClient::new(spec(&stub, Some(&cache)), None).unwrap();
        client.predict_text("a").unwrap();
        client.predict_text("b").unwrap();
    }
    let mut f = std::fs::OpenOptions::new().append(true).open(&cache).unwrap();
    f.write_all(br#"{"key":"torn","respo"#).unwrap();
    drop(f);

    let client = LlmClient::new(spec(&stub, Some(&cache)), None).unwrap();
    assert_eq!(client.cache().unwrap().len(), 2);
    assert!(client.cache().unwrap().stats().unwrap().recovered_bytes > 0);
    assert_eq!(client.predict_text("a").unwrap(), "POS");
    assert_eq!(client.network_calls(), 0);
    client.predict_text("c").unwrap();
    assert_eq!(ResponseCache::open(&cache).unwrap().len(), 3);
}

#[test]
fn refusals_are_counted() {
    let stub = StubServer::constant("I cannot answer that");
    let client = LlmClient::new(spec(&stub, None), None).unwrap();
    let out = evaluate_prompt(&PerExampleEvaluator::new(client), &task(), &[], &dev()).unwrap();
    assert_eq!(out.refusals, 6);
    assert_eq!(out.score, 0.0);
}
