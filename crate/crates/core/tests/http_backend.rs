mod common;

use std::time::Duration;

use deltaknn::embedding::EmbeddingClient;
use deltaknn::{BackendConfig, BackendKind, ChatRequest, EmbeddingError, GatewayError, Label};

use common::{chat_reply, serve};

fn config(url: &str, max_retries: usize) -> BackendConfig {
    BackendConfig {
        kind: BackendKind::Http,
        base_url: Some(url.to_string()),
        model_name: "test-model".into(),
        max_retries,
        retry_backoff_ms: 1,
        timeout_secs: 5,
        api_key_env: "DELTAKNN_TEST_UNSET_KEY".into(),
        ..Default::default()
    }
}

fn request() -> ChatRequest {
    ChatRequest {
        system: "sys".into(),
        user: "classify this".into(),
        demo_ids: vec![],
        target_id: "t".into(),
        run: 0,
    }
}

#[test]
fn server_errors_are_retried() {
    let server = serve(vec![
        (503, "{}".into()),
        (429, "{}".into()),
        (200, chat_reply("healthy control (H) with probability 0.75")),
    ]);
    let gw = config(&server.url, 2).connect().unwrap();
    let pred = gw.classify(&request()).unwrap();
    assert_eq!(pred.label, Label::Control);
    assert_eq!(pred.confidence, 0.75);
    let bodies = server.bodies.lock().unwrap();
    assert_eq!(bodies.len(), 3);
    assert_eq!(bodies[2]["model"], "test-model");
    assert_eq!(bodies[2]["temperature"], 0.01);
    assert_eq!(server.paths.lock().unwrap()[0], "/v1/chat/completions");
}

#[test]
fn persistent_failure_reports_attempts() {
    let server = serve(vec![(500, "{\"error\": \"boom\"}".into())]);
    let gw = config(&server.url, 2).connect().unwrap();
    match gw.classify(&request()) {
        Err(GatewayError::TransportError { attempts, message }) => {
            assert_eq!(attempts, 3);
            assert!(message.contains("500"), "{message}");
        }
        other => panic!("expected TransportError, got {other:?}"),
    }
}

#[test]
fn client_errors_are_not_retried() {
    let server = serve(vec![
        (400, "bad request".into()),
        (200, chat_reply("(P) 0.9")),
    ]);
    let gw = config(&server.url, 3).connect().unwrap();
    assert!(matches!(
        gw.classify(&request()),
        Err(GatewayError::BackendRefused { status: 400, .. })
    ));
    assert_eq!(server.bodies.lock().unwrap().len(), 1);
}

#[test]
fn unreachable_server_is_a_transport_error() {
    let url = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        format!("http://{}", l.local_addr().unwrap())
    };
    let gw = config(&url, 1).connect().unwrap();
    assert!(matches!(
        gw.classify(&request()),
        Err(GatewayError::TransportError { attempts: 2, .. })
    ));
}

#[test]
fn missing_completions_endpoint_means_no_logprobs() {
    let server = serve(vec![(404, "not found".into())]);
    let gw = config(&server.url, 0).connect().unwrap();
    let d = deltaknn::Document::new("a", "x", Label::Patient);
    let t = deltaknn::Document::new("b", "y", Label::Patient);
    let req = deltaknn::prompt::continuation_request(&d, &t);
    assert!(matches!(
        gw.continuation_logprobs(&req),
        Err(GatewayError::LogprobsUnsupported)
    ));
}

fn embedding_reply(vectors: &[(usize, Vec<f64>)]) -> String {
    let data: Vec<_> = vectors
        .iter()
        .map(|(i, v)| serde_json::json!({"index": i, "embedding": v}))
        .collect();
    serde_json::json!({"data": data}).to_string()
}

#[test]
fn embeddings_are_cached_on_disk() {
    let cache = tempfile::tempdir().unwrap();
    // Second batch arrives out of order; `index` puts it right.
    let server = serve(vec![
        (
            200,
            embedding_reply(&[(0, vec![1.0, 0.0]), (1, vec![0.0, 1.0])]),
        ),
        (
            200,
            embedding_reply(&[(1, vec![0.5, 0.5]), (0, vec![3.0, 4.0])]),
        ),
    ]);
    let client = EmbeddingClient::new(
        &server.url,
        "embed-model",
        cache.path(),
        "DELTAKNN_TEST_UNSET_KEY",
        Duration::from_secs(5),
        0,
    );
    let first = client.embed_texts(&["alpha", "beta"]).unwrap();
    assert_eq!(first, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let again = client.embed_texts(&["beta", "alpha"]).unwrap();
    assert_eq!(again, vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
    assert_eq!(
        server.bodies.lock().unwrap().len(),
        1,
        "cached texts must not be resent"
    );

    let mixed = client.embed_texts(&["alpha", "gamma", "delta"]).unwrap();
    assert_eq!(mixed[1], vec![3.0, 4.0]);
    assert_eq!(mixed[2], vec![0.5, 0.5]);
    let bodies = server.bodies.lock().unwrap();
    assert_eq!(bodies[1]["input"], serde_json::json!(["gamma", "delta"]));
    assert_eq!(server.paths.lock().unwrap()[1], "/v1/embeddings");
    assert_eq!(std::fs::read_dir(cache.path()).unwrap().count(), 4);
}

#[test]
fn embedding_dimension_mismatch_is_reported() {
    let cache = tempfile::tempdir().unwrap();
    let server = serve(vec![(
        200,
        embedding_reply(&[(0, vec![1.0]), (1, vec![1.0, 2.0])]),
    )]);
    let client = EmbeddingClient::new(
        &server.url,
        "m",
        cache.path(),
        "DELTAKNN_TEST_UNSET_KEY",
        Duration::from_secs(5),
        0,
    );
    assert!(matches!(
        client.embed_texts(&["a", "b"]),
        Err(EmbeddingError::DimensionMismatch { .. })
    ));
}
