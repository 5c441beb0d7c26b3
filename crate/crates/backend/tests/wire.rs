//! Wire conformance against a stub HTTP server replaying recorded fixtures.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use axum::extract::State;
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

use obeval_backend::{BackendConfig, BackendError, GenerationParams, HttpBackend, ModelBackend, RetryPolicy};

/// ln(0.8) and ln(0.2), full precision; the fixtures below are built from
/// these so the reconstructed probabilities are exactly exp(logprob).
const LP_08: f64 = -0.2231435513142097;
const LP_02: f64 = -1.6094379124341003;

#[derive(Clone)]
struct StubState {
    hits: Arc<AtomicU32>,
    /// How many requests to fail with 500 before succeeding.
    fail_first: u32,
    /// Delay every response by this much, to trip client timeouts.
    delay_ms: u64,
    response: Arc<Value>,
}

async fn completions(State(state): State<StubState>, Json(request): Json<Value>) -> axum::response::Response {
    use axum::response::IntoResponse;
    let hit = state.hits.fetch_add(1, Ordering::SeqCst);
    if state.delay_ms > 0 {
        tokio::time::sleep(std::time::Duration::from_millis(state.delay_ms)).await;
    }
    if hit < state.fail_first {
        return (axum::http::StatusCode::INTERNAL_SERVER_ERROR, "transient").into_response();
    }
    // Echo-mode fixture contract: the stub replays the recorded body
    // regardless of the prompt, but asserts the request shape.
    assert!(request.get("model").is_some());
    assert!(request.get("prompt").is_some());
    Json(state.response.as_ref().clone()).into_response()
}

async fn start_stub(state: StubState) -> SocketAddr {
    let app = Router::new().route("/v1/completions", post(completions)).with_state(state);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, app).await.unwrap();
    });
    addr
}

fn config(addr: SocketAddr) -> BackendConfig {
    BackendConfig {
        endpoint: format!("http://{addr}/v1/completions"),
        model: "stub-model".to_string(),
        api_key_env: None,
        top_k: 5,
        max_inflight: 2,
        timeout_secs: 2.0,
        retry: RetryPolicy {
            max_attempts: 3,
            backoff_base_ms: 10,
        },
    }
}

/// A recorded scoring response: prompt "P: " echoed, then the continuation
/// "Paris" as tokens ["Par", "is"], each with logprob ln(0.8) and one
/// alternative at ln(0.2).
fn scoring_fixture(prompt: &str) -> Value {
    let p = prompt.len();
    json!({
        "choices": [{
            "text": format!("{prompt}Paris"),
            "logprobs": {
                "tokens": ["P:", " q", "Par", "is"],
                "token_logprobs": [Value::Null, -2.5, LP_08, LP_08],
                "top_logprobs": [
                    Value::Null,
                    Value::Null,
                    {"Par": LP_08, "Lon": LP_02},
                    {"is": LP_08, "on": LP_02}
                ],
                "text_offset": [0, 2, p, p + 3]
            },
            "finish_reason": "length"
        }]
    })
}

fn state(response: Value) -> StubState {
    StubState {
        hits: Arc::new(AtomicU32::new(0)),
        fail_first: 0,
        delay_ms: 0,
        response: Arc::new(response),
    }
}

#[tokio::test]
async fn score_answer_reconstructs_fixture_probabilities() {
    let prompt = "P: q";
    let addr = start_stub(state(scoring_fixture(prompt))).await;
    let backend = HttpBackend::new(config(addr)).unwrap();
    let trace = backend.score_answer(prompt, "Paris").await.unwrap();

    assert_eq!(trace.answer_tokens(), ["Par", "is"]);
    for step in trace.steps() {
        assert!((step.forced_prob() - LP_08.exp()).abs() < 1e-9);
        assert_eq!(step.alternatives().len(), 1);
        let (_, alt) = step.alternatives().iter().next().unwrap();
        assert!((alt - LP_02.exp()).abs() < 1e-9);
        // 0.8 + 0.2 leaves essentially no residual.
        assert!(step.residual() < 1e-9);
    }
}

#[tokio::test]
async fn scoring_retries_transient_failures_then_succeeds() {
    let prompt = "P: q";
    let mut stub = state(scoring_fixture(prompt));
    stub.fail_first = 2;
    let hits = Arc::clone(&stub.hits);
    let addr = start_stub(stub).await;
    let backend = HttpBackend::new(config(addr)).unwrap();
    let trace = backend.score_answer(prompt, "Paris").await.unwrap();
    assert_eq!(trace.answer_tokens().len(), 2);
    // Two failures plus the success: exactly max_attempts requests.
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[tokio::test]
async fn scoring_gives_up_after_max_attempts() {
    let prompt = "P: q";
    let mut stub = state(scoring_fixture(prompt));
    stub.fail_first = u32::MAX;
    let hits = Arc::clone(&stub.hits);
    let addr = start_stub(stub).await;
    let backend = HttpBackend::new(config(addr)).unwrap();
    let err = backend.score_answer(prompt, "Paris").await.unwrap_err();
    match err {
        BackendError::Transport { attempts, .. } => assert_eq!(attempts, 3),
        other => panic!("expected transport error, got {other:?}"),
    }
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[tokio::test]
async fn client_timeout_counts_as_transient_and_is_retried() {
    let prompt = "P: q";
    let mut stub = state(scoring_fixture(prompt));
    stub.delay_ms = 400;
    let hits = Arc::clone(&stub.hits);
    let addr = start_stub(stub).await;
    let mut cfg = config(addr);
    cfg.timeout_secs = 0.1;
    cfg.retry.max_attempts = 2;
    let backend = HttpBackend::new(cfg).unwrap();
    let err = backend.score_answer(prompt, "Paris").await.unwrap_err();
    assert!(matches!(err, BackendError::Transport { attempts: 2, .. }));
    assert_eq!(hits.load(Ordering::SeqCst), 2);
}

#[tokio::test]
async fn non_retryable_status_fails_immediately() {
    let prompt = "P: q";
    let addr = start_stub(StubState {
        hits: Arc::new(AtomicU32::new(0)),
        fail_first: 0,
        delay_ms: 0,
        response: Arc::new(json!({"error": "bad request"})),
    })
    .await;
    // The stub always answers 200 here, so simulate a 404 by pointing at a
    // missing route instead.
    let mut cfg = config(addr);
    cfg.endpoint = format!("http://{addr}/nope");
    let backend = HttpBackend::new(cfg).unwrap();
    let err = backend.score_answer(prompt, "Paris").await.unwrap_err();
    assert!(matches!(err, BackendError::Http { status: 404, .. }));
}

#[tokio::test]
async fn missing_logprobs_is_a_capability_error() {
    let addr = start_stub(state(json!({
        "choices": [{"text": "whatever", "finish_reason": "stop"}]
    })))
    .await;
    let backend = HttpBackend::new(config(addr)).unwrap();
    let err = backend.score_answer("P: q", "Paris").await.unwrap_err();
    assert!(matches!(err, BackendError::Capability(_)));
}

#[tokio::test]
async fn missing_forced_logprob_is_a_protocol_error() {
    let prompt = "P: q";
    let mut fixture = scoring_fixture(prompt);
    fixture["choices"][0]["logprobs"]["token_logprobs"][2] = Value::Null;
    let addr = start_stub(state(fixture)).await;
    let backend = HttpBackend::new(config(addr)).unwrap();
    let err = backend.score_answer(prompt, "Paris").await.unwrap_err();
    assert!(matches!(err, BackendError::Protocol(_)));
}

#[tokio::test]
async fn straddling_tokenization_is_a_protocol_error() {
    let prompt = "P: q";
    let mut fixture = scoring_fixture(prompt);
    // Shift the continuation start into the prompt region.
    fixture["choices"][0]["logprobs"]["text_offset"] = json!([0, 2, prompt.len() - 1, prompt.len() + 2]);
    let addr = start_stub(state(fixture)).await;
    let backend = HttpBackend::new(config(addr)).unwrap();
    let err = backend.score_answer(prompt, "Paris").await.unwrap_err();
    assert!(matches!(err, BackendError::Protocol(_)));
}

#[tokio::test]
async fn generation_applies_stop_and_trims() {
    let addr = start_stub(state(json!({
        "choices": [{
            "text": "Answer: Paris\nQuestion: next",
            "logprobs": {
                "tokens": ["Answer:", " Paris", "\nQuestion:", " next"],
                "token_logprobs": [-0.1, LP_08, -0.5, -0.5],
                "text_offset": [0, 7, 13, 23]
            },
            "finish_reason": "stop"
        }]
    })))
    .await;
    let backend = HttpBackend::new(config(addr)).unwrap();
    let params = GenerationParams::new(16)
        .unwrap()
        .with_stop(vec!["\n".to_string()]);
    let out = backend.generate("prompt", &params).await.unwrap();
    assert_eq!(out.text, "Answer: Paris");
    // Chosen-token probabilities for the kept tokens only.
    assert_eq!(out.token_probs.len(), 2);
    assert!((out.token_probs[1] - 0.8).abs() < 1e-9);
}

#[tokio::test]
async fn empty_generation_is_an_error() {
    let addr = start_stub(state(json!({
        "choices": [{"text": "   ", "finish_reason": "stop"}]
    })))
    .await;
    let backend = HttpBackend::new(config(addr)).unwrap();
    let err = backend
        .generate("prompt", &GenerationParams::new(4).unwrap())
        .await
        .unwrap_err();
    assert!(matches!(err, BackendError::EmptyGeneration));
}

#[tokio::test]
async fn single_token_cap_emits_one_token() {
    // The stub replays a single-token completion, as an endpoint honoring
    // max_tokens = 1 would.
    let addr = start_stub(state(json!({
        "choices": [{
            "text": "Paris",
            "logprobs": {
                "tokens": ["Paris"],
                "token_logprobs": [LP_08],
                "text_offset": [0]
            },
            "finish_reason": "length"
        }]
    })))
    .await;
    let backend = HttpBackend::new(config(addr)).unwrap();
    let out = backend
        .generate("prompt", &GenerationParams::new(1).unwrap())
        .await
        .unwrap();
    assert_eq!(out.text, "Paris");
    assert_eq!(out.token_probs.len(), 1);
}

#[tokio::test]
async fn synthetic_trace_matches_analytic_distribution() {
    // Cross-implementation check: the synthetic backend's scored trace,
    // pushed through the prefix-distribution builder, reproduces the
    // closed-form mixture over the vocabulary.
    use obeval_backend::{synthetic_observed, SyntheticBackend, SyntheticModelSpec};
    use obeval_core::trace::build_prefix_distribution;

    let spec = SyntheticModelSpec::canonical_square();
    let backend = SyntheticBackend::new(spec.clone(), 5).unwrap();
    let templates = obeval_core::prompt::TemplateSet::default();
    for &c in &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0] {
        let prompt = obeval_core::prompt::render_main(
            &templates,
            "Which codeword is recorded?",
            "The registry entry maps to the codeword bravo.",
            obeval_core::prob::Certainty::new(c).unwrap(),
            obeval_core::prompt::PromptMode::baseline(),
            None,
        )
        .unwrap()
        .text;
        let trace = backend.score_answer(&prompt, "bravo").await.unwrap();
        let prefix = build_prefix_distribution(&trace).unwrap();
        let analytic = synthetic_observed(&spec, "bravo", c).unwrap();
        // full-answer mass is the mixture mass of the answer token; the
        // named deviation carries the other token's mass.
        assert!((prefix.full_answer_mass() - analytic.masses()[1]).abs() < 1e-12);
        let named = prefix
            .distribution()
            .mass_of(&obeval_core::trace::deviate_label(0, "alpha"))
            .unwrap();
        assert!((named - analytic.masses()[0]).abs() < 1e-12);
    }
}

#[tokio::test]
async fn concurrent_scoring_respects_inflight_cap() {
    let prompt = "P: q";
    let mut stub = state(scoring_fixture(prompt));
    stub.delay_ms = 30;
    let addr = start_stub(stub).await;
    let mut cfg = config(addr);
    cfg.max_inflight = 2;
    let backend = Arc::new(HttpBackend::new(cfg).unwrap());
    let mut handles = Vec::new();
    for _ in 0..6 {
        let b = Arc::clone(&backend);
        handles.push(tokio::spawn(async move {
            b.score_answer("P: q", "Paris").await.map(|t| t.chain_probability())
        }));
    }
    for handle in handles {
        let p = handle.await.unwrap().unwrap();
        assert!((p - 0.64).abs() < 1e-9);
    }
}

#[test]
fn fixture_logprobs_agree_with_documented_probabilities() {
    assert!((LP_08.exp() - 0.8).abs() < 1e-12);
    assert!((LP_02.exp() - 0.2).abs() < 1e-12);
}
