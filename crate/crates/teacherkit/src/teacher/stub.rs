//! Deterministic in-process server for the generation wire protocol.
//!
//! Responses are a pure function of (behavior seed, request body), so any
//! client sees identical outputs across runs and concurrency levels. A
//! behavior config adds three kinds of overrides for tests:
//!
//! * `fail`: answer matching requests with an error status, optionally only
//!   the first `times` matches;
//! * `generate`: scripted response sequences for matching prompts (the last
//!   entry repeats once exhausted);
//! * `logprob_boost`: per-token bonus added when both context and
//!   continuation contain given substrings.
//!
//! Besides the two protocol endpoints the stub serves `GET /v1/stats`
//! (request counters and the high-water mark of concurrent requests),
//! `GET /v1/prompts` (every generate prompt seen), and `POST /v1/reset`.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Json, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::http::{
    ErrorBody, GenerateRequest, GenerateResponse, LogprobsRequest, LogprobsResponse,
};
use super::last_answer_letter;
use crate::core::short_hash;

fn default_fail_status() -> u16 {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailRule {
    /// Substrings that must all occur in the request text (the prompt for
    /// generate, context + " " + continuation for logprobs).
    pub request_contains: Vec<String>,
    #[serde(default = "default_fail_status")]
    pub status: u16,
    /// How many matching requests to fail; unlimited when absent.
    #[serde(default)]
    pub times: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRule {
    pub prompt_contains: Vec<String>,
    /// Served in order per rule; the last response repeats.
    pub responses: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostRule {
    pub context_contains: String,
    pub continuation_contains: String,
    /// Added to every token logprob of a matching request.
    pub bonus: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StubBehavior {
    #[serde(default)]
    pub fail: Vec<FailRule>,
    #[serde(default)]
    pub generate: Vec<GenerateRule>,
    #[serde(default)]
    pub logprob_boost: Vec<BoostRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubStats {
    pub high_water_mark: usize,
    pub total_requests: usize,
    pub generate_requests: usize,
    pub logprob_requests: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptLog {
    pub prompts: Vec<String>,
}

#[derive(Debug, Error)]
pub enum StubError {
    #[error("cannot bind {addr}: {message}")]
    Bind { addr: String, message: String },
}

struct StubState {
    seed: u64,
    behavior: StubBehavior,
    inflight: AtomicUsize,
    high_water: AtomicUsize,
    generate_total: AtomicUsize,
    logprob_total: AtomicUsize,
    prompts: Mutex<Vec<String>>,
    fail_consumed: Vec<AtomicUsize>,
    script_cursor: Vec<AtomicUsize>,
}

impl StubState {
    fn new(seed: u64, behavior: StubBehavior) -> Self {
        let fail_consumed = behavior.fail.iter().map(|_| AtomicUsize::new(0)).collect();
        let script_cursor = behavior.generate.iter().map(|_| AtomicUsize::new(0)).collect();
        StubState {
            seed,
            behavior,
            inflight: AtomicUsize::new(0),
            high_water: AtomicUsize::new(0),
            generate_total: AtomicUsize::new(0),
            logprob_total: AtomicUsize::new(0),
            prompts: Mutex::new(Vec::new()),
            fail_consumed,
            script_cursor,
        }
    }

    /// Returns the status to fail with if a fail rule matches and has budget.
    fn matched_failure(&self, request_text: &str) -> Option<u16> {
        for (rule, consumed) in self.behavior.fail.iter().zip(&self.fail_consumed) {
            if !rule.request_contains.iter().all(|s| request_text.contains(s.as_str())) {
                continue;
            }
            match rule.times {
                None => return Some(rule.status),
                Some(times) => {
                    let claim = consumed.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |c| {
                        (c < times as usize).then_some(c + 1)
                    });
                    if claim.is_ok() {
                        return Some(rule.status);
                    }
                }
            }
        }
        None
    }

    fn scripted_response(&self, prompt: &str) -> Option<String> {
        for (rule, cursor) in self.behavior.generate.iter().zip(&self.script_cursor) {
            if rule.responses.is_empty()
                || !rule.prompt_contains.iter().all(|s| prompt.contains(s.as_str()))
            {
                continue;
            }
            let index = cursor.fetch_add(1, Ordering::SeqCst);
            return Some(rule.responses[index.min(rule.responses.len() - 1)].clone());
        }
        None
    }

    fn reset(&self) {
        self.high_water.store(self.inflight.load(Ordering::SeqCst), Ordering::SeqCst);
        self.generate_total.store(0, Ordering::SeqCst);
        self.logprob_total.store(0, Ordering::SeqCst);
        self.prompts.lock().unwrap().clear();
        for counter in self.fail_consumed.iter().chain(&self.script_cursor) {
            counter.store(0, Ordering::SeqCst);
        }
    }
}

/// RAII tracker for the concurrent-request high-water mark.
struct InflightGuard<'a>(&'a StubState);

impl<'a> InflightGuard<'a> {
    fn enter(state: &'a StubState) -> Self {
        let now = state.inflight.fetch_add(1, Ordering::SeqCst) + 1;
        state.high_water.fetch_max(now, Ordering::SeqCst);
        InflightGuard(state)
    }
}

impl Drop for InflightGuard<'_> {
    fn drop(&mut self) {
        self.0.inflight.fetch_sub(1, Ordering::SeqCst);
    }
}

fn error_response(status: u16, message: &str) -> Response {
    let code = StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (code, Json(ErrorBody { error: message.to_string() })).into_response()
}

/// The template answer for a request with no matching script: a tag derived
/// from (seed, body) plus, when the prompt shows an answer letter, a
/// conclusion restating it. Stop strings truncate the output.
fn default_generation(seed: u64, request: &GenerateRequest) -> String {
    let body = serde_json::to_string(request).expect("request serializes");
    let tag = short_hash(&[&seed.to_le_bytes(), body.as_bytes()]);
    let mut text = match last_answer_letter(&request.prompt) {
        Some(letter) => format!(
            "Working through the statement deterministically [trace {tag}]. \
             So the answer is ({letter})."
        ),
        None => format!("A deterministic explanation [trace {tag}]."),
    };
    for stop in &request.stop {
        if let Some(cut) = text.find(stop.as_str()) {
            text.truncate(cut);
        }
    }
    text
}

async fn handle_generate(
    State(state): State<Arc<StubState>>,
    Json(request): Json<GenerateRequest>,
) -> Response {
    let _guard = InflightGuard::enter(&state);
    state.generate_total.fetch_add(1, Ordering::SeqCst);
    state.prompts.lock().unwrap().push(request.prompt.clone());
    tokio::task::yield_now().await;

    if let Some(status) = state.matched_failure(&request.prompt) {
        return error_response(status, "injected failure");
    }
    let text = state
        .scripted_response(&request.prompt)
        .unwrap_or_else(|| default_generation(state.seed, &request));
    Json(GenerateResponse { text }).into_response()
}

async fn handle_logprobs(
    State(state): State<Arc<StubState>>,
    Json(request): Json<LogprobsRequest>,
) -> Response {
    let _guard = InflightGuard::enter(&state);
    state.logprob_total.fetch_add(1, Ordering::SeqCst);
    tokio::task::yield_now().await;

    let request_text = format!("{} {}", request.context, request.continuation);
    if let Some(status) = state.matched_failure(&request_text) {
        return error_response(status, "injected failure");
    }

    let bonus: f64 = state
        .behavior
        .logprob_boost
        .iter()
        .filter(|rule| {
            request.context.contains(&rule.context_contains)
                && request.continuation.contains(&rule.continuation_contains)
        })
        .map(|rule| rule.bonus)
        .sum();

    let tokens: Vec<String> =
        request.continuation.split_whitespace().map(str::to_string).collect();
    let token_logprobs: Vec<f64> = tokens
        .iter()
        .map(|t| -(t.chars().count() as f64) / 10.0 + bonus)
        .collect();
    Json(LogprobsResponse { token_logprobs, tokens }).into_response()
}

async fn handle_stats(State(state): State<Arc<StubState>>) -> Json<StubStats> {
    let generate = state.generate_total.load(Ordering::SeqCst);
    let logprob = state.logprob_total.load(Ordering::SeqCst);
    Json(StubStats {
        high_water_mark: state.high_water.load(Ordering::SeqCst),
        total_requests: generate + logprob,
        generate_requests: generate,
        logprob_requests: logprob,
    })
}

async fn handle_prompts(State(state): State<Arc<StubState>>) -> Json<PromptLog> {
    Json(PromptLog { prompts: state.prompts.lock().unwrap().clone() })
}

async fn handle_reset(State(state): State<Arc<StubState>>) -> Json<serde_json::Value> {
    state.reset();
    Json(serde_json::json!({ "ok": true }))
}

/// A running stub bound to 127.0.0.1. Shuts down gracefully on drop.
pub struct StubServer {
    addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl StubServer {
    /// Binds 127.0.0.1:`port` (0 picks a free port) and serves on a
    /// background thread with its own runtime.
    pub fn spawn(port: u16, seed: u64, behavior: StubBehavior) -> Result<StubServer, StubError> {
        let state = Arc::new(StubState::new(seed, behavior));
        let app = Router::new()
            .route("/v1/generate", post(handle_generate))
            .route("/v1/logprobs", post(handle_logprobs))
            .route("/v1/stats", get(handle_stats))
            .route("/v1/prompts", get(handle_prompts))
            .route("/v1/reset", post(handle_reset))
            .with_state(state);

        let bind_addr = format!("127.0.0.1:{port}");
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let (shutdown_tx, shutdown_rx) = tokio::sync::oneshot::channel::<()>();

        let thread_addr = bind_addr.clone();
        let handle = std::thread::spawn(move || {
            let runtime = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
                .expect("runtime construction");
            runtime.block_on(async move {
                let listener = match tokio::net::TcpListener::bind(&thread_addr).await {
                    Ok(listener) => listener,
                    Err(e) => {
                        let _ = addr_tx.send(Err(e.to_string()));
                        return;
                    }
                };
                let local = listener.local_addr().expect("bound socket has an address");
                let _ = addr_tx.send(Ok(local));
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = shutdown_rx.await;
                    })
                    .await
                    .expect("serve loop");
            });
        });

        let addr = addr_rx
            .recv()
            .map_err(|_| StubError::Bind {
                addr: bind_addr.clone(),
                message: "server thread exited before binding".into(),
            })?
            .map_err(|message| StubError::Bind { addr: bind_addr, message })?;
        Ok(StubServer {
            addr,
            shutdown: Some(shutdown_tx),
            handle: Some(handle),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks the calling thread for the life of the server (for the
    /// stub-serve subcommand).
    pub fn wait(mut self) {
        // Keep the shutdown sender alive or its drop would stop the server.
        let _hold = self.shutdown.take();
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        if let Some(sender) = self.shutdown.take() {
            let _ = sender.send(());
        }
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{Backend, BackendError, GenParams};
    use crate::teacher::http::{HttpBackend, RetryPolicy};
    use std::time::Duration;

    fn fast_client(server: &StubServer) -> HttpBackend {
        HttpBackend::with_retry(
            &server.endpoint(),
            RetryPolicy { max_retries: 0, base_backoff: Duration::from_millis(1) },
        )
    }

    fn get_json<T: serde::de::DeserializeOwned>(server: &StubServer, path: &str) -> T {
        reqwest::blocking::get(format!("{}{path}", server.endpoint()))
            .unwrap()
            .json()
            .unwrap()
    }

    #[test]
    fn same_body_same_response() {
        let server = StubServer::spawn(0, 9, StubBehavior::default()).unwrap();
        let client = fast_client(&server);
        let params = GenParams::default();
        let a = client.generate("Q: q A: The answer is (B). Let's think step by step.", &params);
        let b = client.generate("Q: q A: The answer is (B). Let's think step by step.", &params);
        assert_eq!(a.unwrap(), b.unwrap());
    }

    #[test]
    fn default_generation_restates_last_answer_letter() {
        let server = StubServer::spawn(0, 9, StubBehavior::default()).unwrap();
        let client = fast_client(&server);
        let text = client
            .generate("The answer is (A). Nope: the answer is (C). More.", &GenParams::default())
            .unwrap();
        assert!(text.ends_with("the answer is (C)."), "{text}");
        let free = client.generate("no letters here", &GenParams::default()).unwrap();
        assert!(!free.contains("answer is ("));
        assert!(!free.is_empty());
    }

    #[test]
    fn seed_changes_output() {
        let a = StubServer::spawn(0, 1, StubBehavior::default()).unwrap();
        let b = StubServer::spawn(0, 2, StubBehavior::default()).unwrap();
        let prompt = "Q: same A:";
        let ta = fast_client(&a).generate(prompt, &GenParams::default()).unwrap();
        let tb = fast_client(&b).generate(prompt, &GenParams::default()).unwrap();
        assert_ne!(ta, tb);
    }

    #[test]
    fn logprobs_arity_and_values() {
        let server = StubServer::spawn(0, 9, StubBehavior::default()).unwrap();
        let client = fast_client(&server);
        let scores = client.continuation_logprobs("Q: q A:", "The answer is (B).").unwrap();
        assert_eq!(scores.len(), 4);
        assert_eq!(scores, vec![-0.3, -0.6, -0.2, -0.4]);
        assert_eq!(client.continuation_logprobs("ctx", "one").unwrap().len(), 1);
    }

    #[test]
    fn boost_rules_raise_matching_continuations() {
        let behavior = StubBehavior {
            logprob_boost: vec![BoostRule {
                context_contains: "magnet".into(),
                continuation_contains: "(B)".into(),
                bonus: 2.0,
            }],
            ..StubBehavior::default()
        };
        let server = StubServer::spawn(0, 9, behavior).unwrap();
        let client = fast_client(&server);
        let boosted = client.continuation_logprobs("about magnets", "(B) field").unwrap();
        assert_eq!(boosted, vec![-0.3 + 2.0, -0.5 + 2.0]);
        let plain = client.continuation_logprobs("about magnets", "(A) field").unwrap();
        assert_eq!(plain, vec![-0.3, -0.5]);
        let wrong_ctx = client.continuation_logprobs("about gravity", "(B) field").unwrap();
        assert_eq!(wrong_ctx, vec![-0.3, -0.5]);
    }

    #[test]
    fn fail_rule_with_budget_then_recovers() {
        let behavior = StubBehavior {
            fail: vec![FailRule {
                request_contains: vec!["sample 17".into()],
                status: 500,
                times: Some(2),
            }],
            ..StubBehavior::default()
        };
        let server = StubServer::spawn(0, 9, behavior).unwrap();
        let client = fast_client(&server);
        for _ in 0..2 {
            match client.generate("about sample 17", &GenParams::default()) {
                Err(BackendError::Http { status: 500, .. }) => {}
                other => panic!("expected injected 500, got {other:?}"),
            }
        }
        assert!(client.generate("about sample 17", &GenParams::default()).is_ok());
        assert!(client.generate("about sample 99", &GenParams::default()).is_ok());
    }

    #[test]
    fn client_retries_past_transient_failures() {
        let behavior = StubBehavior {
            fail: vec![FailRule {
                request_contains: vec!["flaky".into()],
                status: 503,
                times: Some(2),
            }],
            ..StubBehavior::default()
        };
        let server = StubServer::spawn(0, 9, behavior).unwrap();
        let client = HttpBackend::with_retry(
            &server.endpoint(),
            RetryPolicy { max_retries: 3, base_backoff: Duration::from_millis(1) },
        );
        let text = client.generate("flaky request", &GenParams::default()).unwrap();
        assert!(!text.is_empty());
        let stats: StubStats = get_json(&server, "/v1/stats");
        assert_eq!(stats.generate_requests, 3, "two failures then success");
    }

    #[test]
    fn client_does_not_retry_4xx() {
        let behavior = StubBehavior {
            fail: vec![FailRule {
                request_contains: vec!["bad".into()],
                status: 400,
                times: None,
            }],
            ..StubBehavior::default()
        };
        let server = StubServer::spawn(0, 9, behavior).unwrap();
        let client = HttpBackend::with_retry(
            &server.endpoint(),
            RetryPolicy { max_retries: 3, base_backoff: Duration::from_millis(1) },
        );
        match client.generate("bad request", &GenParams::default()) {
            Err(BackendError::Http { status: 400, message }) => {
                assert_eq!(message, "injected failure");
            }
            other => panic!("expected 400, got {other:?}"),
        }
        let stats: StubStats = get_json(&server, "/v1/stats");
        assert_eq!(stats.generate_requests, 1, "no retry on client error");
    }

    #[test]
    fn scripted_responses_run_in_sequence_and_repeat() {
        let behavior = StubBehavior {
            generate: vec![GenerateRule {
                prompt_contains: vec!["scripted".into()],
                responses: vec!["first".into(), "second".into()],
            }],
            ..StubBehavior::default()
        };
        let server = StubServer::spawn(0, 9, behavior).unwrap();
        let client = fast_client(&server);
        let texts: Vec<String> = (0..3)
            .map(|_| client.generate("a scripted prompt", &GenParams::default()).unwrap())
            .collect();
        assert_eq!(texts, vec!["first", "second", "second"]);
    }

    #[test]
    fn stop_strings_truncate_default_generation() {
        let server = StubServer::spawn(0, 9, StubBehavior::default()).unwrap();
        let client = fast_client(&server);
        let params = GenParams { stop: vec!["answer".into()], ..GenParams::default() };
        let text = client.generate("The answer is (A).", &params).unwrap();
        assert!(!text.contains("answer"));
        assert!(!text.is_empty());
    }

    #[test]
    fn prompt_log_and_reset() {
        let server = StubServer::spawn(0, 9, StubBehavior::default()).unwrap();
        let client = fast_client(&server);
        client.generate("first prompt", &GenParams::default()).unwrap();
        client.generate("second prompt", &GenParams::default()).unwrap();
        let log: PromptLog = get_json(&server, "/v1/prompts");
        assert_eq!(log.prompts, vec!["first prompt", "second prompt"]);

        reqwest::blocking::Client::new()
            .post(format!("{}/v1/reset", server.endpoint()))
            .send()
            .unwrap()
            .error_for_status()
            .unwrap();
        let log: PromptLog = get_json(&server, "/v1/prompts");
        assert!(log.prompts.is_empty());
        let stats: StubStats = get_json(&server, "/v1/stats");
        assert_eq!(stats.total_requests, 0);
    }

    #[test]
    fn behavior_config_round_trips_from_json() {
        let json = r#"{
            "fail": [{"request_contains": ["id=17"], "status": 500, "times": 1}],
            "generate": [{"prompt_contains": ["x"], "responses": ["y"]}],
            "logprob_boost": [{"context_contains": "a", "continuation_contains": "b", "bonus": 1.5}]
        }"#;
        let behavior: StubBehavior = serde_json::from_str(json).unwrap();
        assert_eq!(behavior.fail[0].times, Some(1));
        assert!(serde_json::from_str::<StubBehavior>("{}").unwrap().fail.is_empty());
        assert!(serde_json::from_str::<StubBehavior>(r#"{"unknown": 1}"#).is_err());
    }
}
