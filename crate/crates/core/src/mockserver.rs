//! Deterministic OpenAI-compatible streaming endpoint.
//!
//! Each registered [`MockProfile`] behaves like a model with a fixed
//! first-token delay, a fixed spacing between tokens and a per-task
//! verbosity. One streamed delta is one token, so the latency of every
//! request has a closed form (see [`expected_latency_ms`]).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::convert::Infallible;
use std::fmt;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;

use crate::client::Usage;
use crate::tokenize::approx_token_count;

pub const MOCKPROFILES_SCHEMA: &str = "mockprofiles/v1";

/// Output length used when a profile has neither a rule for the detected
/// task nor a `default` rule.
pub const FALLBACK_TOKENS: u64 = 16;

pub const ANSWER_ONLY_PHRASE: &str = "Answer only with the letter of the selected choice";
pub const PARAPHRASE_PHRASE: &str = "Paraphrase the following question";
pub const EXPLAIN_PHRASE: &str = "explain why the selected answer is correct";

#[derive(Debug, Error)]
pub enum MockError {
    #[error("invalid profile `{model}`: {reason}")]
    InvalidProfile { model: String, reason: String },
    #[error("no profiles given")]
    NoProfiles,
    #[error("duplicate profile for model `{0}`")]
    DuplicateModel(String),
    #[error("time scale must lie in (0, 1], got {0}")]
    BadTimeScale(f64),
    #[error("failed to read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed profile document: {0}")]
    Document(String),
    #[error("failed to bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("server error: {0}")]
    Serve(#[source] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTag {
    AnswerChoice,
    Paraphrase,
    OpenAnswer,
    Default,
}

impl TaskTag {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskTag::AnswerChoice => "answer_choice",
            TaskTag::Paraphrase => "paraphrase",
            TaskTag::OpenAnswer => "open_answer",
            TaskTag::Default => "default",
        }
    }
}

impl fmt::Display for TaskTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Recognises the canonical instructions of the bundled templates.
pub fn detect_task_tag(prompt: &str) -> TaskTag {
    if prompt.contains(ANSWER_ONLY_PHRASE) {
        TaskTag::AnswerChoice
    } else if prompt.contains(PARAPHRASE_PHRASE) {
        TaskTag::Paraphrase
    } else if prompt.contains(EXPLAIN_PHRASE) {
        TaskTag::OpenAnswer
    } else {
        TaskTag::Default
    }
}

/// Output length rule: a constant, or `base + ratio × input estimate`
/// rounded to the nearest integer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Verbosity {
    Constant(u64),
    Proportional { base: u64, ratio: f64 },
}

impl Verbosity {
    pub fn tokens(self, input_estimate: u64) -> u64 {
        match self {
            Verbosity::Constant(n) => n,
            Verbosity::Proportional { base, ratio } => base + (ratio * input_estimate as f64).round() as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockProfile {
    pub model_id: String,
    pub ttft_ms: f64,
    pub per_delta_ms: f64,
    pub verbosity: BTreeMap<TaskTag, Verbosity>,
    #[serde(default = "default_granularity")]
    pub granularity: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_granularity() -> usize {
    4
}

impl MockProfile {
    pub fn constant(model_id: &str, ttft_ms: f64, per_delta_ms: f64, tokens: u64) -> Self {
        Self {
            model_id: model_id.to_string(),
            ttft_ms,
            per_delta_ms,
            verbosity: BTreeMap::from([(TaskTag::Default, Verbosity::Constant(tokens))]),
            granularity: default_granularity(),
            seed: 0,
        }
    }

    pub fn with_rule(mut self, tag: TaskTag, rule: Verbosity) -> Self {
        self.verbosity.insert(tag, rule);
        self
    }

    pub fn validate(&self) -> Result<(), MockError> {
        let bad = |reason: &str| {
            Err(MockError::InvalidProfile {
                model: self.model_id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.model_id.trim().is_empty() {
            return bad("empty model_id");
        }
        if !(self.ttft_ms.is_finite() && self.ttft_ms > 0.0) {
            return bad("ttft_ms must be positive");
        }
        if !(self.per_delta_ms.is_finite() && self.per_delta_ms > 0.0) {
            return bad("per_delta_ms must be positive");
        }
        if self.granularity == 0 {
            return bad("granularity must be at least 1");
        }
        for rule in self.verbosity.values() {
            if let Verbosity::Proportional { ratio, .. } = rule {
                if !(ratio.is_finite() && *ratio >= 0.0) {
                    return bad("verbosity ratio must be finite and nonnegative");
                }
            }
        }
        Ok(())
    }

    pub fn output_tokens(&self, tag: TaskTag, input_estimate: u64) -> u64 {
        self.verbosity
            .get(&tag)
            .or_else(|| self.verbosity.get(&TaskTag::Default))
            .map_or(FALLBACK_TOKENS, |rule| rule.tokens(input_estimate))
    }

    /// The same profile with both delays multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            ttft_ms: self.ttft_ms * factor,
            per_delta_ms: self.per_delta_ms * factor,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeScale(f64);

impl TimeScale {
    pub fn new(factor: f64) -> Result<Self, MockError> {
        if factor.is_finite() && factor > 0.0 && factor <= 1.0 {
            Ok(Self(factor))
        } else {
            Err(MockError::BadTimeScale(factor))
        }
    }

    pub fn factor(self) -> f64 {
        self.0
    }
}

impl Default for TimeScale {
    fn default() -> Self {
        Self(1.0)
    }
}

/// Server-side latency of a request emitting `deltas` tokens, in ms: the
/// first delta leaves after the first-token delay, each further one after
/// the per-delta spacing, and the stream closes right after the last.
pub fn expected_latency_ms(profile: &MockProfile, deltas: u64, scale: TimeScale) -> f64 {
    scale.0 * (profile.ttft_ms + deltas.saturating_sub(1) as f64 * profile.per_delta_ms)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockResponse {
    pub tag: TaskTag,
    pub deltas: Vec<String>,
    pub usage: Usage,
}

const ALPHABET: &[u8] = b"etaoinshrdlucmfwypvbgk ";

/// Deterministic response for a prompt: the token count follows the
/// profile's verbosity rule and the text comes from a generator seeded by
/// `(seed, task tag, prompt hash)`.
pub fn generate_mock_response(profile: &MockProfile, tag: TaskTag, prompt: &str) -> MockResponse {
    let input_estimate = approx_token_count(prompt);
    let n = profile.output_tokens(tag, input_estimate);

    let mut hasher = Sha256::new();
    hasher.update(profile.seed.to_le_bytes());
    hasher.update(tag.as_str().as_bytes());
    hasher.update([0u8]);
    hasher.update(prompt.as_bytes());
    let mut rng = ChaCha8Rng::from_seed(hasher.finalize().into());

    let deltas = (0..n)
        .map(|_| {
            (0..profile.granularity)
                .map(|_| char::from(ALPHABET[rng.random_range(0..ALPHABET.len())]))
                .collect()
        })
        .collect();
    MockResponse {
        tag,
        deltas,
        usage: Usage {
            prompt_tokens: input_estimate,
            completion_tokens: n,
        },
    }
}

#[derive(Debug, Deserialize)]
struct ProfileFile {
    schema: String,
    profiles: Vec<MockProfile>,
}

pub fn parse_profiles(json: &str) -> Result<Vec<MockProfile>, MockError> {
    let file: ProfileFile = serde_json::from_str(json).map_err(|e| MockError::Document(e.to_string()))?;
    if file.schema != MOCKPROFILES_SCHEMA {
        return Err(MockError::Document(format!(
            "unsupported schema `{}` (supported: {MOCKPROFILES_SCHEMA})",
            file.schema
        )));
    }
    check_profiles(&file.profiles)?;
    Ok(file.profiles)
}

pub fn load_profiles(path: &Path) -> Result<Vec<MockProfile>, MockError> {
    let text = std::fs::read_to_string(path).map_err(|source| MockError::Read {
        path: path.display().to_string(),
        source,
    })?;
    parse_profiles(&text)
}

pub fn profiles_document(profiles: &[MockProfile]) -> String {
    serde_json::to_string_pretty(&json!({ "schema": MOCKPROFILES_SCHEMA, "profiles": profiles }))
        .expect("profiles serialize")
}

fn check_profiles(profiles: &[MockProfile]) -> Result<(), MockError> {
    if profiles.is_empty() {
        return Err(MockError::NoProfiles);
    }
    let mut seen = HashSet::new();
    for p in profiles {
        p.validate()?;
        if !seen.insert(p.model_id.as_str()) {
            return Err(MockError::DuplicateModel(p.model_id.clone()));
        }
    }
    Ok(())
}

#[derive(Debug, Default)]
struct Stats {
    active: AtomicU64,
    high_water: AtomicU64,
    served: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub active: u64,
    pub high_water: u64,
    pub served: u64,
}

impl Stats {
    fn snapshot(&self) -> StatsSnapshot {
        StatsSnapshot {
            active: self.active.load(Ordering::SeqCst),
            high_water: self.high_water.load(Ordering::SeqCst),
            served: self.served.load(Ordering::SeqCst),
        }
    }
}

/// Marks one request as in flight until released or dropped.
struct ActiveGuard {
    stats: Arc<Stats>,
    held: bool,
}

impl ActiveGuard {
    fn acquire(stats: Arc<Stats>) -> Self {
        let now = stats.active.fetch_add(1, Ordering::SeqCst) + 1;
        stats.high_water.fetch_max(now, Ordering::SeqCst);
        Self { stats, held: true }
    }

    fn release(&mut self) {
        if std::mem::take(&mut self.held) {
            self.stats.active.fetch_sub(1, Ordering::SeqCst);
        }
    }
}

impl Drop for ActiveGuard {
    fn drop(&mut self) {
        self.release();
    }
}

struct AppState {
    profiles: HashMap<String, MockProfile>,
    known: Vec<String>,
    scale: TimeScale,
    stats: Arc<Stats>,
}

#[derive(Debug, Deserialize)]
struct IncomingMessage {
    #[allow(dead_code)]
    role: String,
    content: String,
}

#[derive(Debug, Deserialize)]
struct IncomingStreamOptions {
    #[serde(default)]
    include_usage: bool,
}

#[derive(Debug, Deserialize)]
struct IncomingRequest {
    model: String,
    messages: Vec<IncomingMessage>,
    #[serde(default)]
    stream: bool,
    stream_options: Option<IncomingStreamOptions>,
    max_tokens: Option<u64>,
}

fn error_response(status: StatusCode, message: String) -> Response {
    (status, Json(json!({ "error": { "message": message, "code": status.as_u16() } }))).into_response()
}

fn chunk_frame(model: &str, delta: Value, finish_reason: Option<&str>) -> String {
    let chunk = json!({
        "id": "mockcmpl",
        "object": "chat.completion.chunk",
        "created": 0,
        "model": model,
        "choices": [{ "index": 0, "delta": delta, "finish_reason": finish_reason }],
    });
    format!("data: {chunk}\n\n")
}

fn sleep_until(deadline: Instant) {
    let now = Instant::now();
    if deadline > now {
        std::thread::sleep(deadline - now);
    }
}

async fn chat_completions(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let received = Instant::now();
    let req: IncomingRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, format!("malformed request: {e}")),
    };
    let Some(profile) = state.profiles.get(&req.model) else {
        return error_response(
            StatusCode::NOT_FOUND,
            format!("unknown model `{}`; known models: {}", req.model, state.known.join(", ")),
        );
    };
    if !req.stream {
        return error_response(StatusCode::BAD_REQUEST, "only stream=true is supported".into());
    }
    let prompt = req.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n");
    let tag = detect_task_tag(&prompt);
    let mut response = generate_mock_response(profile, tag, &prompt);
    let mut finish = "stop";
    if let Some(limit) = req.max_tokens {
        if (response.deltas.len() as u64) > limit {
            response.deltas.truncate(limit as usize);
            response.usage.completion_tokens = limit;
            finish = "length";
        }
    }
    let include_usage = req.stream_options.is_some_and(|o| o.include_usage);

    state.stats.served.fetch_add(1, Ordering::SeqCst);
    let guard = ActiveGuard::acquire(state.stats.clone());
    let (tx, rx) = mpsc::unbounded_channel::<Bytes>();
    let model = profile.model_id.clone();
    let scale = state.scale.factor();
    let ttft = Duration::from_secs_f64(scale * profile.ttft_ms / 1e3);
    let spacing = scale * profile.per_delta_ms / 1e3;

    // A dedicated thread per stream gives sub-millisecond wake-ups and keeps
    // the schedules of concurrent requests independent.
    std::thread::spawn(move || {
        let mut guard = guard;
        let n = response.deltas.len();
        if n == 0 {
            sleep_until(received + ttft);
        }
        for (k, text) in response.deltas.into_iter().enumerate() {
            sleep_until(received + ttft + Duration::from_secs_f64(spacing * k as f64));
            let delta = if k == 0 {
                json!({ "role": "assistant", "content": text })
            } else {
                json!({ "content": text })
            };
            if tx.send(Bytes::from(chunk_frame(&model, delta, None))).is_err() {
                return;
            }
        }
        let mut tail = chunk_frame(&model, json!({}), Some(finish));
        if include_usage {
            let usage = json!({
                "id": "mockcmpl",
                "object": "chat.completion.chunk",
                "created": 0,
                "model": model,
                "choices": [],
                "usage": {
                    "prompt_tokens": response.usage.prompt_tokens,
                    "completion_tokens": response.usage.completion_tokens,
                    "total_tokens": response.usage.prompt_tokens + response.usage.completion_tokens,
                },
            });
            tail.push_str(&format!("data: {usage}\n\n"));
        }
        tail.push_str("data: [DONE]\n\n");
        // no longer in flight once the terminal frame can be observed
        guard.release();
        let _ = tx.send(Bytes::from(tail));
    });

    let stream = futures::stream::unfold(rx, |mut rx| async move {
        rx.recv().await.map(|b| (Ok::<_, Infallible>(b), rx))
    });
    Response::builder()
        .status(StatusCode::OK)
        .header(header::CONTENT_TYPE, "text/event-stream")
        .header(header::CACHE_CONTROL, "no-cache")
        .body(Body::from_stream(stream))
        .expect("static response parts")
}

async fn debug_stats(State(state): State<Arc<AppState>>) -> Json<StatsSnapshot> {
    Json(state.stats.snapshot())
}

async fn list_models(State(state): State<Arc<AppState>>) -> Json<Value> {
    let data: Vec<Value> = state
        .known
        .iter()
        .map(|id| json!({ "id": id, "object": "model", "owned_by": "mock" }))
        .collect();
    Json(json!({ "object": "list", "data": data }))
}

fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/chat/completions", post(chat_completions))
        .route("/v1/models", get(list_models))
        .route("/debug/stats", get(debug_stats))
        .with_state(state)
}

/// A running mock endpoint. Dropping the handle without calling
/// [`MockServer::shutdown`] leaves the server running until the runtime ends.
pub struct MockServer {
    addr: SocketAddr,
    stats: Arc<Stats>,
    shutdown: Option<oneshot::Sender<()>>,
    task: Option<JoinHandle<Result<(), MockError>>>,
}

impl MockServer {
    pub async fn start(profiles: Vec<MockProfile>, addr: SocketAddr, scale: TimeScale) -> Result<Self, MockError> {
        check_profiles(&profiles)?;
        let mut known: Vec<String> = profiles.iter().map(|p| p.model_id.clone()).collect();
        known.sort();
        let stats = Arc::new(Stats::default());
        let state = Arc::new(AppState {
            profiles: profiles.into_iter().map(|p| (p.model_id.clone(), p)).collect(),
            known,
            scale,
            stats: stats.clone(),
        });
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|source| MockError::Bind { addr, source })?;
        let addr = listener.local_addr().map_err(MockError::Serve)?;
        let (tx, rx) = oneshot::channel::<()>();
        let task = tokio::spawn(async move {
            use axum::serve::ListenerExt;
            let listener = listener.tap_io(|tcp| {
                let _ = tcp.set_nodelay(true);
            });
            axum::serve(listener, router(state))
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
                .map_err(MockError::Serve)
        });
        Ok(Self {
            addr,
            stats,
            shutdown: Some(tx),
            task: Some(task),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stats(&self) -> StatsSnapshot {
        self.stats.snapshot()
    }

    /// Zeroes the served count and the high-water mark (active is left alone).
    pub fn reset_stats(&self) {
        self.stats.served.store(0, Ordering::SeqCst);
        self.stats
            .high_water
            .store(self.stats.active.load(Ordering::SeqCst), Ordering::SeqCst);
    }

    /// Resolves once the server stops, either through [`MockServer::shutdown`]
    /// or an accept-loop failure.
    pub async fn wait(mut self) -> Result<(), MockError> {
        match self.task.take() {
            Some(task) => task.await.unwrap_or(Ok(())),
            None => Ok(()),
        }
    }

    pub async fn shutdown(mut self) -> Result<(), MockError> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        self.wait().await
    }
}

/// Serves until `signal` resolves.
pub async fn serve(
    profiles: Vec<MockProfile>,
    addr: SocketAddr,
    scale: TimeScale,
    signal: impl std::future::Future<Output = ()>,
) -> Result<(), MockError> {
    let server = MockServer::start(profiles, addr, scale).await?;
    tracing::info!("mock endpoint listening on {}", server.base_url());
    signal.await;
    server.shutdown().await
}
