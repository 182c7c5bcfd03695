//! Streaming client for OpenAI-compatible chat completion endpoints.
//!
//! Every request produces a [`RequestTrace`]: the dispatch instant, the
//! receipt instant of every streamed content fragment, the completion
//! instant, and whatever usage the server reported. Failures never abort;
//! they are classified and stored on the trace.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use futures::StreamExt;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::suite::{ChatMessage, PromptCase};
use crate::tokenize::{count_tokens, CountContext, CountStrategy, MergeTable, TokenCountRecord, DEFAULT_STRATEGIES};

/// Monotonic nanosecond time source shared by the client and the runner.
pub trait Clock: Send + Sync {
    fn now_ns(&self) -> u64;
}

#[derive(Debug, Clone, Copy)]
pub struct MonotonicClock {
    origin: Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now_ns(&self) -> u64 {
        self.origin.elapsed().as_nanos() as u64
    }
}

/// A clock that only moves when told to. Useful for building traces in
/// tests with exact timestamps.
#[derive(Debug, Default)]
pub struct ManualClock {
    now: AtomicU64,
}

impl ManualClock {
    pub fn new(start_ns: u64) -> Self {
        Self { now: AtomicU64::new(start_ns) }
    }

    pub fn set(&self, ns: u64) {
        self.now.store(ns, Ordering::SeqCst);
    }

    pub fn advance(&self, ns: u64) {
        self.now.fetch_add(ns, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ns(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestDefaults {
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub seed: Option<u64>,
}

impl Default for RequestDefaults {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_output_tokens: 1024,
            seed: Some(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTarget {
    pub base_url: String,
    pub model_id: String,
    /// Name of the environment variable holding the API key.
    pub auth_env: Option<String>,
    pub defaults: RequestDefaults,
}

#[derive(Debug, thiserror::Error)]
pub enum TargetError {
    #[error("invalid base url `{url}`: {reason}")]
    BadUrl { url: String, reason: String },
    #[error("model id must not be empty")]
    EmptyModel,
    #[error("`{0}` is not a valid environment variable name")]
    BadEnvName(String),
}

impl ModelTarget {
    pub fn new(base_url: &str, model_id: &str) -> Result<Self, TargetError> {
        let parsed = reqwest::Url::parse(base_url).map_err(|e| TargetError::BadUrl {
            url: base_url.to_string(),
            reason: e.to_string(),
        })?;
        if !matches!(parsed.scheme(), "http" | "https") || parsed.host_str().is_none() {
            return Err(TargetError::BadUrl {
                url: base_url.to_string(),
                reason: "expected an http(s) url with a host".into(),
            });
        }
        if model_id.trim().is_empty() {
            return Err(TargetError::EmptyModel);
        }
        Ok(Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            model_id: model_id.to_string(),
            auth_env: None,
            defaults: RequestDefaults::default(),
        })
    }

    pub fn with_auth_env(mut self, var: &str) -> Result<Self, TargetError> {
        if !is_env_var_name(var) {
            return Err(TargetError::BadEnvName(var.to_string()));
        }
        self.auth_env = Some(var.to_string());
        Ok(self)
    }

    pub fn completions_url(&self) -> String {
        format!("{}/v1/chat/completions", self.base_url)
    }

    pub fn api_key(&self) -> Option<String> {
        self.auth_env.as_deref().and_then(|var| std::env::var(var).ok())
    }
}

pub fn is_env_var_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestSpec {
    pub messages: Vec<ChatMessage>,
    pub max_output_tokens: u32,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl RequestSpec {
    pub fn from_case(case: &PromptCase, defaults: &RequestDefaults) -> Self {
        Self {
            messages: case.messages.clone(),
            max_output_tokens: defaults.max_output_tokens.max(1),
            temperature: defaults.temperature.max(0.0),
            seed: defaults.seed,
        }
    }

    /// Chat completion body; streaming and usage reporting are always on.
    pub fn body(&self, model: &str) -> Value {
        let mut body = json!({
            "model": model,
            "messages": self.messages,
            "stream": true,
            "stream_options": { "include_usage": true },
            "temperature": self.temperature,
            "max_tokens": self.max_output_tokens,
        });
        if let Some(seed) = self.seed {
            body["seed"] = json!(seed);
        }
        body
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// One decoded event-stream payload. Timestamps are attached by the trace
/// builder at receipt, not by the parser.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StreamEvent {
    Delta { text: String, finish_reason: Option<String> },
    UsageReport(Usage),
    Done,
    KeepAlive,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed stream frame: {0}")]
pub struct FrameError(pub String);

/// Decodes one event-stream frame (the bytes between blank-line delimiters).
///
/// A frame may yield more than one event when a chunk carries both content
/// and usage.
pub fn parse_sse_frame(frame: &[u8]) -> Result<Vec<StreamEvent>, FrameError> {
    let text = std::str::from_utf8(frame).map_err(|e| FrameError(e.to_string()))?;
    let mut data: Option<String> = None;
    for line in text.lines() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with(':') {
            continue;
        }
        let (field, value) = match line.split_once(':') {
            Some((f, v)) => (f, v.strip_prefix(' ').unwrap_or(v)),
            None => (line, ""),
        };
        if field == "data" {
            match &mut data {
                Some(d) => {
                    d.push('\n');
                    d.push_str(value);
                }
                None => data = Some(value.to_string()),
            }
        }
    }
    let Some(data) = data else {
        return Ok(vec![StreamEvent::KeepAlive]);
    };
    let payload = data.trim();
    if payload.is_empty() {
        return Ok(vec![StreamEvent::KeepAlive]);
    }
    if payload == "[DONE]" {
        return Ok(vec![StreamEvent::Done]);
    }
    let chunk: Value = serde_json::from_str(payload).map_err(|e| FrameError(e.to_string()))?;
    if !chunk.is_object() {
        return Err(FrameError("payload is not a JSON object".into()));
    }
    let mut events = Vec::new();
    if let Some(choice) = chunk.get("choices").and_then(Value::as_array).and_then(|c| c.first()) {
        let content = choice.pointer("/delta/content").and_then(Value::as_str);
        let finish = choice.get("finish_reason").and_then(Value::as_str);
        if content.is_some() || finish.is_some() {
            events.push(StreamEvent::Delta {
                text: content.unwrap_or_default().to_string(),
                finish_reason: finish.map(str::to_string),
            });
        }
    }
    if let Some(usage) = chunk.get("usage").filter(|u| !u.is_null()) {
        let field = |name: &str| {
            usage
                .get(name)
                .and_then(Value::as_u64)
                .ok_or_else(|| FrameError(format!("usage.{name} missing or not an integer")))
        };
        events.push(StreamEvent::UsageReport(Usage {
            prompt_tokens: field("prompt_tokens")?,
            completion_tokens: field("completion_tokens")?,
        }));
    }
    if events.is_empty() {
        events.push(StreamEvent::KeepAlive);
    }
    Ok(events)
}

/// Splits a byte stream into event-stream frames.
#[derive(Debug, Default)]
pub struct SseDecoder {
    buf: Vec<u8>,
}

impl SseDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends bytes and returns every frame completed by them.
    pub fn push(&mut self, bytes: &[u8]) -> Vec<Vec<u8>> {
        self.buf.extend_from_slice(bytes);
        let mut frames = Vec::new();
        while let Some((end, delim)) = find_frame_end(&self.buf) {
            let frame = self.buf[..end].to_vec();
            self.buf.drain(..end + delim);
            frames.push(frame);
        }
        frames
    }

    /// Bytes left over after the stream ended without a final delimiter.
    pub fn remainder(&self) -> &[u8] {
        &self.buf
    }
}

fn find_frame_end(buf: &[u8]) -> Option<(usize, usize)> {
    for i in 0..buf.len() {
        if buf[i..].starts_with(b"\n\n") {
            return Some((i, 2));
        }
        if buf[i..].starts_with(b"\r\n\r\n") {
            return Some((i, 4));
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeoutPhase {
    Connect,
    Read,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceError {
    ConnectFailure { message: String },
    Timeout { phase: TimeoutPhase, message: String },
    HttpStatus { code: u16, message: String },
    StreamTruncated { message: String },
}

impl TraceError {
    pub fn kind(&self) -> &'static str {
        match self {
            TraceError::ConnectFailure { .. } => "connect_failure",
            TraceError::Timeout { .. } => "timeout",
            TraceError::HttpStatus { .. } => "http_status",
            TraceError::StreamTruncated { .. } => "stream_truncated",
        }
    }
}

/// Timeline of one streamed request. All timestamps are nanoseconds on the
/// injected monotonic clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestTrace {
    pub case_id: String,
    pub model_id: String,
    /// Zero-based pass over the case list.
    pub pass: u32,
    pub ts_dispatch: u64,
    pub ts_first_delta: Option<u64>,
    pub delta_timestamps: Vec<u64>,
    pub ts_done: u64,
    pub text: String,
    pub usage: Option<Usage>,
    pub input_tokens: Option<TokenCountRecord>,
    pub output_tokens: Option<TokenCountRecord>,
    pub finish_reason: Option<String>,
    pub error: Option<TraceError>,
    pub frame_errors: Vec<String>,
}

impl RequestTrace {
    pub fn is_error(&self) -> bool {
        self.error.is_some()
    }
}

/// Accumulates stream events into a [`RequestTrace`].
#[derive(Debug)]
pub struct TraceBuilder {
    trace: RequestTrace,
    done: bool,
}

impl TraceBuilder {
    pub fn start(case_id: &str, model_id: &str, pass: u32, ts_dispatch: u64) -> Self {
        Self {
            trace: RequestTrace {
                case_id: case_id.to_string(),
                model_id: model_id.to_string(),
                pass,
                ts_dispatch,
                ts_first_delta: None,
                delta_timestamps: Vec::new(),
                ts_done: ts_dispatch,
                text: String::new(),
                usage: None,
                input_tokens: None,
                output_tokens: None,
                finish_reason: None,
                error: None,
                frame_errors: Vec::new(),
            },
            done: false,
        }
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Empty content fragments (role announcements, finish markers) are
    /// appended but not timed, so they cannot masquerade as the first token.
    pub fn apply(&mut self, event: StreamEvent, ts: u64) {
        if self.done {
            return;
        }
        match event {
            StreamEvent::Delta { text, finish_reason } => {
                if !text.is_empty() {
                    self.trace.ts_first_delta.get_or_insert(ts);
                    self.trace.delta_timestamps.push(ts);
                    self.trace.text.push_str(&text);
                }
                if finish_reason.is_some() {
                    self.trace.finish_reason = finish_reason;
                }
            }
            StreamEvent::UsageReport(usage) => self.trace.usage = Some(usage),
            StreamEvent::Done => {
                self.trace.ts_done = ts;
                self.done = true;
            }
            StreamEvent::KeepAlive => {}
        }
    }

    pub fn frame_error(&mut self, err: FrameError) {
        self.trace.frame_errors.push(err.0);
    }

    pub fn fail(mut self, error: TraceError, ts: u64) -> RequestTrace {
        self.trace.error = Some(error);
        self.trace.ts_done = ts;
        self.trace
    }

    /// Finishes the trace; a stream that ended without the terminal sentinel
    /// is classified as truncated.
    pub fn finish(mut self, ts: u64) -> RequestTrace {
        if !self.done {
            self.trace.ts_done = ts;
            self.trace.error = Some(TraceError::StreamTruncated {
                message: "stream ended without [DONE]".into(),
            });
        }
        self.trace
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timeouts {
    pub connect_ms: u64,
    /// Budget for the response headers and for each subsequent body chunk.
    pub read_ms: u64,
}

impl Default for Timeouts {
    fn default() -> Self {
        Self {
            connect_ms: 10_000,
            read_ms: 120_000,
        }
    }
}

/// Shared HTTP session; the connection pool is the only state shared
/// between concurrent requests.
#[derive(Debug, Clone)]
pub struct EndpointClient {
    http: reqwest::Client,
    timeouts: Timeouts,
}

impl EndpointClient {
    pub fn new(timeouts: Timeouts) -> Self {
        let http = reqwest::Client::builder()
            .connect_timeout(Duration::from_millis(timeouts.connect_ms))
            .tcp_nodelay(true)
            .build()
            .expect("http client builds");
        Self { http, timeouts }
    }

    pub fn timeouts(&self) -> Timeouts {
        self.timeouts
    }
}

impl Default for EndpointClient {
    fn default() -> Self {
        Self::new(Timeouts::default())
    }
}

fn classify_send_error(err: &reqwest::Error) -> TraceError {
    if err.is_timeout() {
        TraceError::Timeout {
            phase: TimeoutPhase::Connect,
            message: err.to_string(),
        }
    } else {
        TraceError::ConnectFailure {
            message: error_chain(err),
        }
    }
}

fn error_chain(err: &dyn std::error::Error) -> String {
    let mut msg = err.to_string();
    let mut source = err.source();
    while let Some(s) = source {
        msg.push_str(": ");
        msg.push_str(&s.to_string());
        source = s.source();
    }
    msg
}

/// Sends one streaming request and records its timeline.
pub async fn execute_request(
    client: &EndpointClient,
    target: &ModelTarget,
    spec: &RequestSpec,
    case_id: &str,
    pass: u32,
    clock: &dyn Clock,
) -> RequestTrace {
    let read_budget = Duration::from_millis(client.timeouts.read_ms);
    let mut request = client.http.post(target.completions_url()).json(&spec.body(&target.model_id));
    if let Some(key) = target.api_key() {
        request = request.bearer_auth(key);
    }

    let ts_dispatch = clock.now_ns();
    let mut builder = TraceBuilder::start(case_id, &target.model_id, pass, ts_dispatch);
    let connect_budget = Duration::from_millis(client.timeouts.connect_ms);
    let response = match tokio::time::timeout(connect_budget + read_budget, request.send()).await {
        Err(_) => {
            return builder.fail(
                TraceError::Timeout {
                    phase: TimeoutPhase::Read,
                    message: "no response headers within budget".into(),
                },
                clock.now_ns(),
            )
        }
        Ok(Err(e)) => return builder.fail(classify_send_error(&e), clock.now_ns()),
        Ok(Ok(r)) => r,
    };

    let status = response.status();
    if !status.is_success() {
        let body = tokio::time::timeout(read_budget, response.text())
            .await
            .ok()
            .and_then(Result::ok)
            .unwrap_or_default();
        let mut message: String = body.chars().take(512).collect();
        if message.is_empty() {
            message = status.to_string();
        }
        return builder.fail(
            TraceError::HttpStatus {
                code: status.as_u16(),
                message,
            },
            clock.now_ns(),
        );
    }

    let mut stream = response.bytes_stream();
    let mut decoder = SseDecoder::new();
    loop {
        let chunk = match tokio::time::timeout(read_budget, stream.next()).await {
            Err(_) => {
                return builder.fail(
                    TraceError::Timeout {
                        phase: TimeoutPhase::Read,
                        message: format!("no data for {} ms", client.timeouts.read_ms),
                    },
                    clock.now_ns(),
                )
            }
            Ok(None) => break,
            Ok(Some(Err(e))) => {
                return builder.fail(
                    TraceError::StreamTruncated {
                        message: error_chain(&e),
                    },
                    clock.now_ns(),
                )
            }
            Ok(Some(Ok(bytes))) => bytes,
        };
        let ts = clock.now_ns();
        for frame in decoder.push(&chunk) {
            match parse_sse_frame(&frame) {
                Ok(events) => events.into_iter().for_each(|ev| builder.apply(ev, ts)),
                Err(e) => builder.frame_error(e),
            }
        }
        if builder.is_done() {
            // let the connection return to the pool without delaying the caller
            tokio::spawn(async move { while let Some(Ok(_)) = stream.next().await {} });
            break;
        }
    }
    let ts_end = clock.now_ns();
    if !builder.is_done() && !decoder.remainder().is_empty() {
        // servers that omit the final blank line
        let rest = decoder.remainder().to_vec();
        match parse_sse_frame(&rest) {
            Ok(events) => events.into_iter().for_each(|ev| builder.apply(ev, ts_end)),
            Err(e) => builder.frame_error(e),
        }
    }
    builder.finish(ts_end)
}

#[derive(Debug, Clone)]
pub struct CountingConfig {
    pub strategies: Vec<CountStrategy>,
    pub merge_table: Option<Arc<MergeTable>>,
}

impl Default for CountingConfig {
    fn default() -> Self {
        Self {
            strategies: DEFAULT_STRATEGIES.to_vec(),
            merge_table: None,
        }
    }
}

/// Attaches input and output token counts. Usage reported by the server wins
/// over client-side counting; recomputing on a resolved trace gives the same
/// result.
pub fn resolve_token_counts(mut trace: RequestTrace, prompt: &PromptCase, config: &CountingConfig) -> RequestTrace {
    let table = config.merge_table.as_deref();
    let input_ctx = CountContext {
        server_usage: trace.usage.as_ref().map(|u| u.prompt_tokens),
        merge_table: table,
    };
    let output_ctx = CountContext {
        server_usage: trace.usage.as_ref().map(|u| u.completion_tokens),
        merge_table: table,
    };
    trace.input_tokens = Some(count_tokens(&prompt.prompt_text(), &config.strategies, &input_ctx));
    trace.output_tokens = Some(count_tokens(&trace.text, &config.strategies, &output_ctx));
    trace
}
