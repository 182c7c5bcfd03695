mod common;

use std::net::SocketAddr;
use std::sync::Arc;

use taskbench_core::client::{
    execute_request, parse_sse_frame, resolve_token_counts, CountingConfig, EndpointClient, ModelTarget,
    MonotonicClock, RequestDefaults, RequestSpec, SseDecoder, StreamEvent, Timeouts,
};
use taskbench_core::mockserver::{
    expected_latency_ms, MockProfile, MockServer, StatsSnapshot, TaskTag, TimeScale, Verbosity,
};
use taskbench_core::runner::warmup;
use taskbench_core::suite::{ChatMessage, PromptCase, Role, TaskKind};
use taskbench_core::tokenize::TokenSource;

fn localhost() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

fn spec(content: &str) -> RequestSpec {
    RequestSpec {
        messages: vec![ChatMessage {
            role: Role::User,
            content: content.into(),
        }],
        max_output_tokens: 1024,
        temperature: 0.0,
        seed: Some(0),
    }
}

async fn server(profiles: Vec<MockProfile>, scale: f64) -> MockServer {
    MockServer::start(profiles, localhost(), TimeScale::new(scale).unwrap())
        .await
        .unwrap()
}

fn target(server: &MockServer, model: &str) -> ModelTarget {
    ModelTarget::new(&server.base_url(), model).unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn five_deltas_then_usage_then_done() {
    let srv = server(vec![MockProfile::constant("five", 20.0, 10.0, 5)], 1.0).await;
    let client = EndpointClient::default();
    let clock = MonotonicClock::new();
    let t = execute_request(&client, &target(&srv, "five"), &spec("hello"), "c1", 0, &clock).await;

    assert!(t.error.is_none(), "{:?}", t.error);
    assert_eq!(t.delta_timestamps.len(), 5);
    assert_eq!(t.usage.as_ref().unwrap().completion_tokens, 5);
    assert_eq!(t.finish_reason.as_deref(), Some("stop"));
    assert_eq!(t.text.chars().count(), 20);
    let first = t.ts_first_delta.unwrap();
    assert!(t.ts_dispatch <= first);
    assert!(t.delta_timestamps.windows(2).all(|w| w[0] <= w[1]));
    assert!(*t.delta_timestamps.last().unwrap() <= t.ts_done);

    // closed form: 20 ms + 4 x 10 ms
    let e2e_ms = (t.ts_done - t.ts_dispatch) as f64 / 1e6;
    let expected = expected_latency_ms(&MockProfile::constant("five", 20.0, 10.0, 5), 5, TimeScale::default());
    assert!(e2e_ms >= expected && e2e_ms < expected * 1.5, "e2e {e2e_ms} ms vs {expected} ms");
    let ttft_ms = (first - t.ts_dispatch) as f64 / 1e6;
    assert!((20.0..40.0).contains(&ttft_ms), "ttft {ttft_ms}");
    srv.shutdown().await.unwrap();
}

#[tokio::test]
async fn unreachable_port_is_connect_failure() {
    // bind then drop to obtain a port that is almost certainly closed
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let target = ModelTarget::new(&format!("http://127.0.0.1:{port}"), "m").unwrap();
    let t = execute_request(&EndpointClient::default(), &target, &spec("x"), "c", 0, &MonotonicClock::new()).await;
    assert_eq!(t.error.as_ref().map(|e| e.kind()), Some("connect_failure"));
    assert_eq!(t.ts_first_delta, None);
    assert!(t.usage.is_none());
}

#[tokio::test]
async fn zero_delta_stream() {
    let srv = server(vec![MockProfile::constant("mute", 5.0, 5.0, 0)], 1.0).await;
    let t = execute_request(
        &EndpointClient::default(),
        &target(&srv, "mute"),
        &spec("x"),
        "c",
        0,
        &MonotonicClock::new(),
    )
    .await;
    assert!(t.error.is_none());
    assert_eq!(t.ts_first_delta, None);
    assert_eq!(t.text, "");
    assert_eq!(t.usage.unwrap().completion_tokens, 0);
    srv.shutdown().await.unwrap();
}

#[tokio::test]
async fn unknown_model_is_404_naming_known_models() {
    let srv = server(vec![MockProfile::constant("known", 1.0, 1.0, 1)], 1.0).await;
    let t = execute_request(
        &EndpointClient::default(),
        &target(&srv, "nope"),
        &spec("x"),
        "c",
        0,
        &MonotonicClock::new(),
    )
    .await;
    match t.error {
        Some(taskbench_core::client::TraceError::HttpStatus { code, message }) => {
            assert_eq!(code, 404);
            assert!(message.contains("known"), "{message}");
        }
        other => panic!("unexpected {other:?}"),
    }
    srv.shutdown().await.unwrap();
}

#[tokio::test]
async fn malformed_request_is_400() {
    let srv = server(vec![MockProfile::constant("m", 1.0, 1.0, 1)], 1.0).await;
    let http = reqwest::Client::new();
    let url = format!("{}/v1/chat/completions", srv.base_url());
    let resp = http.post(&url).body("{not json").send().await.unwrap();
    assert_eq!(resp.status().as_u16(), 400);
    let resp = http
        .post(&url)
        .json(&serde_json::json!({"model": "m", "messages": [], "stream": false}))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status().as_u16(), 400);
    srv.shutdown().await.unwrap();
}

#[tokio::test]
async fn replayed_request_streams_identical_bytes() {
    let srv = server(vec![MockProfile::constant("m", 1.0, 0.2, 12)], 1.0).await;
    let http = reqwest::Client::new();
    let url = format!("{}/v1/chat/completions", srv.base_url());
    let body = spec("Tell me something.").body("m");
    let mut bodies = Vec::new();
    for _ in 0..2 {
        let bytes = http.post(&url).json(&body).send().await.unwrap().bytes().await.unwrap();
        bodies.push(bytes);
    }
    assert_eq!(bodies[0], bodies[1]);

    // replaying the captured stream through the decoder gives the same events twice
    let decode = |bytes: &[u8]| {
        let mut d = SseDecoder::new();
        d.push(bytes)
            .iter()
            .flat_map(|f| parse_sse_frame(f).unwrap())
            .collect::<Vec<_>>()
    };
    let events = decode(&bodies[0]);
    assert_eq!(events, decode(&bodies[0]));
    assert_eq!(events.last(), Some(&StreamEvent::Done));
    let deltas = events
        .iter()
        .filter(|e| matches!(e, StreamEvent::Delta { text, .. } if !text.is_empty()))
        .count();
    assert_eq!(deltas, 12);
    srv.shutdown().await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests_raise_high_water() {
    let srv = server(vec![MockProfile::constant("m", 50.0, 5.0, 4)], 1.0).await;
    let client = EndpointClient::default();
    let tgt = target(&srv, "m");
    let clock = MonotonicClock::new();
    let (one, two) = (spec("one"), spec("two"));
    let (a, b) = tokio::join!(
        execute_request(&client, &tgt, &one, "a", 0, &clock),
        execute_request(&client, &tgt, &two, "b", 0, &clock),
    );
    assert!(a.error.is_none() && b.error.is_none());
    let stats = srv.stats();
    assert!(stats.high_water >= 2, "{stats:?}");
    assert_eq!(stats.served, 2);

    let fetched: StatsSnapshot = reqwest::get(format!("{}/debug/stats", srv.base_url()))
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(fetched.served, 2);
    assert_eq!(fetched.active, 0);
    srv.shutdown().await.unwrap();
}

#[tokio::test]
async fn max_tokens_caps_the_stream() {
    let srv = server(vec![MockProfile::constant("m", 1.0, 0.1, 50)], 1.0).await;
    let mut s = spec("x");
    s.max_output_tokens = 7;
    let t = execute_request(&EndpointClient::default(), &target(&srv, "m"), &s, "c", 0, &MonotonicClock::new()).await;
    assert_eq!(t.delta_timestamps.len(), 7);
    assert_eq!(t.finish_reason.as_deref(), Some("length"));
    srv.shutdown().await.unwrap();
}

#[tokio::test]
async fn read_timeout_is_classified() {
    let srv = server(vec![MockProfile::constant("slow", 2_000.0, 1.0, 1)], 1.0).await;
    let client = EndpointClient::new(Timeouts {
        connect_ms: 1_000,
        read_ms: 100,
    });
    let t = execute_request(&client, &target(&srv, "slow"), &spec("x"), "c", 0, &MonotonicClock::new()).await;
    assert_eq!(t.error.as_ref().map(|e| e.kind()), Some("timeout"));
    srv.shutdown().await.unwrap();
}

#[tokio::test]
async fn token_counts_from_server_usage() {
    let profile = MockProfile::constant("m", 1.0, 0.1, 3).with_rule(TaskTag::Paraphrase, Verbosity::Constant(9));
    let srv = server(vec![profile], 1.0).await;
    let case = PromptCase {
        case_id: "q#paraphrase".into(),
        question_id: "q".into(),
        task_kind: TaskKind::Paraphrase,
        messages: vec![ChatMessage {
            role: Role::User,
            content: "Paraphrase the following question without answering it.\n\nWhy?".into(),
        }],
        template_version: "paraphrase/1".into(),
    };
    let tgt = target(&srv, "m");
    let s = RequestSpec::from_case(&case, &RequestDefaults::default());
    let t = execute_request(&EndpointClient::default(), &tgt, &s, &case.case_id, 0, &MonotonicClock::new()).await;
    let t = resolve_token_counts(t, &case, &CountingConfig::default());
    let out = t.output_tokens.unwrap();
    assert_eq!((out.count, out.source), (9, TokenSource::ServerUsage));
    assert_eq!(t.input_tokens.unwrap().source, TokenSource::ServerUsage);
    srv.shutdown().await.unwrap();
}

#[tokio::test]
async fn warmup_requests_are_counted_by_the_mock() {
    let srv = server(vec![MockProfile::constant("m", 1.0, 0.1, 2)], 1.0).await;
    let client = EndpointClient::default();
    let clock = Arc::new(MonotonicClock::new());
    assert_eq!(warmup(&client, &target(&srv, "m"), 0, clock.as_ref()).await, 0);
    assert_eq!(srv.stats().served, 0);
    assert_eq!(warmup(&client, &target(&srv, "m"), 3, clock.as_ref()).await, 0);
    assert_eq!(srv.stats().served, 3);
    srv.shutdown().await.unwrap();

    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let dead = ModelTarget::new(&format!("http://127.0.0.1:{port}"), "m").unwrap();
    assert_eq!(warmup(&client, &dead, 1, clock.as_ref()).await, 1);
}
