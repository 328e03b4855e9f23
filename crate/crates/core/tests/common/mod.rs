#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, State};
use axum::http::HeaderMap;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use pf_core::config::EngineConfig;
use pf_core::event::{Envelope, Topic};
use pf_core::gateway::{EventStream, Selection, SubscriptionSpec};
use pf_core::protocol::service::{async_ack, salvage, CallerInfo};
use pf_core::Engine;
use serde_json::{json, Value};
use tokio::sync::{mpsc, Mutex};

#[derive(Clone)]
struct FakeState {
    calls: Arc<AtomicUsize>,
    callbacks: mpsc::UnboundedSender<CallerInfo>,
}

/// Scripted HTTP services on a local port.
pub struct Fake {
    pub base: String,
    pub calls: Arc<AtomicUsize>,
    pub callbacks: Mutex<mpsc::UnboundedReceiver<CallerInfo>>,
}

impl Fake {
    pub fn url(&self, path: &str) -> String {
        format!("{}/{}", self.base, path)
    }

    /// Next asynchronous invocation.
    pub async fn next_callback(&self) -> CallerInfo {
        tokio::time::timeout(Duration::from_secs(5), self.callbacks.lock().await.recv())
            .await
            .expect("no asynchronous invocation arrived")
            .expect("fake stopped")
    }
}

async fn sync(State(s): State<FakeState>, body: Option<Json<Value>>) -> Json<Value> {
    s.calls.fetch_add(1, Ordering::SeqCst);
    Json(body.map(|b| b.0).unwrap_or(Value::Null))
}

async fn later(State(s): State<FakeState>, headers: HeaderMap) -> Response {
    s.calls.fetch_add(1, Ordering::SeqCst);
    let _ = s.callbacks.send(CallerInfo::from_headers(&headers));
    async_ack()
}

async fn slow(State(s): State<FakeState>, Path(ms): Path<u64>) -> Json<Value> {
    s.calls.fetch_add(1, Ordering::SeqCst);
    tokio::time::sleep(Duration::from_millis(ms)).await;
    Json(json!({"slept": ms}))
}

async fn busy(State(s): State<FakeState>) -> Response {
    s.calls.fetch_add(1, Ordering::SeqCst);
    salvage()
}

async fn broken(State(s): State<FakeState>) -> Response {
    s.calls.fetch_add(1, Ordering::SeqCst);
    (axum::http::StatusCode::INTERNAL_SERVER_ERROR, "broken").into_response()
}

pub async fn fake() -> Fake {
    let (tx, rx) = mpsc::unbounded_channel();
    let calls = Arc::new(AtomicUsize::new(0));
    let state = FakeState {
        calls: calls.clone(),
        callbacks: tx,
    };
    let app = Router::new()
        .route("/sync", post(sync))
        .route("/async", post(later))
        .route("/slow/{ms}", post(slow))
        .route("/salvage", post(busy))
        .route("/error", post(broken))
        .with_state(state);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    Fake {
        base: format!("http://{addr}"),
        calls,
        callbacks: Mutex::new(rx),
    }
}

pub fn quick_config() -> EngineConfig {
    EngineConfig {
        retry_delay: Duration::from_millis(20),
        vote_timeout: Duration::from_secs(2),
        drain_timeout: Duration::from_secs(5),
        ..EngineConfig::default()
    }
}

pub fn engine() -> Engine {
    Engine::in_memory(quick_config())
}

/// SSE-mode subscription on every topic of one instance.
pub fn watch(engine: &Engine, instance: u64) -> EventStream {
    let spec = SubscriptionSpec::sse(
        Topic::ALL
            .iter()
            .map(|t| Selection::event(*t, "*"))
            .collect(),
    )
    .for_instance(instance);
    let id = engine.subscribe(spec).unwrap();
    engine.gateway().stream(&id).unwrap()
}

/// Reads events until `stop` matches one (inclusive).
pub async fn collect_until(
    stream: &mut EventStream,
    stop: impl Fn(&Envelope) -> bool,
) -> Vec<Envelope> {
    let mut out = Vec::new();
    let fut = async {
        while let Some(e) = stream.next().await {
            let done = stop(&e);
            out.push(e);
            if done {
                break;
            }
        }
    };
    if tokio::time::timeout(Duration::from_secs(10), fut)
        .await
        .is_err()
    {
        panic!(
            "timed out; events so far: {:?}",
            out.iter().map(|e| e.name()).collect::<Vec<_>>()
        );
    }
    out
}

pub fn is_state(e: &Envelope, state: &str) -> bool {
    e.topic == Topic::State && e.content["state"] == state
}

/// `event@enactment` for activity events.
pub fn activity_trace(events: &[Envelope]) -> Vec<String> {
    events
        .iter()
        .filter(|e| e.topic == Topic::Activity)
        .map(|e| {
            format!(
                "{}@{}",
                e.event,
                e.content["enactment"].as_str().unwrap_or("?")
            )
        })
        .collect()
}
