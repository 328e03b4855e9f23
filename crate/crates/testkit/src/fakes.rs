use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::Response;
use axum::routing::post;
use axum::{Json, Router};
use pf_core::protocol::service::{async_ack, CallbackClient, CallerInfo};
use serde_json::{json, Value};

#[derive(Default, Debug)]
pub struct ServiceStats {
    pub sync_calls: AtomicU64,
    pub async_calls: AtomicU64,
    pub updates_sent: AtomicU64,
    pub finals_sent: AtomicU64,
    /// Callback URLs of asynchronous invocations, in arrival order.
    pub callbacks: Mutex<Vec<String>>,
}

impl ServiceStats {
    pub fn callbacks(&self) -> Vec<String> {
        self.callbacks.lock().expect("stats lock").clone()
    }
}

#[derive(Clone)]
struct Shared {
    stats: Arc<ServiceStats>,
    client: CallbackClient,
}

/// Deterministic services on a local port:
///
/// * `POST /sync` answers with the request body.
/// * `POST /updates/{n}` answers asynchronously with `n` update PUTs and one
///   final PUT, in order.
/// * `POST /slow/{ms}` answers synchronously after a delay.
/// * `POST /hold` answers asynchronously and never sends anything; the
///   callback URL is left to the test.
/// * `POST /fail` answers 500.
pub struct ScriptedServices {
    pub base: String,
    pub stats: Arc<ServiceStats>,
}

impl ScriptedServices {
    pub async fn start() -> Self {
        let stats = Arc::new(ServiceStats::default());
        let shared = Shared {
            stats: stats.clone(),
            client: CallbackClient::new(reqwest::Client::new()),
        };
        let app = Router::new()
            .route("/sync", post(sync))
            .route("/updates/{n}", post(updates))
            .route("/slow/{ms}", post(slow))
            .route("/hold", post(hold))
            .route("/fail", post(fail))
            .with_state(shared);
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0")
            .await
            .expect("bind");
        let addr = listener.local_addr().expect("addr");
        tokio::spawn(async move { axum::serve(listener, app).await.expect("serve") });
        ScriptedServices {
            base: format!("http://{addr}"),
            stats,
        }
    }

    pub fn sync_url(&self) -> String {
        format!("{}/sync", self.base)
    }

    pub fn updates_url(&self, n: u8) -> String {
        format!("{}/updates/{n}", self.base)
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}/{}", self.base, path.trim_start_matches('/'))
    }
}

async fn sync(State(s): State<Shared>, body: Option<Json<Value>>) -> Json<Value> {
    s.stats.sync_calls.fetch_add(1, Ordering::SeqCst);
    Json(body.map(|b| b.0).unwrap_or(Value::Null))
}

async fn updates(State(s): State<Shared>, Path(n): Path<u64>, headers: HeaderMap) -> Response {
    s.stats.async_calls.fetch_add(1, Ordering::SeqCst);
    let caller = CallerInfo::from_headers(&headers);
    let url = caller.callback_url.expect("engine sends a callback URL");
    s.stats
        .callbacks
        .lock()
        .expect("stats lock")
        .push(url.clone());
    tokio::spawn(async move {
        for i in 0..n {
            s.client
                .update(&url, None, &json!({"i": i}))
                .await
                .expect("update delivered");
            s.stats.updates_sent.fetch_add(1, Ordering::SeqCst);
        }
        s.client
            .finish(&url, None, &json!({"i": n}))
            .await
            .expect("final delivered");
        s.stats.finals_sent.fetch_add(1, Ordering::SeqCst);
    });
    async_ack()
}

async fn slow(State(s): State<Shared>, Path(ms): Path<u64>) -> Json<Value> {
    s.stats.sync_calls.fetch_add(1, Ordering::SeqCst);
    tokio::time::sleep(Duration::from_millis(ms)).await;
    Json(json!({"slept": ms}))
}

async fn hold(State(s): State<Shared>, headers: HeaderMap) -> Response {
    s.stats.async_calls.fetch_add(1, Ordering::SeqCst);
    if let Some(url) = CallerInfo::from_headers(&headers).callback_url {
        s.stats.callbacks.lock().expect("stats lock").push(url);
    }
    async_ack()
}

async fn fail() -> (StatusCode, &'static str) {
    (StatusCode::INTERNAL_SERVER_ERROR, "out of order")
}
