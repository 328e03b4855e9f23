//! Starts a sub-process on an engine (the calling one or any other) and
//! answers once the child finishes.

use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::Response;
use axum::routing::post;
use axum::Router;
use pf_core::api::ApiError;
use pf_core::protocol::service::{instantiation_ack, salvage, CallerInfo};
use serde_json::{json, Value};

use crate::notify::{Answer, Notifier};

#[derive(Clone)]
pub struct Spawner {
    http: reqwest::Client,
    notifier: Notifier,
    /// How often the child's state is checked.
    pub poll: Duration,
}

impl Spawner {
    pub fn new(http: reqwest::Client, notifier: Notifier) -> Self {
        Spawner {
            http,
            notifier,
            poll: Duration::from_millis(100),
        }
    }
}

pub fn router(spawner: Spawner) -> Router {
    Router::new().route("/", post(spawn)).with_state(spawner)
}

enum Failure {
    /// Target unreachable or overloaded; the engine should retry.
    Unavailable,
    Rejected(String),
}

async fn send(req: reqwest::RequestBuilder) -> Result<Value, Failure> {
    let resp = req.send().await.map_err(|_| Failure::Unavailable)?;
    let status = resp.status();
    if status.is_server_error() {
        return Err(Failure::Unavailable);
    }
    let body: Value = resp.json().await.unwrap_or(Value::Null);
    if !status.is_success() {
        let title = body
            .get("title")
            .and_then(Value::as_str)
            .unwrap_or("request rejected");
        return Err(Failure::Rejected(format!("{status}: {title}")));
    }
    Ok(body)
}

async fn spawn(
    State(sp): State<Spawner>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    let caller = CallerInfo::from_headers(&headers);
    let callback = caller.callback_url.ok_or_else(|| {
        ApiError::bad_request("the spawner answers asynchronously and needs a callback URL")
    })?;
    let args: Value = serde_json::from_slice(&body)
        .map_err(|e| ApiError::bad_request(format!("body is not JSON: {e}")))?;
    let engine = args
        .get("engine")
        .and_then(Value::as_str)
        .map(str::to_string)
        .or(caller.base)
        .ok_or_else(|| ApiError::bad_request("no target engine"))?;
    let engine = engine.trim_end_matches('/').to_string();
    let model = match (
        args.get("model"),
        args.get("model_url").and_then(Value::as_str),
    ) {
        (Some(m), _) if !m.is_null() => m.clone(),
        (_, Some(url)) => match send(sp.http.get(url)).await {
            Ok(m) => m,
            Err(Failure::Unavailable) => return Ok(salvage()),
            Err(Failure::Rejected(why)) => {
                return Err(ApiError::bad_request(format!("model not loadable: {why}")))
            }
        },
        _ => return Err(ApiError::bad_request("model or model_url is required")),
    };

    let created = match send(sp.http.post(&engine).json(&json!({"model": model}))).await {
        Ok(c) => c,
        Err(Failure::Unavailable) => return Ok(salvage()),
        Err(Failure::Rejected(why)) => {
            return Err(ApiError::bad_request(format!("child not created: {why}")))
        }
    };
    let child = created
        .get("url")
        .and_then(Value::as_str)
        .ok_or_else(|| {
            ApiError::new(
                StatusCode::BAD_GATEWAY,
                "engine did not report the child URL",
            )
        })?
        .to_string();
    if let Some(data) = args.get("dataelements").filter(|d| d.is_object()) {
        match send(sp.http.patch(format!("{child}/dataelements")).json(data)).await {
            Ok(_) => {}
            Err(Failure::Unavailable) => return Ok(salvage()),
            Err(Failure::Rejected(why)) => {
                return Err(ApiError::new(
                    StatusCode::BAD_GATEWAY,
                    format!("child data not set: {why}"),
                ))
            }
        }
    }
    if let Err(Failure::Rejected(why)) = send(
        sp.http
            .put(format!("{child}/state"))
            .json(&json!({"state": "running"})),
    )
    .await
    {
        return Err(ApiError::new(
            StatusCode::BAD_GATEWAY,
            format!("child not started: {why}"),
        ));
    }

    let watcher = sp.clone();
    let url = child.clone();
    tokio::spawn(async move { watcher.follow(&url, &callback).await });
    Ok(instantiation_ack(&child))
}

impl Spawner {
    /// Polls the child until it ends, then answers the parent.
    async fn follow(&self, child: &str, callback: &str) {
        loop {
            tokio::time::sleep(self.poll).await;
            let state = match self.http.get(format!("{child}/state")).send().await {
                Ok(r) if r.status() == StatusCode::NOT_FOUND => "purged".to_string(),
                Ok(r) => match r.json::<Value>().await {
                    Ok(v) => v
                        .get("state")
                        .and_then(Value::as_str)
                        .unwrap_or_default()
                        .to_string(),
                    Err(_) => continue,
                },
                // Engine briefly unreachable; keep watching.
                Err(_) => continue,
            };
            match state.as_str() {
                "finished" => {
                    let data = match self.http.get(format!("{child}/dataelements")).send().await {
                        Ok(r) => r.json::<Value>().await.unwrap_or(Value::Null),
                        Err(_) => Value::Null,
                    };
                    self.notifier.send(
                        callback,
                        Answer::Finish {
                            event: None,
                            body: json!({"instance": child, "dataelements": data}),
                        },
                    );
                    return;
                }
                "abandoned" | "purged" => {
                    self.notifier.send(
                        callback,
                        Answer::Fail {
                            event: None,
                            title: "sub-process did not finish".into(),
                            detail: format!("{child} is {state}"),
                        },
                    );
                    return;
                }
                _ => {}
            }
        }
    }
}
