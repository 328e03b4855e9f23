//! HTTP control interface, subscription management and the callback
//! endpoint.
//!
//! Instance routes live under the path of the configured base URL (for
//! example `/flow/engine/{id}`) and, as an alias, under `/instances/{id}`.

use std::convert::Infallible;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, put};
use axum::{Json, Router};
use futures::StreamExt;
use serde_json::{json, Value};

use crate::engine::{Category, ContextPatch, Engine};
use crate::error::EngineError;
use crate::gateway::{SubscriptionError, SubscriptionSpec};
use crate::lifecycle::InstanceState;
use crate::model::{parse_value, Position};
use crate::protocol::{headers, CallbackMessage, Delivery, Payload, PROBLEM_JSON};

/// An error rendered as `application/problem+json`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub title: String,
    pub detail: Value,
}

impl ApiError {
    pub fn new(status: StatusCode, title: impl Into<String>) -> Self {
        ApiError {
            status,
            title: title.into(),
            detail: Value::Null,
        }
    }

    pub fn bad_request(title: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, title)
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let status = match &e {
            EngineError::NotFound(_) => StatusCode::NOT_FOUND,
            EngineError::IllegalTransition(_)
            | EngineError::IllegalState { .. }
            | EngineError::Conflict(_) => StatusCode::CONFLICT,
            EngineError::VoteRejected(_) => StatusCode::UNPROCESSABLE_ENTITY,
            EngineError::InvalidModel(_) | EngineError::BadRequest(_) => StatusCode::BAD_REQUEST,
            EngineError::Persistence(_) => StatusCode::SERVICE_UNAVAILABLE,
        };
        let detail = match &e {
            EngineError::InvalidModel(m) => serde_json::to_value(m.issues()).unwrap_or_default(),
            _ => Value::Null,
        };
        ApiError {
            status,
            title: e.to_string(),
            detail,
        }
    }
}

impl From<SubscriptionError> for ApiError {
    fn from(e: SubscriptionError) -> Self {
        ApiError::bad_request(e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({"title": self.title, "status": self.status.as_u16()});
        if !self.detail.is_null() {
            body["detail"] = self.detail;
        }
        let mut resp = (self.status, Json(body)).into_response();
        resp.headers_mut()
            .insert(header::CONTENT_TYPE, HeaderValue::from_static(PROBLEM_JSON));
        resp
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn json_body(body: &Bytes) -> ApiResult<Value> {
    if body.is_empty() {
        return Ok(Value::Null);
    }
    serde_json::from_slice(body)
        .map_err(|e| ApiError::bad_request(format!("body is not JSON: {e}")))
}

/// All routes, ready to be served.
pub fn router(engine: Engine) -> Router {
    let prefix = reqwest::Url::parse(&engine.config().base_url)
        .map(|u| u.path().trim_end_matches('/').to_string())
        .unwrap_or_default();
    let instances = instance_routes();
    let mut app = Router::new().nest("/instances", instances.clone());
    if !prefix.is_empty() && prefix != "/instances" {
        app = app.nest(&prefix, instances);
    }
    app.route("/", get(root)).with_state(engine)
}

fn instance_routes() -> Router<Engine> {
    Router::new()
        .route("/", get(list).post(create))
        .route("/subscriptions", get(list_subscriptions).post(subscribe))
        .route(
            "/subscriptions/{sid}",
            get(show_subscription).delete(unsubscribe),
        )
        .route("/subscriptions/{sid}/stream", get(stream))
        .route("/{id}", get(overview).delete(purge))
        .route("/{id}/state", get(state).put(set_state))
        .route("/{id}/model", get(model).put(put_model))
        .route(
            "/{id}/dataelements",
            get(dataelements).patch(patch_dataelements),
        )
        .route("/{id}/endpoints", get(endpoints).patch(patch_endpoints))
        .route("/{id}/attributes", get(attributes).patch(patch_attributes))
        .route(
            "/{id}/positions",
            get(positions).patch(set_positions).put(set_positions),
        )
        .route("/{id}/callbacks/{cb}", put(callback))
}

async fn root(State(engine): State<Engine>) -> Json<Value> {
    Json(json!({"engine": engine.config().base_url, "instances": engine.list().len()}))
}

async fn list(State(engine): State<Engine>) -> Json<Value> {
    Json(serde_json::to_value(engine.list()).expect("serializes"))
}

async fn create(State(engine): State<Engine>, body: Bytes) -> ApiResult<Response> {
    let doc = json_body(&body)?;
    let model = match &doc {
        Value::Null => None,
        Value::Object(m) if m.is_empty() => None,
        _ => {
            Some(parse_value(doc.get("model").cloned().unwrap_or(doc)).map_err(EngineError::from)?)
        }
    };
    let created = engine.create_instance()?;
    if let Some(model) = model {
        engine.put_model(created.id, model).await?;
    }
    let location =
        HeaderValue::from_str(&created.url).map_err(|_| ApiError::bad_request("bad base url"))?;
    let body = json!({"id": created.id, "uuid": created.uuid, "url": created.url});
    Ok((
        StatusCode::CREATED,
        [(header::LOCATION, location)],
        Json(body),
    )
        .into_response())
}

async fn overview(State(engine): State<Engine>, Path(id): Path<u64>) -> ApiResult<Json<Value>> {
    Ok(Json(
        serde_json::to_value(engine.overview(id)?).expect("serializes"),
    ))
}

async fn purge(State(engine): State<Engine>, Path(id): Path<u64>) -> ApiResult<StatusCode> {
    engine.purge(id).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn state(State(engine): State<Engine>, Path(id): Path<u64>) -> ApiResult<Json<Value>> {
    Ok(Json(json!({"state": engine.state(id)?})))
}

/// Accepts `{"state": "running"}`, `"running"` or a plain `running` body.
fn requested_state(body: &Bytes) -> ApiResult<InstanceState> {
    let text = std::str::from_utf8(body)
        .map_err(|_| ApiError::bad_request("body is not UTF-8"))?
        .trim();
    let name = match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(m)) => m.get("state").and_then(Value::as_str).map(str::to_string),
        Ok(Value::String(s)) => Some(s),
        _ => text
            .strip_prefix("state=")
            .or(Some(text))
            .map(str::to_string),
    }
    .ok_or_else(|| ApiError::bad_request("missing state"))?;
    InstanceState::parse(&name)
        .ok_or_else(|| ApiError::bad_request(format!("unknown state \"{name}\"")))
}

async fn set_state(
    State(engine): State<Engine>,
    Path(id): Path<u64>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let target = requested_state(&body)?;
    let state = engine.set_state(id, target).await?;
    Ok(Json(json!({"state": state})))
}

async fn model(State(engine): State<Engine>, Path(id): Path<u64>) -> ApiResult<Json<Value>> {
    Ok(Json(
        serde_json::to_value(engine.model(id)?).expect("serializes"),
    ))
}

async fn put_model(
    State(engine): State<Engine>,
    Path(id): Path<u64>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let model = parse_value(json_body(&body)?).map_err(EngineError::from)?;
    let changes = engine.put_model(id, model).await?;
    Ok(Json(json!({"changes": changes})))
}

fn read(engine: &Engine, id: u64, category: Category) -> ApiResult<Json<Value>> {
    Ok(Json(
        serde_json::to_value(engine.context(id, category)?).expect("serializes"),
    ))
}

async fn patch(
    engine: &Engine,
    id: u64,
    category: Category,
    body: &Bytes,
) -> ApiResult<Json<Value>> {
    let patch = ContextPatch::from_json(json_body(body)?)?;
    let delta = engine.patch_context(id, category, patch).await?;
    Ok(Json(serde_json::to_value(delta).expect("serializes")))
}

async fn dataelements(State(engine): State<Engine>, Path(id): Path<u64>) -> ApiResult<Json<Value>> {
    read(&engine, id, Category::Dataelements)
}

async fn endpoints(State(engine): State<Engine>, Path(id): Path<u64>) -> ApiResult<Json<Value>> {
    read(&engine, id, Category::Endpoints)
}

async fn attributes(State(engine): State<Engine>, Path(id): Path<u64>) -> ApiResult<Json<Value>> {
    read(&engine, id, Category::Attributes)
}

async fn patch_dataelements(
    State(engine): State<Engine>,
    Path(id): Path<u64>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    patch(&engine, id, Category::Dataelements, &body).await
}

async fn patch_endpoints(
    State(engine): State<Engine>,
    Path(id): Path<u64>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    patch(&engine, id, Category::Endpoints, &body).await
}

async fn patch_attributes(
    State(engine): State<Engine>,
    Path(id): Path<u64>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    patch(&engine, id, Category::Attributes, &body).await
}

async fn positions(
    State(engine): State<Engine>,
    Path(id): Path<u64>,
) -> ApiResult<Json<Vec<Position>>> {
    Ok(Json(engine.positions(id)?))
}

async fn set_positions(
    State(engine): State<Engine>,
    Path(id): Path<u64>,
    body: Bytes,
) -> ApiResult<Json<Vec<Position>>> {
    let positions: Vec<Position> = serde_json::from_value(json_body(&body)?).map_err(|e| {
        ApiError::bad_request(format!(
            "positions must be a list of {{node_id, mode}}: {e}"
        ))
    })?;
    Ok(Json(engine.set_positions(id, positions).await?))
}

async fn callback(
    State(engine): State<Engine>,
    Path((id, cb)): Path<(u64, String)>,
    hdrs: HeaderMap,
    body: Bytes,
) -> Response {
    let flag = |name: &str| {
        hdrs.get(name)
            .and_then(|v| v.to_str().ok())
            .is_some_and(|v| v.trim().eq_ignore_ascii_case("true"))
    };
    let content_type = hdrs
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    let events = hdrs
        .get_all(headers::EVENT)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(','))
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    let msg = CallbackMessage {
        payload: Payload::new(content_type, body),
        update: flag(headers::UPDATE),
        events,
    };
    match engine.deliver_callback(id, &cb, msg) {
        Delivery::Accepted => StatusCode::OK.into_response(),
        Delivery::Unknown => {
            ApiError::new(StatusCode::NOT_FOUND, "unknown callback").into_response()
        }
        Delivery::Suspended => {
            let mut resp =
                ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "instance is not running")
                    .into_response();
            resp.headers_mut()
                .insert(header::RETRY_AFTER, HeaderValue::from_static("1"));
            resp
        }
    }
}

fn subscription_url(engine: &Engine, sid: &str) -> String {
    format!("{}/subscriptions/{sid}", engine.config().base_url)
}

async fn list_subscriptions(State(engine): State<Engine>) -> Json<Value> {
    Json(serde_json::to_value(engine.gateway().subscriptions()).expect("serializes"))
}

async fn subscribe(State(engine): State<Engine>, body: Bytes) -> ApiResult<Response> {
    let spec = SubscriptionSpec::from_json(json_body(&body)?)?;
    let sse = spec.endpoint.is_none();
    let sid = engine.subscribe(spec)?;
    let url = subscription_url(&engine, &sid);
    let mut body = json!({"id": sid, "url": url});
    if sse {
        body["stream"] = Value::String(format!("{url}/stream"));
    }
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

async fn show_subscription(
    State(engine): State<Engine>,
    Path(sid): Path<String>,
) -> ApiResult<Json<Value>> {
    let info = engine
        .gateway()
        .subscription(&sid)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown subscription"))?;
    Ok(Json(serde_json::to_value(info).expect("serializes")))
}

async fn unsubscribe(
    State(engine): State<Engine>,
    Path(sid): Path<String>,
) -> ApiResult<StatusCode> {
    if engine.gateway().unsubscribe(&sid) {
        Ok(StatusCode::NO_CONTENT)
    } else {
        Err(ApiError::new(StatusCode::NOT_FOUND, "unknown subscription"))
    }
}

async fn stream(State(engine): State<Engine>, Path(sid): Path<String>) -> ApiResult<Response> {
    let events = engine
        .gateway()
        .stream(&sid)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no stream for this subscription"))?;
    let heartbeat = engine.config().sse_heartbeat;
    let stream = events.into_stream().map(|env| {
        Ok::<_, Infallible>(
            Event::default()
                .event(env.name())
                .json_data(&env)
                .unwrap_or_else(|_| Event::default().comment("unserializable")),
        )
    });
    Ok(Sse::new(stream)
        .keep_alive(KeepAlive::new().interval(heartbeat).text("heartbeat"))
        .into_response())
}
