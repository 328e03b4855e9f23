use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use pf_core::api::ApiError;
use pf_core::protocol::service::{async_ack, CallerInfo};
use serde::Deserialize;
use serde_json::{json, Value};

use super::{
    Notice, NoticeKind, Origin, TaskRequest, UserAction, Worklist, WorklistConfig, WorklistError,
};
use crate::notify::{Answer, Notifier};

/// The worklist behind its REST interface.
#[derive(Clone)]
pub struct WorklistService {
    list: Arc<Mutex<Worklist>>,
    notifier: Notifier,
}

impl WorklistService {
    /// Needs a tokio runtime; the deadline ticker runs until the service is
    /// dropped.
    pub fn new(config: WorklistConfig, notifier: Notifier) -> Self {
        let svc = WorklistService {
            list: Arc::new(Mutex::new(Worklist::new(config))),
            notifier,
        };
        let weak = Arc::downgrade(&svc.list);
        let notifier = svc.notifier.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(Duration::from_secs(1));
            loop {
                tick.tick().await;
                let Some(list) = weak.upgrade() else { break };
                let notices = list
                    .lock()
                    .expect("worklist lock")
                    .check_deadlines(Utc::now());
                dispatch(&notifier, notices);
            }
        });
        svc
    }

    pub fn with<T>(&self, f: impl FnOnce(&mut Worklist) -> T) -> T {
        f(&mut self.list.lock().expect("worklist lock"))
    }

    fn run(
        &self,
        f: impl FnOnce(&mut Worklist) -> Result<Vec<Notice>, WorklistError>,
    ) -> Result<(), WorklistError> {
        let notices = self.with(f)?;
        dispatch(&self.notifier, notices);
        Ok(())
    }
}

fn dispatch(notifier: &Notifier, notices: Vec<Notice>) {
    for n in notices {
        let event = Some(n.event);
        let answer = match n.kind {
            NoticeKind::Update => Answer::Update {
                event,
                body: n.body,
            },
            NoticeKind::Finish => Answer::Finish {
                event,
                body: n.body,
            },
            NoticeKind::Fail => Answer::Fail {
                event,
                title: "task failed".into(),
                detail: n.body.to_string(),
            },
        };
        notifier.send(&n.callback_url, answer);
    }
}

fn api_error(e: WorklistError) -> ApiError {
    let status = match e {
        WorklistError::UnknownTask(_) => StatusCode::NOT_FOUND,
        WorklistError::NotAllowed { .. } => StatusCode::FORBIDDEN,
        WorklistError::IllegalTransition { .. } | WorklistError::NotSelfService => {
            StatusCode::CONFLICT
        }
    };
    ApiError::new(status, e.to_string())
}

pub fn router(svc: WorklistService) -> Router {
    Router::new()
        .route("/", post(create))
        .route("/tasks", get(list))
        .route("/tasks/{id}", get(one))
        .route("/tasks/{id}/{action}", post(act))
        .with_state(svc)
}

async fn create(
    State(svc): State<WorklistService>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    let caller = CallerInfo::from_headers(&headers);
    let Some(callback_url) = caller.callback_url else {
        return Err(ApiError::bad_request(
            "the worklist answers asynchronously and needs a callback URL",
        ));
    };
    let request: TaskRequest = if body.is_empty() {
        TaskRequest::default()
    } else {
        serde_json::from_slice(&body)
            .map_err(|e| ApiError::bad_request(format!("invalid task request: {e}")))?
    };
    let origin = Origin {
        callback_url,
        activity: caller.activity.unwrap_or_default(),
        enactment: caller.enactment.unwrap_or_default(),
        label: caller.label.unwrap_or_default(),
        instance_url: caller.instance_url.unwrap_or_default(),
    };
    svc.run(|w| Ok(w.create(origin, request, Utc::now()).1))
        .map_err(api_error)?;
    Ok(async_ack())
}

#[derive(Deserialize)]
struct ListQuery {
    user: Option<String>,
}

async fn list(State(svc): State<WorklistService>, Query(q): Query<ListQuery>) -> Json<Value> {
    svc.with(|w| {
        let tasks: Vec<Value> = match &q.user {
            Some(u) => w.visible_to(u).into_iter().map(|t| json!(t)).collect(),
            None => w.tasks().map(|t| json!(t)).collect(),
        };
        Json(Value::Array(tasks))
    })
}

async fn one(
    State(svc): State<WorklistService>,
    Path(id): Path<String>,
) -> Result<Json<Value>, ApiError> {
    svc.with(|w| w.task(&id).map(|t| Json(json!(t))))
        .ok_or_else(|| api_error(WorklistError::UnknownTask(id)))
}

#[derive(Deserialize)]
struct ActionBody {
    user: String,
    #[serde(default)]
    result: Option<Value>,
}

async fn act(
    State(svc): State<WorklistService>,
    Path((id, action)): Path<(String, String)>,
    Json(body): Json<ActionBody>,
) -> Result<Response, ApiError> {
    let action = match action.as_str() {
        "take" => UserAction::Take,
        "return" => UserAction::Return,
        "complete" => UserAction::Complete,
        other => {
            return Err(ApiError::new(
                StatusCode::NOT_FOUND,
                format!("unknown action {other}"),
            ))
        }
    };
    svc.run(|w| w.act(&id, &body.user, action, body.result, Utc::now()))
        .map_err(api_error)?;
    let task = svc
        .with(|w| w.task(&id).map(|t| json!(t)))
        .unwrap_or(Value::Null);
    Ok(Json(task).into_response())
}
