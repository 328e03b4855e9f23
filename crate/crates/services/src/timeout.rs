//! Answers after a given number of seconds.

use std::collections::HashMap;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::HeaderMap;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use pf_core::api::ApiError;
use pf_core::protocol::service::{async_ack, CallerInfo};
use serde_json::{json, Value};

use crate::notify::{Answer, Notifier};

/// Reads `timeout` (or `duration`) from the query or a JSON body. Numbers
/// may arrive as strings since query arguments are always text.
fn requested(query: &HashMap<String, String>, body: &Bytes) -> Result<f64, ApiError> {
    let doc: Value = if body.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(body)
            .map_err(|e| ApiError::bad_request(format!("body is not JSON: {e}")))?
    };
    let raw = ["timeout", "duration"]
        .iter()
        .find_map(|k| {
            doc.get(*k)
                .cloned()
                .or_else(|| query.get(*k).map(|s| Value::String(s.clone())))
        })
        .unwrap_or(json!(0));
    let secs = match &raw {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
    .filter(|s: &f64| s.is_finite())
    .ok_or_else(|| ApiError::bad_request(format!("timeout must be a number, got {raw}")))?;
    if secs < 0.0 {
        return Err(ApiError::bad_request(format!(
            "timeout must not be negative, got {secs}"
        )));
    }
    Ok(secs)
}

pub fn router(notifier: Notifier) -> Router {
    Router::new()
        .route("/", post(wait).get(wait))
        .with_state(notifier)
}

async fn wait(
    State(notifier): State<Notifier>,
    headers: HeaderMap,
    Query(query): Query<HashMap<String, String>>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let secs = requested(&query, &body)?;
    let answer = json!({"timeout": secs});
    let caller = CallerInfo::from_headers(&headers);
    match caller.callback_url {
        None => {
            tokio::time::sleep(Duration::from_secs_f64(secs)).await;
            Ok(Json(answer).into_response())
        }
        Some(url) => {
            tokio::spawn(async move {
                tokio::time::sleep(Duration::from_secs_f64(secs)).await;
                notifier.send(
                    &url,
                    Answer::Finish {
                        event: None,
                        body: answer,
                    },
                );
            });
            Ok(async_ack())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argument_forms() {
        let q = |k: &str, v: &str| HashMap::from([(k.to_string(), v.to_string())]);
        assert_eq!(
            requested(&HashMap::new(), &Bytes::from_static(b"{\"timeout\": 2}")).unwrap(),
            2.0
        );
        assert_eq!(
            requested(&q("duration", "0.5"), &Bytes::new()).unwrap(),
            0.5
        );
        assert_eq!(requested(&HashMap::new(), &Bytes::new()).unwrap(), 0.0);
        assert!(requested(&q("timeout", "-1"), &Bytes::new()).is_err());
        assert!(requested(
            &HashMap::new(),
            &Bytes::from_static(b"{\"timeout\": \"soon\"}")
        )
        .is_err());
    }
}
