//! Helpers for services on the other side of the protocol.

use std::time::Duration;

use axum::http::{HeaderMap, HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use reqwest::header::{CONTENT_TYPE, RETRY_AFTER};
use serde_json::Value;

use super::{headers, PROBLEM_JSON};

/// The engine context a service sees on an incoming invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallerInfo {
    pub callback_url: Option<String>,
    pub callback_id: Option<String>,
    pub base: Option<String>,
    pub instance: Option<u64>,
    pub instance_url: Option<String>,
    pub instance_uuid: Option<String>,
    pub activity: Option<String>,
    pub label: Option<String>,
    pub enactment: Option<String>,
}

impl CallerInfo {
    pub fn from_headers(h: &HeaderMap) -> Self {
        let get = |name: &str| {
            h.get(name)
                .and_then(|v| v.to_str().ok())
                .map(str::to_string)
        };
        CallerInfo {
            callback_url: get(headers::CALLBACK),
            callback_id: get(headers::CALLBACK_ID),
            base: get(headers::BASE),
            instance: get(headers::INSTANCE).and_then(|s| s.parse().ok()),
            instance_url: get(headers::INSTANCE_URL),
            instance_uuid: get(headers::INSTANCE_UUID),
            activity: get(headers::ACTIVITY),
            label: get(headers::LABEL),
            enactment: get(headers::ENACTMENT),
        }
    }

    /// Whether the caller can take an asynchronous answer.
    pub fn can_answer_later(&self) -> bool {
        self.callback_url.is_some()
    }
}

/// Response telling the engine the answer will arrive later.
///
/// Returns `None` when the request carried no callback URL, in which case the
/// service has to answer synchronously.
pub fn respond_async(request: &HeaderMap) -> Option<Response> {
    CallerInfo::from_headers(request)
        .can_answer_later()
        .then(async_ack)
}

/// `200` with `CPEE-CALLBACK: true` and an empty body.
pub fn async_ack() -> Response {
    (
        StatusCode::OK,
        [(
            HeaderName::from_static(headers::CALLBACK),
            HeaderValue::from_static("true"),
        )],
    )
        .into_response()
}

/// Asynchronous acknowledgement of a spawned sub-process.
pub fn instantiation_ack(child_url: &str) -> Response {
    (
        StatusCode::OK,
        [
            (
                HeaderName::from_static(headers::CALLBACK),
                HeaderValue::from_static("true"),
            ),
            (
                HeaderName::from_static(headers::INSTANTIATION),
                HeaderValue::from_static("true"),
            ),
        ],
        child_url.to_string(),
    )
        .into_response()
}

/// Response asking the engine to retry later.
pub fn salvage() -> Response {
    (
        StatusCode::SERVICE_UNAVAILABLE,
        [(
            HeaderName::from_static(headers::SALVAGE),
            HeaderValue::from_static("true"),
        )],
    )
        .into_response()
}

#[derive(Debug, thiserror::Error)]
pub enum CallbackError {
    #[error("callback unknown to the engine")]
    Gone,
    #[error("engine kept the callback suspended past the deadline")]
    Suspended,
    #[error("engine answered {0}")]
    Status(u16),
    #[error("request failed: {0}")]
    Http(String),
}

/// Sends answers to callback URLs, waiting out suspended instances.
#[derive(Clone)]
pub struct CallbackClient {
    http: reqwest::Client,
    /// How long to keep retrying while the engine answers 503.
    pub patience: Duration,
}

impl CallbackClient {
    pub fn new(http: reqwest::Client) -> Self {
        CallbackClient {
            http,
            patience: Duration::from_secs(3600),
        }
    }

    pub fn with_patience(mut self, patience: Duration) -> Self {
        self.patience = patience;
        self
    }

    /// Intermediate answer; the engine keeps waiting.
    pub async fn update(
        &self,
        url: &str,
        event: Option<&str>,
        body: &Value,
    ) -> Result<(), CallbackError> {
        self.put(
            url,
            true,
            event,
            "application/json",
            serde_json::to_vec(body).expect("values serialize"),
        )
        .await
    }

    /// Last answer.
    pub async fn finish(
        &self,
        url: &str,
        event: Option<&str>,
        body: &Value,
    ) -> Result<(), CallbackError> {
        self.put(
            url,
            false,
            event,
            "application/json",
            serde_json::to_vec(body).expect("values serialize"),
        )
        .await
    }

    /// Last answer reporting that the work failed.
    pub async fn fail(
        &self,
        url: &str,
        event: Option<&str>,
        title: &str,
        detail: &str,
    ) -> Result<(), CallbackError> {
        let body = serde_json::json!({"title": title, "detail": detail});
        self.put(
            url,
            false,
            event,
            PROBLEM_JSON,
            serde_json::to_vec(&body).expect("values serialize"),
        )
        .await
    }

    pub async fn put(
        &self,
        url: &str,
        update: bool,
        event: Option<&str>,
        content_type: &str,
        body: Vec<u8>,
    ) -> Result<(), CallbackError> {
        let deadline = tokio::time::Instant::now() + self.patience;
        loop {
            let mut req = self
                .http
                .put(url)
                .header(CONTENT_TYPE, content_type)
                .body(body.clone());
            if update {
                req = req.header(headers::UPDATE, "true");
            }
            if let Some(ev) = event {
                req = req.header(headers::EVENT, ev);
            }
            let resp = req
                .send()
                .await
                .map_err(|e| CallbackError::Http(e.to_string()))?;
            match resp.status().as_u16() {
                200..=299 => return Ok(()),
                404 | 410 => return Err(CallbackError::Gone),
                503 => {
                    let wait = resp
                        .headers()
                        .get(RETRY_AFTER)
                        .and_then(|v| v.to_str().ok())
                        .and_then(|v| v.parse::<f64>().ok())
                        .map(Duration::from_secs_f64)
                        .unwrap_or(Duration::from_secs(1))
                        .min(Duration::from_secs(5));
                    if tokio::time::Instant::now() + wait > deadline {
                        return Err(CallbackError::Suspended);
                    }
                    tokio::time::sleep(wait).await;
                }
                other => return Err(CallbackError::Status(other)),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn async_only_with_callback() {
        let mut h = HeaderMap::new();
        assert!(respond_async(&h).is_none());
        h.insert(
            "CPEE-CALLBACK",
            HeaderValue::from_static("http://e/flow/engine/1/callbacks/x"),
        );
        let r = respond_async(&h).unwrap();
        assert_eq!(r.headers()["cpee-callback"], "true");
        assert_eq!(
            CallerInfo::from_headers(&h).callback_url.as_deref(),
            Some("http://e/flow/engine/1/callbacks/x")
        );
    }
}
