use std::time::Duration;

use reqwest::header::{HeaderMap, HeaderName, HeaderValue, CONTENT_TYPE};
use reqwest::Method;
use serde_json::Value;
use uuid::Uuid;

use super::{flag, headers, Payload};

/// Everything the request headers of one invocation are built from.
#[derive(Debug, Clone, PartialEq)]
pub struct InvocationContext {
    pub base: String,
    pub instance: u64,
    pub instance_url: String,
    pub instance_uuid: Uuid,
    pub callback_url: String,
    pub callback_id: String,
    pub activity: String,
    pub label: String,
    pub enactment: String,
}

impl InvocationContext {
    pub fn headers(&self) -> HeaderMap {
        let mut map = HeaderMap::new();
        let mut put = |name: &'static str, value: &str| {
            // Header values are ASCII only; anything else is replaced.
            let v = HeaderValue::from_str(value).unwrap_or_else(|_| {
                HeaderValue::from_str(
                    &value.replace(|c: char| !c.is_ascii() || c.is_control(), "?"),
                )
                .expect("sanitized header")
            });
            map.insert(HeaderName::from_static(name), v);
        };
        put(headers::BASE, &self.base);
        put(headers::INSTANCE, &self.instance.to_string());
        put(headers::INSTANCE_URL, &self.instance_url);
        put(headers::INSTANCE_UUID, &self.instance_uuid.to_string());
        put(headers::CALLBACK, &self.callback_url);
        put(headers::CALLBACK_ID, &self.callback_id);
        put(headers::ACTIVITY, &self.activity);
        put(headers::LABEL, &self.label);
        put(headers::ENACTMENT, &self.enactment);
        map
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Pattern {
    /// The answer is in the response.
    Synchronous(Payload),
    /// Answers will arrive as PUTs to the callback URL.
    Asynchronous,
    /// The service cannot answer now; retry later.
    Salvageable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvocationOutcome {
    pub pattern: Pattern,
    /// Names from CPEE-EVENT headers.
    pub events: Vec<String>,
    /// Sub-process instance URL announced with CPEE-INSTANTIATION.
    pub instantiation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum InvokeError {
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("service answered {status}: {body}")]
    Status { status: u16, body: String },
    #[error("no answer within {0:?}")]
    Timeout(Duration),
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// Sends one invocation and classifies the response.
pub async fn invoke(
    http: &reqwest::Client,
    method: &str,
    url: &str,
    arguments: &Value,
    ctx: &InvocationContext,
    timeout: Duration,
) -> Result<InvocationOutcome, InvokeError> {
    let method = Method::from_bytes(method.to_ascii_uppercase().as_bytes())
        .map_err(|_| InvokeError::Protocol(format!("invalid method {method}")))?;
    let mut req = http
        .request(method.clone(), url)
        .headers(ctx.headers())
        .timeout(timeout);
    req = if method == Method::GET || method == Method::DELETE {
        let pairs: Vec<(String, String)> = arguments
            .as_object()
            .map(|m| {
                m.iter()
                    .map(|(k, v)| {
                        (
                            k.clone(),
                            v.as_str()
                                .map(str::to_string)
                                .unwrap_or_else(|| v.to_string()),
                        )
                    })
                    .collect()
            })
            .unwrap_or_default();
        req.query(&pairs)
    } else {
        req.json(arguments)
    };
    let resp = req.send().await.map_err(|e| {
        if e.is_timeout() {
            InvokeError::Timeout(timeout)
        } else {
            InvokeError::Connect(e.to_string())
        }
    })?;
    let status = resp.status();
    let hdrs = resp.headers().clone();
    let content_type = hdrs
        .get(CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    let body = resp.bytes().await.map_err(|e| {
        if e.is_timeout() {
            InvokeError::Timeout(timeout)
        } else {
            InvokeError::Connect(e.to_string())
        }
    })?;
    classify(status.as_u16(), &hdrs, Payload::new(content_type, body))
}

fn header_flag(hdrs: &HeaderMap, name: &str) -> Result<bool, InvokeError> {
    match hdrs.get(name) {
        None => Ok(false),
        Some(v) => match v.to_str().ok().and_then(flag) {
            Some(true) => Ok(true),
            _ => Err(InvokeError::Protocol(format!(
                "{name} must be \"true\", got {v:?}"
            ))),
        },
    }
}

/// Maps a service response onto the interaction patterns.
pub fn classify(
    status: u16,
    hdrs: &HeaderMap,
    payload: Payload,
) -> Result<InvocationOutcome, InvokeError> {
    let salvage = header_flag(hdrs, headers::SALVAGE)?;
    let instantiation = header_flag(hdrs, headers::INSTANTIATION)?;
    let callback = header_flag(hdrs, headers::CALLBACK)?;
    if salvage && callback {
        return Err(InvokeError::Protocol(
            "CPEE-SALVAGE cannot be combined with CPEE-CALLBACK".into(),
        ));
    }
    let events = hdrs
        .get_all(headers::EVENT)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(','))
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if salvage {
        return Ok(InvocationOutcome {
            pattern: Pattern::Salvageable,
            events,
            instantiation: None,
        });
    }
    if status >= 400 {
        return Err(InvokeError::Status {
            status,
            body: String::from_utf8_lossy(&payload.bytes).into_owned(),
        });
    }
    let instantiation = instantiation.then(|| match payload.to_value() {
        Value::String(s) => s.trim().to_string(),
        other => other
            .get("url")
            .and_then(Value::as_str)
            .map(str::to_string)
            .unwrap_or_else(|| other.to_string()),
    });
    let pattern = if callback {
        Pattern::Asynchronous
    } else {
        Pattern::Synchronous(payload)
    };
    Ok(InvocationOutcome {
        pattern,
        events,
        instantiation,
    })
}
