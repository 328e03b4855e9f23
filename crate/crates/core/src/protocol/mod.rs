//! The HTTP header-extension protocol between activities and the services
//! implementing them.

mod callbacks;
mod invoke;
pub mod service;

use bytes::Bytes;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use callbacks::{CallbackMessage, CallbackRecord, CallbackRegistry, Delivery};
pub use invoke::{invoke, InvocationContext, InvocationOutcome, InvokeError, Pattern};

/// Header names. HTTP treats them case-insensitively; they are kept lower
/// case here so they can be used as static header names.
pub mod headers {
    pub const BASE: &str = "cpee-base";
    pub const INSTANCE: &str = "cpee-instance";
    pub const INSTANCE_URL: &str = "cpee-instance-url";
    pub const INSTANCE_UUID: &str = "cpee-instance-uuid";
    pub const CALLBACK: &str = "cpee-callback";
    pub const CALLBACK_ID: &str = "cpee-callback-id";
    pub const ACTIVITY: &str = "cpee-activity";
    pub const LABEL: &str = "cpee-label";
    pub const ENACTMENT: &str = "cpee-enactment";
    pub const UPDATE: &str = "cpee-update";
    pub const SALVAGE: &str = "cpee-salvage";
    pub const INSTANTIATION: &str = "cpee-instantiation";
    pub const EVENT: &str = "cpee-event";
}

/// Content type of a final callback that reports failure instead of a result.
pub const PROBLEM_JSON: &str = "application/problem+json";

/// A response body as received, bytes untouched.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Payload {
    pub content_type: Option<String>,
    pub bytes: Bytes,
}

impl Payload {
    pub fn new(content_type: Option<String>, bytes: impl Into<Bytes>) -> Self {
        Payload {
            content_type,
            bytes: bytes.into(),
        }
    }

    pub fn json(value: &Value) -> Self {
        Payload::new(
            Some("application/json".into()),
            serde_json::to_vec(value).expect("values serialize"),
        )
    }

    /// The payload as a script value: parsed JSON when it is JSON, the text
    /// otherwise, null when empty.
    pub fn to_value(&self) -> Value {
        if self.bytes.is_empty() {
            return Value::Null;
        }
        if let Ok(v) = serde_json::from_slice(&self.bytes) {
            return v;
        }
        Value::String(String::from_utf8_lossy(&self.bytes).into_owned())
    }

    pub fn is_problem(&self) -> bool {
        self.content_type
            .as_deref()
            .is_some_and(|c| c.starts_with(PROBLEM_JSON))
    }
}

/// `true` header values are matched case-insensitively.
pub(crate) fn flag(value: &str) -> Option<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" => Some(true),
        "false" => Some(false),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    #[serde(default)]
    pub title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}
