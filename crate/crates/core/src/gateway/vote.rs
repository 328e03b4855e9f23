//! Vote responses and how several of them combine into one verdict.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueTarget {
    Condition,
    Dataelement,
    Endpoint,
    Attribute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValuePayload {
    pub target: ValueTarget,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub value: Value,
}

impl ValuePayload {
    pub fn condition(value: bool) -> Self {
        ValuePayload {
            target: ValueTarget::Condition,
            name: None,
            value: Value::Bool(value),
        }
    }

    pub fn named(target: ValueTarget, name: impl Into<String>, value: Value) -> Self {
        ValuePayload {
            target,
            name: Some(name.into()),
            value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VoteResponse {
    /// Don't care, or approval.
    Ack,
    /// The real answer follows later through the vote callback URL.
    Callback,
    Skip,
    Stop,
    Start,
    Value(ValuePayload),
}

impl VoteResponse {
    /// Reads a vote answer from an HTTP body: empty means ack, otherwise a
    /// JSON response object, a JSON string or a bare kind name.
    pub fn parse_body(body: &[u8]) -> Result<VoteResponse, String> {
        let text = std::str::from_utf8(body).map_err(|e| e.to_string())?.trim();
        if text.is_empty() {
            return Ok(VoteResponse::Ack);
        }
        match serde_json::from_str::<Value>(text) {
            Ok(Value::String(s)) => Self::from_name(&s),
            Ok(v @ Value::Object(_)) => serde_json::from_value(v).map_err(|e| e.to_string()),
            Ok(other) => Err(format!("unsupported vote answer {other}")),
            Err(_) => Self::from_name(text),
        }
    }

    fn from_name(name: &str) -> Result<VoteResponse, String> {
        Ok(match name {
            "ack" => VoteResponse::Ack,
            "callback" => VoteResponse::Callback,
            "skip" => VoteResponse::Skip,
            "stop" => VoteResponse::Stop,
            "start" => VoteResponse::Start,
            other => return Err(format!("unknown vote answer \"{other}\"")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", content = "values", rename_all = "snake_case")]
pub enum Action {
    SetValues(Vec<ValuePayload>),
    StartInstance,
    SkipActivity,
    StopInstance,
    Proceed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub actions: Vec<Action>,
    pub blocked: bool,
}

impl Verdict {
    pub fn proceed() -> Self {
        Verdict {
            actions: vec![Action::Proceed],
            blocked: false,
        }
    }

    pub fn values(&self) -> &[ValuePayload] {
        self.actions
            .iter()
            .find_map(|a| match a {
                Action::SetValues(v) => Some(v.as_slice()),
                _ => None,
            })
            .unwrap_or_default()
    }

    pub fn skips(&self) -> bool {
        self.actions.contains(&Action::SkipActivity)
    }

    pub fn stops(&self) -> bool {
        self.actions.contains(&Action::StopInstance)
    }

    pub fn starts(&self) -> bool {
        self.actions.contains(&Action::StartInstance)
    }

    /// The agreed value for a condition vote, if any.
    pub fn condition_value(&self) -> Option<bool> {
        self.values()
            .iter()
            .find(|v| v.target == ValueTarget::Condition)
            .and_then(|v| v.value.as_bool())
    }
}

/// Combines final vote responses. `callback` entries that never got resolved
/// count as `ack`.
///
/// Values are grouped per target and name. Responses that disagree within a
/// group cannot be combined and stop the instance; agreeing groups are set.
/// Start and stop cannot be combined either: when both are present the
/// verdict is blocked and carries no action. Otherwise actions are ordered
/// set_values, start, skip, stop, and `proceed` closes the list when nothing
/// skipped or stopped.
pub fn combine_votes(responses: &[VoteResponse]) -> Verdict {
    let mut groups: BTreeMap<(ValueTarget, Option<String>), Vec<&Value>> = BTreeMap::new();
    let (mut skip, mut stop, mut start) = (false, false, false);
    for r in responses {
        match r {
            VoteResponse::Ack | VoteResponse::Callback => {}
            VoteResponse::Skip => skip = true,
            VoteResponse::Stop => stop = true,
            VoteResponse::Start => start = true,
            VoteResponse::Value(v) => groups
                .entry((v.target, v.name.clone()))
                .or_default()
                .push(&v.value),
        }
    }
    let mut agreed = Vec::new();
    for ((target, name), values) in groups {
        if values.windows(2).all(|w| w[0] == w[1]) {
            agreed.push(ValuePayload {
                target,
                name,
                value: values[0].clone(),
            });
        } else {
            stop = true;
        }
    }
    if start && stop {
        return Verdict {
            actions: Vec::new(),
            blocked: true,
        };
    }
    let mut actions = Vec::new();
    if !agreed.is_empty() {
        actions.push(Action::SetValues(agreed));
    }
    if start {
        actions.push(Action::StartInstance);
    }
    if skip {
        actions.push(Action::SkipActivity);
    }
    if stop {
        actions.push(Action::StopInstance);
    }
    if !skip && !stop {
        actions.push(Action::Proceed);
    }
    Verdict {
        actions,
        blocked: false,
    }
}
