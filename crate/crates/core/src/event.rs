//! Engine events and the envelope they travel in.

use std::fmt;

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use uuid::Uuid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topic {
    State,
    Activity,
    Position,
    Status,
    Dataelements,
    Description,
    Endpoints,
    Attributes,
    Condition,
    Task,
}

impl Topic {
    pub const ALL: [Topic; 10] = [
        Topic::State,
        Topic::Activity,
        Topic::Position,
        Topic::Status,
        Topic::Dataelements,
        Topic::Description,
        Topic::Endpoints,
        Topic::Attributes,
        Topic::Condition,
        Topic::Task,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Topic::State => "state",
            Topic::Activity => "activity",
            Topic::Position => "position",
            Topic::Status => "status",
            Topic::Dataelements => "dataelements",
            Topic::Description => "description",
            Topic::Endpoints => "endpoints",
            Topic::Attributes => "attributes",
            Topic::Condition => "condition",
            Topic::Task => "task",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Whether subscribers may vote on `topic/event`. `*` counts as votable when
/// the topic has at least one votable event.
pub fn is_votable(topic: Topic, event: &str) -> bool {
    match topic {
        Topic::State
        | Topic::Dataelements
        | Topic::Endpoints
        | Topic::Attributes
        | Topic::Description => {
            matches!(event, "change" | "*")
        }
        Topic::Condition => matches!(event, "eval" | "*"),
        Topic::Activity => matches!(event, "syncing_before" | "syncing_after" | "*"),
        _ => false,
    }
}

/// Metadata attached to an envelope when it is a vote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteTicket {
    pub id: String,
    /// Where a subscriber that answered `callback` sends its final answer.
    pub callback: String,
}

/// Wire form of every event and vote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub topic: Topic,
    pub event: String,
    pub timestamp: String,
    pub instance: u64,
    #[serde(rename = "instance-uuid")]
    pub instance_uuid: Uuid,
    pub content: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vote: Option<VoteTicket>,
}

impl Envelope {
    pub fn new(
        topic: Topic,
        event: impl Into<String>,
        instance: u64,
        instance_uuid: Uuid,
        content: Value,
    ) -> Self {
        Envelope {
            topic,
            event: event.into(),
            timestamp: now_rfc3339(),
            instance,
            instance_uuid,
            content,
            vote: None,
        }
    }

    /// `topic/event`, the SSE event name.
    pub fn name(&self) -> String {
        format!("{}/{}", self.topic, self.event)
    }
}

pub fn now_rfc3339() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}
