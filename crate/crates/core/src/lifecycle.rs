//! Instance and activity lifecycle state machines.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceState {
    Ready,
    Running,
    Stopping,
    Stopped,
    Finished,
    Abandoned,
    Purged,
}

impl InstanceState {
    pub const ALL: [InstanceState; 7] = [
        InstanceState::Ready,
        InstanceState::Running,
        InstanceState::Stopping,
        InstanceState::Stopped,
        InstanceState::Finished,
        InstanceState::Abandoned,
        InstanceState::Purged,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InstanceState::Ready => "ready",
            InstanceState::Running => "running",
            InstanceState::Stopping => "stopping",
            InstanceState::Stopped => "stopped",
            InstanceState::Finished => "finished",
            InstanceState::Abandoned => "abandoned",
            InstanceState::Purged => "purged",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.as_str() == s)
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, InstanceState::Finished | InstanceState::Purged)
    }

    /// States in which model, context and positions may be changed from
    /// outside.
    pub fn is_editable(self) -> bool {
        matches!(self, InstanceState::Ready | InstanceState::Stopped)
    }
}

impl fmt::Display for InstanceState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What drives a transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cause {
    /// A control interface request.
    Command,
    /// A failure inside the execution unit.
    Error,
    /// The execution unit reached its natural end (or finished draining).
    Completion,
}

impl Cause {
    pub const ALL: [Cause; 3] = [Cause::Command, Cause::Error, Cause::Completion];
}

/// The legal edge table.
pub fn transition_allowed(from: InstanceState, to: InstanceState, cause: Cause) -> bool {
    use Cause::*;
    use InstanceState::*;
    match (from, to) {
        (Ready, Running) | (Ready, Abandoned) => cause == Command,
        (Running, Stopping) => matches!(cause, Command | Error),
        (Running, Finished) => cause == Completion,
        (Running, Purged) => cause == Command,
        // Reached once the executor has drained, or forced by the drain timeout.
        (Stopping, Stopped) => matches!(cause, Completion | Error),
        (Stopped, Running) | (Stopped, Abandoned) => cause == Command,
        (Abandoned, Purged) => cause == Command,
        _ => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("illegal transition from {from} to {to} ({cause:?})")]
pub struct IllegalTransition {
    pub from: InstanceState,
    pub to: InstanceState,
    pub cause: Cause,
}

pub fn check_transition(
    from: InstanceState,
    to: InstanceState,
    cause: Cause,
) -> Result<(), IllegalTransition> {
    if transition_allowed(from, to, cause) {
        Ok(())
    } else {
        Err(IllegalTransition { from, to, cause })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivityState {
    SyncingBefore,
    Calling,
    Receiving,
    Manipulating,
    Failed,
    Status,
    Done,
    SyncingAfter,
}

impl ActivityState {
    pub const ALL: [ActivityState; 8] = [
        ActivityState::SyncingBefore,
        ActivityState::Calling,
        ActivityState::Receiving,
        ActivityState::Manipulating,
        ActivityState::Failed,
        ActivityState::Status,
        ActivityState::Done,
        ActivityState::SyncingAfter,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ActivityState::SyncingBefore => "syncing_before",
            ActivityState::Calling => "calling",
            ActivityState::Receiving => "receiving",
            ActivityState::Manipulating => "manipulating",
            ActivityState::Failed => "failed",
            ActivityState::Status => "status",
            ActivityState::Done => "done",
            ActivityState::SyncingAfter => "syncing_after",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.as_str() == s)
    }

    pub fn can_follow(self, prev: ActivityState) -> bool {
        use ActivityState::*;
        matches!(
            (prev, self),
            (SyncingBefore, Calling)
                | (Calling, Receiving)
                | (Calling, Failed)
                | (Receiving, Manipulating)
                | (Manipulating, Receiving)
                | (Manipulating, Failed)
                | (Manipulating, Status)
                | (Failed, Status)
                | (Status, Done)
                | (Done, SyncingAfter)
        )
    }
}

impl fmt::Display for ActivityState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
