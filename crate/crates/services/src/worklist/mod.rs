//! Worklist: hands tasks of call activities to humans.
//!
//! The engine invokes the worklist asynchronously. Every task state change
//! is reported back through an update callback carrying a
//! `worklist/task-<state>` event; reaching `finished` or `failed` sends the
//! final answer.

mod http;
mod strategy;

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use http::{router, WorklistService};
pub use strategy::{skill_score, Assigner, Skills, StrategyKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Added,
    Assigned,
    Taken,
    Returned,
    Timeout,
    Invalid,
    Deleted,
    Failed,
    Finished,
}

impl TaskState {
    pub const ALL: [TaskState; 9] = [
        TaskState::Added,
        TaskState::Assigned,
        TaskState::Taken,
        TaskState::Returned,
        TaskState::Timeout,
        TaskState::Invalid,
        TaskState::Deleted,
        TaskState::Failed,
        TaskState::Finished,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskState::Added => "added",
            TaskState::Assigned => "assigned",
            TaskState::Taken => "taken",
            TaskState::Returned => "returned",
            TaskState::Timeout => "timeout",
            TaskState::Invalid => "invalid",
            TaskState::Deleted => "deleted",
            TaskState::Failed => "failed",
            TaskState::Finished => "finished",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, TaskState::Failed | TaskState::Finished)
    }

    pub fn can_become(self, to: TaskState) -> bool {
        use TaskState::*;
        matches!(
            (self, to),
            (Added, Assigned | Taken | Deleted | Invalid | Timeout)
                | (Assigned, Finished | Returned | Timeout)
                | (Returned, Assigned | Taken)
                | (Taken, Finished | Returned | Assigned | Timeout)
                | (Timeout, Assigned | Failed)
                | (Invalid, Failed)
                | (Deleted, Finished)
        )
    }

    /// The CPEE-EVENT name announcing this state.
    pub fn event(self) -> String {
        format!("worklist/task-{}", self.as_str())
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// The strategy assigns every task to one user.
    #[default]
    AutoAssign,
    /// Users take tasks from a shared list.
    SelfService,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorklistConfig {
    #[serde(default)]
    pub mode: Mode,
    pub strategy: StrategyKind,
    #[serde(default)]
    pub reassign_on_timeout: bool,
    #[serde(default)]
    pub seed: u64,
    /// Role name to its members, in assignment order.
    #[serde(default)]
    pub roles: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub skills: BTreeMap<String, Skills>,
}

impl WorklistConfig {
    pub fn new(strategy: StrategyKind) -> Self {
        WorklistConfig {
            mode: Mode::AutoAssign,
            strategy,
            reassign_on_timeout: false,
            seed: 0,
            roles: BTreeMap::new(),
            skills: BTreeMap::new(),
        }
    }

    pub fn with_role(mut self, role: &str, members: &[&str]) -> Self {
        self.roles.insert(
            role.to_string(),
            members.iter().map(|m| m.to_string()).collect(),
        );
        self
    }
}

/// What the engine sends when invoking the worklist.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskRequest {
    pub role: String,
    /// Separation of duty: users not allowed to work on the task.
    #[serde(default)]
    pub excluded_users: Vec<String>,
    /// Binding of duty: the only user allowed to work on the task.
    #[serde(default)]
    pub bound_user: Option<String>,
    #[serde(default)]
    pub skills: Skills,
    #[serde(default)]
    pub form: Value,
    #[serde(default)]
    pub payload: Value,
    /// Seconds until the task times out.
    #[serde(default)]
    pub deadline: Option<f64>,
}

/// Where a task came from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Origin {
    pub callback_url: String,
    pub activity: String,
    pub enactment: String,
    #[serde(default)]
    pub label: String,
    #[serde(default)]
    pub instance_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub origin: Origin,
    pub state: TaskState,
    pub role: String,
    pub excluded_users: Vec<String>,
    pub bound_user: Option<String>,
    pub skills: Skills,
    pub form: Value,
    pub payload: Value,
    pub deadline: Option<DateTime<Utc>>,
    #[serde(skip)]
    deadline_secs: Option<f64>,
    pub assigned_user: Option<String>,
    pub worked_by: Vec<String>,
    pub history: Vec<TaskState>,
}

impl Task {
    fn may_work(&self, user: &str, members: &[String]) -> bool {
        members.iter().any(|m| m == user)
            && !self.excluded_users.iter().any(|u| u == user)
            && self.bound_user.as_deref().is_none_or(|b| b == user)
    }

    fn is_open(&self) -> bool {
        matches!(self.state, TaskState::Assigned | TaskState::Taken)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoticeKind {
    Update,
    Finish,
    Fail,
}

/// A callback the service owes the engine.
#[derive(Debug, Clone, PartialEq)]
pub struct Notice {
    pub callback_url: String,
    pub kind: NoticeKind,
    pub event: String,
    pub body: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WorklistError {
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("task is {from}, it cannot become {to}")]
    IllegalTransition { from: TaskState, to: TaskState },
    #[error("{user} may not work on this task: {reason}")]
    NotAllowed { user: String, reason: String },
    #[error("tasks are assigned automatically on this list")]
    NotSelfService,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UserAction {
    Take,
    Return,
    Complete,
}

pub struct Worklist {
    config: WorklistConfig,
    assigner: Assigner,
    tasks: BTreeMap<String, Task>,
    next: u64,
}

impl Worklist {
    pub fn new(config: WorklistConfig) -> Self {
        let assigner = Assigner::new(config.strategy, config.seed);
        Worklist {
            config,
            assigner,
            tasks: BTreeMap::new(),
            next: 1,
        }
    }

    pub fn config(&self) -> &WorklistConfig {
        &self.config
    }

    pub fn task(&self, id: &str) -> Option<&Task> {
        self.tasks.get(id)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &Task> {
        self.tasks.values()
    }

    /// Open tasks per user.
    pub fn load(&self, user: &str) -> usize {
        self.tasks
            .values()
            .filter(|t| t.is_open() && t.assigned_user.as_deref() == Some(user))
            .count()
    }

    fn members(&self, role: &str) -> Vec<String> {
        self.config.roles.get(role).cloned().unwrap_or_default()
    }

    /// Tasks a user sees: unassigned ones of their roles plus their own.
    pub fn visible_to(&self, user: &str) -> Vec<&Task> {
        self.tasks
            .values()
            .filter(|t| match t.state {
                TaskState::Added | TaskState::Returned => t.may_work(user, &self.members(&t.role)),
                TaskState::Assigned | TaskState::Taken => t.assigned_user.as_deref() == Some(user),
                _ => false,
            })
            .collect()
    }

    fn notice(task: &Task) -> Notice {
        let (kind, body) = match task.state {
            TaskState::Finished => (
                NoticeKind::Finish,
                json!({"task": task.id, "result": task.payload.get("result").cloned().unwrap_or(Value::Null), "worked_by": task.worked_by}),
            ),
            TaskState::Failed => (
                NoticeKind::Fail,
                json!({"task": task.id, "history": task.history}),
            ),
            _ => (
                NoticeKind::Update,
                json!({"task": task.id, "state": task.state, "user": task.assigned_user, "worked_by": task.worked_by}),
            ),
        };
        Notice {
            callback_url: task.origin.callback_url.clone(),
            kind,
            event: task.state.event(),
            body,
        }
    }

    fn step(
        &mut self,
        id: &str,
        to: TaskState,
        out: &mut Vec<Notice>,
    ) -> Result<(), WorklistError> {
        let task = self
            .tasks
            .get_mut(id)
            .ok_or_else(|| WorklistError::UnknownTask(id.to_string()))?;
        if !task.state.can_become(to) {
            return Err(WorklistError::IllegalTransition {
                from: task.state,
                to,
            });
        }
        task.state = to;
        task.history.push(to);
        out.push(Self::notice(task));
        Ok(())
    }

    fn note_worker(task: &mut Task, user: &str) {
        task.assigned_user = Some(user.to_string());
        if !task.worked_by.iter().any(|w| w == user) {
            task.worked_by.push(user.to_string());
        }
    }

    /// Runs the strategy; with nobody eligible the task becomes invalid or
    /// failed.
    fn assign(
        &mut self,
        id: &str,
        avoid: Option<&str>,
        now: DateTime<Utc>,
        out: &mut Vec<Notice>,
    ) -> Result<(), WorklistError> {
        let task = self
            .tasks
            .get(id)
            .ok_or_else(|| WorklistError::UnknownTask(id.to_string()))?
            .clone();
        let members = self.members(&task.role);
        let eligible = |u: &str| task.may_work(u, &members);
        let others_exist = members
            .iter()
            .any(|m| eligible(m) && Some(m.as_str()) != avoid);
        let filter = |u: &str| eligible(u) && (!others_exist || Some(u) != avoid);
        let loads: BTreeMap<String, usize> =
            members.iter().map(|m| (m.clone(), self.load(m))).collect();
        let picked = self.assigner.pick(
            &task.role,
            &members,
            filter,
            |u| loads.get(u).copied().unwrap_or(0),
            &task.skills,
            &self.config.skills,
        );
        match picked {
            Some(user) => {
                self.step(id, TaskState::Assigned, out)?;
                let t = self.tasks.get_mut(id).expect("checked above");
                Self::note_worker(t, &user);
                t.deadline = t
                    .deadline_secs
                    .map(|s| now + Duration::milliseconds((s * 1000.0) as i64));
                if let Some(last) = out.last_mut() {
                    *last = Self::notice(t);
                }
                Ok(())
            }
            None => {
                let to = if task.state == TaskState::Timeout {
                    TaskState::Failed
                } else {
                    TaskState::Invalid
                };
                self.step(id, to, out)?;
                if to == TaskState::Invalid {
                    self.step(id, TaskState::Failed, out)?;
                }
                Ok(())
            }
        }
    }

    /// A new task from an engine invocation.
    pub fn create(
        &mut self,
        origin: Origin,
        request: TaskRequest,
        now: DateTime<Utc>,
    ) -> (String, Vec<Notice>) {
        let id = format!("task-{}", self.next);
        self.next += 1;
        let duplicate = self.tasks.values().any(|t| {
            !t.state.is_terminal()
                && t.origin.activity == origin.activity
                && t.origin.enactment == origin.enactment
                && t.origin.instance_url == origin.instance_url
        });
        let task = Task {
            id: id.clone(),
            origin,
            state: TaskState::Added,
            role: request.role,
            excluded_users: request.excluded_users,
            bound_user: request.bound_user,
            skills: request.skills,
            form: request.form,
            payload: request.payload,
            deadline: request
                .deadline
                .map(|s| now + Duration::milliseconds((s * 1000.0) as i64)),
            deadline_secs: request.deadline,
            assigned_user: None,
            worked_by: Vec::new(),
            history: vec![TaskState::Added],
        };
        let mut out = vec![Self::notice(&task)];
        self.tasks.insert(id.clone(), task);
        let result = if duplicate {
            self.step(&id, TaskState::Deleted, &mut out)
                .and_then(|_| self.step(&id, TaskState::Finished, &mut out))
        } else {
            let members = self.members(&self.tasks[&id].role);
            let anyone = members
                .iter()
                .any(|m| self.tasks[&id].may_work(m, &members));
            if !anyone {
                self.step(&id, TaskState::Invalid, &mut out)
                    .and_then(|_| self.step(&id, TaskState::Failed, &mut out))
            } else if self.config.mode == Mode::AutoAssign {
                self.assign(&id, None, now, &mut out)
            } else {
                Ok(())
            }
        };
        result.expect("creation follows legal edges");
        (id, out)
    }

    /// A user takes, returns or completes a task.
    pub fn act(
        &mut self,
        id: &str,
        user: &str,
        action: UserAction,
        result: Option<Value>,
        now: DateTime<Utc>,
    ) -> Result<Vec<Notice>, WorklistError> {
        let task = self
            .tasks
            .get(id)
            .ok_or_else(|| WorklistError::UnknownTask(id.to_string()))?;
        let members = self.members(&task.role);
        let deny = |reason: &str| {
            Err(WorklistError::NotAllowed {
                user: user.to_string(),
                reason: reason.to_string(),
            })
        };
        if task.excluded_users.iter().any(|u| u == user) {
            return deny("excluded by separation of duty");
        }
        if task.bound_user.as_deref().is_some_and(|b| b != user) {
            return deny("task is bound to another user");
        }
        let mut out = Vec::new();
        match action {
            UserAction::Take => {
                if self.config.mode != Mode::SelfService {
                    return Err(WorklistError::NotSelfService);
                }
                if !task.may_work(user, &members) {
                    return deny("not a member of the role");
                }
                self.step(id, TaskState::Taken, &mut out)?;
                let t = self.tasks.get_mut(id).expect("exists");
                Self::note_worker(t, user);
                *out.last_mut().expect("step pushed") = Self::notice(t);
            }
            UserAction::Return => {
                if task.assigned_user.as_deref() != Some(user) {
                    return deny("task is not assigned to this user");
                }
                self.step(id, TaskState::Returned, &mut out)?;
                self.tasks.get_mut(id).expect("exists").assigned_user = None;
                if self.config.mode == Mode::AutoAssign {
                    self.assign(id, Some(user), now, &mut out)?;
                }
            }
            UserAction::Complete => {
                if task.assigned_user.as_deref() != Some(user) || !task.is_open() {
                    return deny("task is not assigned to this user");
                }
                if let Some(r) = result {
                    let t = self.tasks.get_mut(id).expect("exists");
                    if !t.payload.is_object() {
                        t.payload = json!({});
                    }
                    t.payload["result"] = r;
                }
                self.step(id, TaskState::Finished, &mut out)?;
            }
        }
        Ok(out)
    }

    /// Times out overdue tasks, then reassigns or fails them.
    pub fn check_deadlines(&mut self, now: DateTime<Utc>) -> Vec<Notice> {
        let overdue: Vec<(String, Option<String>)> = self
            .tasks
            .values()
            .filter(|t| {
                t.state.can_become(TaskState::Timeout) && t.deadline.is_some_and(|d| d <= now)
            })
            .map(|t| (t.id.clone(), t.assigned_user.clone()))
            .collect();
        let mut out = Vec::new();
        for (id, previous) in overdue {
            if self.step(&id, TaskState::Timeout, &mut out).is_err() {
                continue;
            }
            let t = self.tasks.get_mut(&id).expect("exists");
            t.deadline = None;
            t.assigned_user = None;
            if self.config.reassign_on_timeout {
                let _ = self.assign(&id, previous.as_deref(), now, &mut out);
            } else {
                let _ = self.step(&id, TaskState::Failed, &mut out);
            }
        }
        out
    }

    /// Forgets finished and failed tasks.
    pub fn prune(&mut self) {
        self.tasks.retain(|_, t| !t.state.is_terminal());
    }
}
