//! Tree-structured process models.
//!
//! A model is a tree of [`Node`]s rooted in a sequence, plus the endpoint,
//! dataelement and attribute maps it was designed with. Models travel as JSON
//! documents; [`parse_model`] validates structure and reports every problem
//! with the path of the offending node.

mod diff;

pub use diff::{apply_changes, diff_models, ChangeSet, NodeChange, NodeContent};

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

/// Source text of a DataScript program or expression.
pub type ScriptSource = String;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Sequence,
    Call,
    Manipulate,
    Parallel,
    ParallelBranch,
    Choose,
    Alternative,
    Otherwise,
    Loop,
    Terminate,
}

impl NodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Sequence => "sequence",
            NodeKind::Call => "call",
            NodeKind::Manipulate => "manipulate",
            NodeKind::Parallel => "parallel",
            NodeKind::ParallelBranch => "parallel_branch",
            NodeKind::Choose => "choose",
            NodeKind::Alternative => "alternative",
            NodeKind::Otherwise => "otherwise",
            NodeKind::Loop => "loop",
            NodeKind::Terminate => "terminate",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "sequence" => NodeKind::Sequence,
            "call" => NodeKind::Call,
            "manipulate" => NodeKind::Manipulate,
            "parallel" => NodeKind::Parallel,
            "parallel_branch" => NodeKind::ParallelBranch,
            "choose" => NodeKind::Choose,
            "alternative" => NodeKind::Alternative,
            "otherwise" => NodeKind::Otherwise,
            "loop" => NodeKind::Loop,
            "terminate" => NodeKind::Terminate,
            _ => return None,
        })
    }

    /// Activities are the nodes an execution can be positioned at.
    pub fn is_activity(self) -> bool {
        matches!(self, NodeKind::Call | NodeKind::Manipulate)
    }

    fn is_leaf(self) -> bool {
        matches!(
            self,
            NodeKind::Call | NodeKind::Manipulate | NodeKind::Terminate
        )
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopMode {
    #[default]
    PreTest,
    PostTest,
}

/// Join condition of a parallel node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wait {
    All,
    Count(usize),
}

impl Wait {
    /// Number of branches to wait for, given the branch count.
    pub fn required(self, branches: usize) -> usize {
        match self {
            Wait::All => branches,
            Wait::Count(n) => n.min(branches),
        }
    }
}

impl Serialize for Wait {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Wait::All => s.serialize_str("all"),
            Wait::Count(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Wait {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match Value::deserialize(d)? {
            Value::String(s) if s == "all" => Ok(Wait::All),
            Value::Number(n) => n
                .as_u64()
                .map(|n| Wait::Count(n as usize))
                .ok_or_else(|| D::Error::custom("wait must be a non-negative integer or \"all\"")),
            other => Err(D::Error::custom(format!(
                "wait must be a non-negative integer or \"all\", got {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scripts {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prepare: Option<ScriptSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finalize: Option<ScriptSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub update: Option<ScriptSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rescue: Option<ScriptSource>,
}

impl Scripts {
    pub fn is_empty(&self) -> bool {
        self.prepare.is_none()
            && self.finalize.is_none()
            && self.update.is_none()
            && self.rescue.is_none()
    }
}

fn default_method() -> String {
    "POST".to_string()
}

fn is_default_method(m: &String) -> bool {
    m == "POST"
}

/// How a call activity invokes its functionality. Argument values are
/// DataScript expressions evaluated against the (prepared) instance context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvocationParameters {
    #[serde(default = "default_method", skip_serializing_if = "is_default_method")]
    pub method: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub arguments: BTreeMap<String, ScriptSource>,
}

impl Default for InvocationParameters {
    fn default() -> Self {
        InvocationParameters {
            method: default_method(),
            arguments: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub label: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<Node>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameters: Option<InvocationParameters>,
    #[serde(default, skip_serializing_if = "Scripts::is_empty")]
    pub scripts: Scripts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<ScriptSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loop_mode: Option<LoopMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wait: Option<Wait>,
}

impl Node {
    fn bare(id: impl Into<String>, kind: NodeKind) -> Self {
        Node {
            id: id.into(),
            kind,
            label: String::new(),
            children: Vec::new(),
            endpoint_key: None,
            parameters: None,
            scripts: Scripts::default(),
            condition: None,
            loop_mode: None,
            wait: None,
        }
    }

    pub fn sequence(id: impl Into<String>, children: Vec<Node>) -> Self {
        Node {
            children,
            ..Node::bare(id, NodeKind::Sequence)
        }
    }

    pub fn call(id: impl Into<String>, endpoint_key: impl Into<String>) -> Self {
        Node {
            endpoint_key: Some(endpoint_key.into()),
            ..Node::bare(id, NodeKind::Call)
        }
    }

    pub fn manipulate(id: impl Into<String>, finalize: impl Into<String>) -> Self {
        Node {
            scripts: Scripts {
                finalize: Some(finalize.into()),
                ..Scripts::default()
            },
            ..Node::bare(id, NodeKind::Manipulate)
        }
    }

    pub fn parallel(id: impl Into<String>, wait: Wait, branches: Vec<Node>) -> Self {
        Node {
            wait: Some(wait),
            children: branches,
            ..Node::bare(id, NodeKind::Parallel)
        }
    }

    pub fn branch(id: impl Into<String>, children: Vec<Node>) -> Self {
        Node {
            children,
            ..Node::bare(id, NodeKind::ParallelBranch)
        }
    }

    pub fn choose(id: impl Into<String>, arms: Vec<Node>) -> Self {
        Node {
            children: arms,
            ..Node::bare(id, NodeKind::Choose)
        }
    }

    pub fn alternative(
        id: impl Into<String>,
        condition: impl Into<String>,
        children: Vec<Node>,
    ) -> Self {
        Node {
            condition: Some(condition.into()),
            children,
            ..Node::bare(id, NodeKind::Alternative)
        }
    }

    pub fn otherwise(id: impl Into<String>, children: Vec<Node>) -> Self {
        Node {
            children,
            ..Node::bare(id, NodeKind::Otherwise)
        }
    }

    pub fn looped(
        id: impl Into<String>,
        mode: LoopMode,
        condition: impl Into<String>,
        children: Vec<Node>,
    ) -> Self {
        Node {
            condition: Some(condition.into()),
            loop_mode: Some(mode),
            children,
            ..Node::bare(id, NodeKind::Loop)
        }
    }

    pub fn terminate(id: impl Into<String>) -> Self {
        Node::bare(id, NodeKind::Terminate)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn with_scripts(mut self, scripts: Scripts) -> Self {
        self.scripts = scripts;
        self
    }

    pub fn with_parameters(mut self, parameters: InvocationParameters) -> Self {
        self.parameters = Some(parameters);
        self
    }

    pub fn loop_mode(&self) -> LoopMode {
        self.loop_mode.unwrap_or_default()
    }

    /// Pre-order traversal of this node and all descendants.
    pub fn walk(&self) -> impl Iterator<Item = &Node> {
        let mut stack = vec![self];
        std::iter::from_fn(move || {
            let node = stack.pop()?;
            stack.extend(node.children.iter().rev());
            Some(node)
        })
    }

    pub fn find(&self, id: &str) -> Option<&Node> {
        self.walk().find(|n| n.id == id)
    }
}

/// A validated, immutable process model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessModel {
    pub root: Node,
    #[serde(default)]
    pub endpoints: BTreeMap<String, String>,
    #[serde(default)]
    pub dataelements: BTreeMap<String, Value>,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

impl Default for ProcessModel {
    fn default() -> Self {
        ProcessModel::empty()
    }
}

impl ProcessModel {
    /// The model an instance carries right after creation.
    pub fn empty() -> Self {
        ProcessModel {
            root: Node::sequence("root", Vec::new()),
            endpoints: BTreeMap::new(),
            dataelements: BTreeMap::new(),
            attributes: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.root.kind == NodeKind::Sequence && self.root.children.is_empty()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.root.walk()
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.root.find(id)
    }

    pub fn activity_count(&self) -> usize {
        self.nodes().filter(|n| n.kind == NodeKind::Call).count()
    }

    /// Endpoint keys referenced by call nodes but absent from `endpoints`.
    pub fn missing_endpoints<'a>(&'a self, endpoints: &BTreeMap<String, String>) -> Vec<&'a str> {
        let mut missing: Vec<&str> = self
            .nodes()
            .filter(|n| n.kind == NodeKind::Call)
            .filter_map(|n| n.endpoint_key.as_deref())
            .filter(|k| !endpoints.contains_key(*k))
            .collect();
        missing.sort_unstable();
        missing.dedup();
        missing
    }

    /// Checks that every call's endpoint key resolves against the model's own
    /// endpoint map.
    pub fn check_executable(&self) -> Result<(), ModelError> {
        self.check_executable_with(&self.endpoints)
    }

    pub fn check_executable_with(
        &self,
        endpoints: &BTreeMap<String, String>,
    ) -> Result<(), ModelError> {
        let issues: Vec<ValidationIssue> = self
            .nodes()
            .filter(|n| n.kind == NodeKind::Call)
            .filter_map(|n| {
                let key = n.endpoint_key.as_deref()?;
                (!endpoints.contains_key(key)).then(|| ValidationIssue {
                    path: n.id.clone(),
                    node_id: Some(n.id.clone()),
                    message: format!("endpoint key \"{key}\" is not defined"),
                })
            })
            .collect();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Invalid(issues))
        }
    }

    pub fn validate_position(&self, position: &Position) -> Result<(), ModelError> {
        let issue = match self.node(&position.node_id) {
            None => format!("position references unknown node \"{}\"", position.node_id),
            // Conditions are valid halt points too: an evaluation error stops there.
            Some(node)
                if position.mode == PositionMode::At
                    && !node.kind.is_activity()
                    && !matches!(node.kind, NodeKind::Loop | NodeKind::Alternative) =>
            {
                format!(
                    "position mode \"at\" requires an activity or a condition, \"{}\" is a {}",
                    node.id, node.kind
                )
            }
            Some(_) => return Ok(()),
        };
        Err(ModelError::Invalid(vec![ValidationIssue {
            path: position.node_id.clone(),
            node_id: Some(position.node_id.clone()),
            message: issue,
        }]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    At,
    After,
}

/// Where execution (re)starts: at or after a node. A passthrough carries the
/// callback id of an asynchronous activity suspended while waiting.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Position {
    pub node_id: String,
    pub mode: PositionMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub passthrough: Option<String>,
}

impl Position {
    pub fn at(node_id: impl Into<String>) -> Self {
        Position {
            node_id: node_id.into(),
            mode: PositionMode::At,
            passthrough: None,
        }
    }

    pub fn after(node_id: impl Into<String>) -> Self {
        Position {
            node_id: node_id.into(),
            mode: PositionMode::After,
            passthrough: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationIssue {
    /// Slash separated path of node ids (or child indices where no id exists).
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_id: Option<String>,
    pub message: String,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("malformed model document: {0}")]
    Malformed(String),
    #[error("invalid model: {}", join_issues(.0))]
    Invalid(Vec<ValidationIssue>),
}

impl ModelError {
    pub fn issues(&self) -> &[ValidationIssue] {
        match self {
            ModelError::Malformed(_) => &[],
            ModelError::Invalid(issues) => issues,
        }
    }
}

fn join_issues(issues: &[ValidationIssue]) -> String {
    issues
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Deserialize)]
struct RawModel {
    root: RawNode,
    #[serde(default)]
    endpoints: BTreeMap<String, String>,
    #[serde(default)]
    dataelements: BTreeMap<String, Value>,
    #[serde(default)]
    attributes: BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct RawNode {
    #[serde(default)]
    id: Option<String>,
    kind: String,
    #[serde(default)]
    label: String,
    #[serde(default)]
    children: Vec<RawNode>,
    #[serde(default)]
    endpoint_key: Option<String>,
    #[serde(default)]
    parameters: Option<InvocationParameters>,
    #[serde(default)]
    scripts: Option<Scripts>,
    #[serde(default)]
    condition: Option<String>,
    #[serde(default)]
    loop_mode: Option<LoopMode>,
    #[serde(default)]
    wait: Option<Value>,
}

/// Parses and fully validates a model document, including endpoint
/// resolution. Design drafts without endpoints go through [`parse_draft`].
pub fn parse_model(document: &str) -> Result<ProcessModel, ModelError> {
    let model = parse_draft(document)?;
    model.check_executable()?;
    Ok(model)
}

/// Parses a model document checking only its structure.
pub fn parse_draft(document: &str) -> Result<ProcessModel, ModelError> {
    let value: Value =
        serde_json::from_str(document).map_err(|e| ModelError::Malformed(e.to_string()))?;
    parse_value(value)
}

pub fn parse_value(value: Value) -> Result<ProcessModel, ModelError> {
    let raw: RawModel =
        serde_json::from_value(value).map_err(|e| ModelError::Malformed(e.to_string()))?;
    let mut ctx = Builder {
        issues: Vec::new(),
        seen: HashSet::new(),
    };
    let root = ctx.node(raw.root, "", None, None);
    if !ctx.issues.is_empty() {
        return Err(ModelError::Invalid(ctx.issues));
    }
    Ok(ProcessModel {
        root: root.expect("root node builds when no issues were recorded"),
        endpoints: raw.endpoints,
        dataelements: raw.dataelements,
        attributes: raw.attributes,
    })
}

pub fn serialize_model(model: &ProcessModel) -> String {
    serde_json::to_string_pretty(model).expect("models always serialize")
}

struct Builder {
    issues: Vec<ValidationIssue>,
    seen: HashSet<String>,
}

impl Builder {
    fn issue(&mut self, path: &str, node_id: Option<&str>, message: impl Into<String>) {
        self.issues.push(ValidationIssue {
            path: path.to_string(),
            node_id: node_id.map(str::to_string),
            message: message.into(),
        });
    }

    fn node(
        &mut self,
        raw: RawNode,
        parent_path: &str,
        parent: Option<NodeKind>,
        index: Option<usize>,
    ) -> Option<Node> {
        let fallback_id = match index {
            None => "root".to_string(),
            Some(i) => format!("{}{}", parent_path.replace('/', "_"), i),
        };
        let path_segment = raw
            .id
            .clone()
            .unwrap_or_else(|| index.map_or("root".into(), |i| i.to_string()));
        let path = if parent_path.is_empty() {
            path_segment
        } else {
            format!("{parent_path}/{path_segment}")
        };

        let Some(kind) = NodeKind::parse(&raw.kind) else {
            self.issue(
                &path,
                raw.id.as_deref(),
                format!("unknown node kind \"{}\"", raw.kind),
            );
            return None;
        };

        let id = match raw.id {
            Some(id) if id.is_empty() => {
                self.issue(&path, None, "node id must not be empty");
                return None;
            }
            Some(id) => id,
            None if kind.is_leaf() => {
                self.issue(&path, None, format!("{kind} nodes require an id"));
                return None;
            }
            None => fallback_id,
        };
        if !self.seen.insert(id.clone()) {
            self.issue(&path, Some(&id), format!("duplicate node id \"{id}\""));
        }

        match (parent, kind) {
            (Some(NodeKind::Parallel), NodeKind::ParallelBranch) => {}
            (Some(NodeKind::Parallel), other) => self.issue(
                &path,
                Some(&id),
                format!("parallel children must be parallel_branch, found {other}"),
            ),
            (_, NodeKind::ParallelBranch) => {
                self.issue(&path, Some(&id), "parallel_branch outside of parallel")
            }
            (Some(NodeKind::Choose), NodeKind::Alternative | NodeKind::Otherwise) => {}
            (Some(NodeKind::Choose), other) => self.issue(
                &path,
                Some(&id),
                format!("choose children must be alternative or otherwise, found {other}"),
            ),
            (_, NodeKind::Alternative | NodeKind::Otherwise) => {
                self.issue(&path, Some(&id), format!("{kind} outside of choose"))
            }
            _ => {}
        }

        if kind.is_leaf() && !raw.children.is_empty() {
            self.issue(
                &path,
                Some(&id),
                format!("{kind} nodes cannot have children"),
            );
        }
        if kind != NodeKind::Call {
            if raw.endpoint_key.is_some() {
                self.issue(
                    &path,
                    Some(&id),
                    "endpoint_key is only allowed on call nodes",
                );
            }
            if raw.parameters.is_some() {
                self.issue(
                    &path,
                    Some(&id),
                    "parameters are only allowed on call nodes",
                );
            }
        }
        let scripts = raw.scripts.unwrap_or_default();
        match kind {
            NodeKind::Call => {
                if raw.endpoint_key.as_deref().is_none_or(str::is_empty) {
                    self.issue(&path, Some(&id), "call nodes require an endpoint_key");
                }
            }
            NodeKind::Manipulate => {
                if scripts.prepare.is_some() || scripts.update.is_some() || scripts.rescue.is_some()
                {
                    self.issue(
                        &path,
                        Some(&id),
                        "manipulate nodes carry only a finalize script",
                    );
                }
            }
            _ if !scripts.is_empty() => {
                self.issue(
                    &path,
                    Some(&id),
                    format!("{kind} nodes cannot carry scripts"),
                );
            }
            _ => {}
        }
        let needs_condition = matches!(kind, NodeKind::Alternative | NodeKind::Loop);
        match (&raw.condition, needs_condition) {
            (None, true) => self.issue(
                &path,
                Some(&id),
                format!("{kind} nodes require a condition"),
            ),
            (Some(_), false) => self.issue(
                &path,
                Some(&id),
                format!("{kind} nodes cannot carry a condition"),
            ),
            _ => {}
        }
        if raw.loop_mode.is_some() && kind != NodeKind::Loop {
            self.issue(&path, Some(&id), "loop_mode is only allowed on loop nodes");
        }

        let wait = match (raw.wait, kind) {
            (None, NodeKind::Parallel) => Some(Wait::All),
            (None, _) => None,
            (Some(_), k) if k != NodeKind::Parallel => {
                self.issue(&path, Some(&id), "wait is only allowed on parallel nodes");
                None
            }
            (Some(value), _) => match serde_json::from_value::<Wait>(value) {
                Ok(Wait::Count(n)) if n == 0 || n > raw.children.len() => {
                    self.issue(
                        &path,
                        Some(&id),
                        format!("parallel wait {n} out of range 1..={}", raw.children.len()),
                    );
                    None
                }
                Ok(w) => Some(w),
                Err(e) => {
                    self.issue(&path, Some(&id), e.to_string());
                    None
                }
            },
        };

        if kind == NodeKind::Choose {
            let otherwise = raw
                .children
                .iter()
                .filter(|c| c.kind == "otherwise")
                .count();
            if otherwise > 1 {
                self.issue(&path, Some(&id), "choose allows at most one otherwise");
            }
        }

        let child_count = raw.children.len();
        let mut children = Vec::with_capacity(child_count);
        for (i, child) in raw.children.into_iter().enumerate() {
            if let Some(c) = self.node(child, &path, Some(kind), Some(i)) {
                children.push(c);
            }
        }
        if children.len() != child_count {
            return None;
        }

        Some(Node {
            id,
            kind,
            label: raw.label,
            children,
            endpoint_key: if kind == NodeKind::Call {
                raw.endpoint_key
            } else {
                None
            },
            parameters: if kind == NodeKind::Call {
                raw.parameters
            } else {
                None
            },
            scripts,
            condition: raw.condition,
            loop_mode: if kind == NodeKind::Loop {
                Some(raw.loop_mode.unwrap_or_default())
            } else {
                None
            },
            wait,
        })
    }
}
