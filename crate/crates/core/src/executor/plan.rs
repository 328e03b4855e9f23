//! Compilation of a model tree into a flat program.
//!
//! Structured nodes become jumps and conditional tests; a parallel node
//! becomes a `Fork` whose branches are laid out right after it, each in its
//! own code range. A thread runs one range and forks spawn one thread per
//! branch.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;
use std::sync::Arc;

use crate::model::{LoopMode, ModelError, Node, NodeKind, Position, PositionMode, ProcessModel};
use crate::script::{Expression, ScriptError};

#[derive(Debug, Clone)]
pub enum Op {
    /// Entering an activity; the only place a stopping thread halts.
    Enter {
        node: String,
    },
    Call {
        node: String,
    },
    Manipulate {
        node: String,
    },
    Exit {
        node: String,
    },
    /// Evaluates a condition and continues at `on_false` when it is false.
    Test {
        node: String,
        source: String,
        condition: Arc<Expression>,
        on_false: usize,
    },
    Jump {
        target: usize,
    },
    Fork {
        node: String,
        branches: Vec<Range<usize>>,
        wait: usize,
        join: usize,
    },
    Terminate {
        node: String,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CompileError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("condition of {node}: {error}")]
    Condition { node: String, error: ScriptError },
}

#[derive(Debug, Clone)]
pub struct Plan {
    ops: Vec<Op>,
    /// Code range of every node.
    spans: HashMap<String, Range<usize>>,
    /// Innermost fork and branch index each pc belongs to.
    parent: Vec<Option<(usize, usize)>>,
    nodes: HashMap<String, Node>,
}

/// Where a thread starts when resuming from positions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Entry {
    pub pc: usize,
    /// Set when the thread starts at a fork whose branches hold positions:
    /// branch index and the positions inside it. Branches not listed count
    /// as completed.
    pub fork: Option<Vec<(usize, Vec<Position>)>>,
    /// Branches of earlier forks that still hold positions; they resume as
    /// threads nobody joins.
    pub detached: Vec<(Range<usize>, Vec<Position>)>,
    /// Activity at `pc` whose asynchronous answer is awaited under this
    /// callback id.
    pub passthrough: Option<(String, String)>,
}

pub fn compile(
    model: &ProcessModel,
    endpoints: &BTreeMap<String, String>,
) -> Result<Plan, CompileError> {
    model.check_executable_with(endpoints)?;
    let mut c = Compiler {
        ops: Vec::new(),
        spans: HashMap::new(),
        nodes: HashMap::new(),
    };
    c.node(&model.root)?;
    let mut parent = vec![None; c.ops.len()];
    for (f, op) in c.ops.iter().enumerate() {
        if let Op::Fork { branches, .. } = op {
            for (b, r) in branches.iter().enumerate() {
                for slot in &mut parent[r.clone()] {
                    // Forks are visited outermost first, so inner ones overwrite.
                    *slot = Some((f, b));
                }
            }
        }
    }
    Ok(Plan {
        ops: c.ops,
        spans: c.spans,
        parent,
        nodes: c.nodes,
    })
}

struct Compiler {
    ops: Vec<Op>,
    spans: HashMap<String, Range<usize>>,
    nodes: HashMap<String, Node>,
}

impl Compiler {
    fn pc(&self) -> usize {
        self.ops.len()
    }

    fn condition(node: &Node) -> Result<(String, Arc<Expression>), CompileError> {
        let source = node.condition.clone().unwrap_or_else(|| "true".to_string());
        let expr = Expression::parse(&source).map_err(|error| CompileError::Condition {
            node: node.id.clone(),
            error,
        })?;
        Ok((source, Arc::new(expr)))
    }

    fn node(&mut self, node: &Node) -> Result<(), CompileError> {
        let start = self.pc();
        let id = node.id.clone();
        match node.kind {
            NodeKind::Sequence | NodeKind::ParallelBranch | NodeKind::Otherwise => {
                for child in &node.children {
                    self.node(child)?;
                }
            }
            NodeKind::Call | NodeKind::Manipulate => {
                self.ops.push(Op::Enter { node: id.clone() });
                self.ops.push(if node.kind == NodeKind::Call {
                    Op::Call { node: id.clone() }
                } else {
                    Op::Manipulate { node: id.clone() }
                });
                self.ops.push(Op::Exit { node: id.clone() });
            }
            NodeKind::Terminate => self.ops.push(Op::Terminate { node: id.clone() }),
            NodeKind::Parallel => {
                let fork = self.pc();
                self.ops.push(Op::Jump { target: usize::MAX });
                let mut branches = Vec::new();
                for child in &node.children {
                    let s = self.pc();
                    self.node(child)?;
                    branches.push(s..self.pc());
                }
                let wait = node
                    .wait
                    .unwrap_or(crate::model::Wait::All)
                    .required(branches.len());
                self.ops[fork] = Op::Fork {
                    node: id.clone(),
                    branches,
                    wait,
                    join: self.pc(),
                };
            }
            NodeKind::Choose => {
                let mut exits = Vec::new();
                for arm in &node.children {
                    if arm.kind == NodeKind::Alternative {
                        let (source, condition) = Self::condition(arm)?;
                        let arm_start = self.pc();
                        self.ops.push(Op::Test {
                            node: arm.id.clone(),
                            source,
                            condition,
                            on_false: usize::MAX,
                        });
                        for child in &arm.children {
                            self.node(child)?;
                        }
                        exits.push(self.pc());
                        self.ops.push(Op::Jump { target: usize::MAX });
                        let next = self.pc();
                        if let Op::Test { on_false, .. } = &mut self.ops[arm_start] {
                            *on_false = next;
                        }
                        self.spans.insert(arm.id.clone(), arm_start..next);
                        self.nodes.insert(arm.id.clone(), arm.clone());
                    } else {
                        self.node(arm)?;
                    }
                }
                let end = self.pc();
                for e in exits {
                    self.ops[e] = Op::Jump { target: end };
                }
            }
            NodeKind::Alternative => {
                // Only reachable when an alternative is the model root.
                for child in &node.children {
                    self.node(child)?;
                }
            }
            NodeKind::Loop => {
                let (source, condition) = Self::condition(node)?;
                let top = self.pc();
                match node.loop_mode() {
                    LoopMode::PreTest => {
                        self.ops.push(Op::Test {
                            node: id.clone(),
                            source,
                            condition,
                            on_false: usize::MAX,
                        });
                        for child in &node.children {
                            self.node(child)?;
                        }
                        self.ops.push(Op::Jump { target: top });
                        let end = self.pc();
                        if let Op::Test { on_false, .. } = &mut self.ops[top] {
                            *on_false = end;
                        }
                    }
                    LoopMode::PostTest => {
                        for child in &node.children {
                            self.node(child)?;
                        }
                        let test = self.pc();
                        self.ops.push(Op::Test {
                            node: id.clone(),
                            source,
                            condition,
                            on_false: test + 2,
                        });
                        self.ops.push(Op::Jump { target: top });
                    }
                }
            }
        }
        self.spans.insert(id.clone(), start..self.pc());
        self.nodes.insert(id, node.clone());
        Ok(())
    }
}

impl Plan {
    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn span(&self, id: &str) -> Option<Range<usize>> {
        self.spans.get(id).cloned()
    }

    /// Human-readable program, one line per op.
    pub fn listing(&self) -> Vec<String> {
        self.ops
            .iter()
            .map(|op| match op {
                Op::Enter { node } => format!("enter {node}"),
                Op::Call { node } => format!("enact {node}"),
                Op::Manipulate { node } => format!("manipulate {node}"),
                Op::Exit { node } => format!("exit {node}"),
                Op::Test { node, on_false, .. } => format!("test {node} else {on_false}"),
                Op::Jump { target } => format!("jump {target}"),
                Op::Fork {
                    node,
                    branches,
                    wait,
                    join,
                } => {
                    let b: Vec<String> = branches
                        .iter()
                        .map(|r| format!("{}..{}", r.start, r.end))
                        .collect();
                    format!("fork {node} [{}] wait {wait} join {join}", b.join(", "))
                }
                Op::Terminate { node } => format!("terminate {node}"),
            })
            .collect()
    }

    /// The pc a position resumes at and the pc deciding which fork branch it
    /// belongs to.
    fn locate(&self, p: &Position) -> Option<(usize, usize)> {
        let span = self.spans.get(&p.node_id)?;
        Some(match p.mode {
            PositionMode::At => (span.start, span.start),
            PositionMode::After => (span.end, span.start),
        })
    }

    /// Outermost fork with its pc inside `range` that contains `pc` in one of
    /// its branches.
    fn outer_fork(&self, range: &Range<usize>, pc: usize) -> Option<(usize, usize)> {
        let mut found = None;
        let mut cur = self.parent.get(pc).copied().flatten();
        while let Some((f, b)) = cur {
            if !range.contains(&f) {
                break;
            }
            found = Some((f, b));
            cur = self.parent[f];
        }
        found
    }

    /// Resolves where a thread running `range` starts given the positions
    /// inside it. The furthest position wins; forks before it keep their
    /// positioned branches running detached.
    pub fn entry(&self, range: Range<usize>, positions: &[Position]) -> Entry {
        if positions.is_empty() {
            return Entry {
                pc: range.start,
                ..Default::default()
            };
        }
        let mut groups: BTreeMap<usize, BTreeMap<usize, Vec<Position>>> = BTreeMap::new();
        let mut direct: Vec<(usize, &Position)> = Vec::new();
        for p in positions {
            let Some((pc, member)) = self.locate(p) else {
                continue;
            };
            match self.outer_fork(&range, member) {
                Some((f, b)) => groups
                    .entry(f)
                    .or_default()
                    .entry(b)
                    .or_default()
                    .push(p.clone()),
                None => direct.push((pc, p)),
            }
        }
        let resume = direct
            .iter()
            .map(|(pc, _)| *pc)
            .chain(groups.keys().copied())
            .max()
            .unwrap_or(range.start);
        let mut entry = Entry {
            pc: resume,
            ..Default::default()
        };
        for (f, branches) in groups {
            let Op::Fork {
                branches: ranges, ..
            } = &self.ops[f]
            else {
                continue;
            };
            let positioned: Vec<(usize, Vec<Position>)> = branches.into_iter().collect();
            if f == resume {
                entry.fork = Some(positioned);
            } else {
                entry.detached.extend(
                    positioned
                        .into_iter()
                        .map(|(b, ps)| (ranges[b].clone(), ps)),
                );
            }
        }
        if entry.fork.is_none() {
            entry.passthrough = direct
                .iter()
                .find(|(pc, p)| {
                    *pc == resume && p.mode == PositionMode::At && p.passthrough.is_some()
                })
                .map(|(_, p)| (p.node_id.clone(), p.passthrough.clone().unwrap_or_default()));
        }
        entry
    }
}
