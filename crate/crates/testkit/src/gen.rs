//! Random structured models and a reference interpreter walking the tree
//! directly.
//!
//! Loops are driven by counters: a `<loop>_reset` call zeroes the counter
//! before the loop and a `<loop>_tick` call increments it first thing in
//! every iteration. Choices read a selector data element fixed at generation
//! time. This keeps every condition outcome known without evaluating
//! scripts.

use std::collections::{BTreeMap, HashMap};

use pf_core::model::{InvocationParameters, LoopMode, Node, ProcessModel, Scripts, Wait};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::fakes::ScriptedServices;

#[derive(Debug, Clone, PartialEq)]
pub enum Gen {
    Call {
        id: String,
        updates: u8,
    },
    Manipulate {
        id: String,
    },
    Loop {
        id: String,
        mode: LoopMode,
        times: u8,
        body: Vec<Gen>,
    },
    Choose {
        id: String,
        arms: usize,
        otherwise: Option<Vec<Gen>>,
        bodies: Vec<Vec<Gen>>,
        pick: Option<usize>,
    },
    Parallel {
        id: String,
        branches: Vec<Vec<Gen>>,
    },
}

#[derive(Debug, Clone)]
pub struct GenOptions {
    /// Activity nodes in the tree, counter calls included.
    pub max_activities: usize,
    /// Nesting of structured nodes.
    pub max_depth: usize,
    pub manipulates: bool,
    pub parallel: bool,
    pub max_loop: u8,
    pub max_updates: u8,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions {
            max_activities: 20,
            max_depth: 4,
            manipulates: true,
            parallel: true,
            max_loop: 3,
            max_updates: 3,
        }
    }
}

/// A generated model in intermediate form.
#[derive(Debug, Clone)]
pub struct Generated {
    pub seed: u64,
    pub body: Vec<Gen>,
}

struct Builder<'a> {
    rng: ChaCha8Rng,
    opts: &'a GenOptions,
    budget: usize,
    next: usize,
}

impl Builder<'_> {
    fn id(&mut self, prefix: &str) -> String {
        self.next += 1;
        format!("{prefix}{}", self.next)
    }

    fn activity(&mut self) -> Gen {
        self.budget -= 1;
        if self.opts.manipulates && self.rng.random_bool(0.15) {
            Gen::Manipulate { id: self.id("m") }
        } else {
            let updates = if self.rng.random_bool(0.6) {
                0
            } else {
                self.rng.random_range(0..=self.opts.max_updates)
            };
            Gen::Call {
                id: self.id("a"),
                updates,
            }
        }
    }

    fn body(&mut self, depth: usize) -> Vec<Gen> {
        let len = self.rng.random_range(1..=4);
        let mut out = Vec::new();
        for _ in 0..len {
            if self.budget == 0 {
                break;
            }
            let structured =
                depth < self.opts.max_depth && self.budget >= 3 && self.rng.random_bool(0.35);
            if !structured {
                out.push(self.activity());
                continue;
            }
            let kinds = if self.opts.parallel { 3 } else { 2 };
            out.push(match self.rng.random_range(0..kinds) {
                0 => {
                    self.budget -= 2;
                    let id = self.id("l");
                    let mode = if self.rng.random_bool(0.5) {
                        LoopMode::PreTest
                    } else {
                        LoopMode::PostTest
                    };
                    let times = self.rng.random_range(0..=self.opts.max_loop);
                    let body = if self.rng.random_bool(0.3) {
                        Vec::new()
                    } else {
                        self.body(depth + 1)
                    };
                    Gen::Loop {
                        id,
                        mode,
                        times,
                        body,
                    }
                }
                1 => {
                    let id = self.id("c");
                    let arms = self.rng.random_range(1..=3);
                    let bodies = (0..arms).map(|_| self.body(depth + 1)).collect();
                    let otherwise = self.rng.random_bool(0.5).then(|| self.body(depth + 1));
                    let pick = self.rng.random_range(0..=arms);
                    let pick = (pick < arms).then_some(pick);
                    Gen::Choose {
                        id,
                        arms,
                        otherwise,
                        bodies,
                        pick,
                    }
                }
                _ => {
                    let id = self.id("p");
                    let n = self.rng.random_range(1..=3);
                    let branches = (0..n).map(|_| self.body(depth + 1)).collect();
                    Gen::Parallel { id, branches }
                }
            });
        }
        out
    }
}

fn call_node(id: &str, key: &str) -> Node {
    let mut n = Node::call(id, key).with_label(format!("Activity {id}"));
    n.parameters = Some(InvocationParameters {
        method: "POST".into(),
        arguments: BTreeMap::from([("from".to_string(), format!("\"{id}\""))]),
    });
    n
}

impl Generated {
    pub fn new(seed: u64, opts: &GenOptions) -> Self {
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            opts,
            budget: opts.max_activities,
            next: 0,
        };
        let mut body = b.body(0);
        if body.is_empty() {
            body.push(b.activity());
        }
        Generated { seed, body }
    }

    pub fn has_parallel(&self) -> bool {
        fn any(body: &[Gen]) -> bool {
            body.iter().any(|g| match g {
                Gen::Parallel { .. } => true,
                Gen::Loop { body, .. } => any(body),
                Gen::Choose {
                    bodies, otherwise, ..
                } => bodies.iter().any(|b| any(b)) || otherwise.as_deref().is_some_and(any),
                _ => false,
            })
        }
        any(&self.body)
    }

    /// Activity nodes in the model.
    pub fn activity_count(&self) -> usize {
        fn count(body: &[Gen]) -> usize {
            body.iter()
                .map(|g| match g {
                    Gen::Call { .. } | Gen::Manipulate { .. } => 1,
                    Gen::Loop { body, .. } => 2 + count(body),
                    Gen::Choose {
                        bodies, otherwise, ..
                    } => {
                        bodies.iter().map(|b| count(b)).sum::<usize>()
                            + otherwise.as_deref().map_or(0, count)
                    }
                    Gen::Parallel { branches, .. } => branches.iter().map(|b| count(b)).sum(),
                })
                .sum()
        }
        count(&self.body)
    }

    /// Nesting depth of structured nodes.
    pub fn depth(&self) -> usize {
        fn depth(body: &[Gen]) -> usize {
            body.iter()
                .map(|g| match g {
                    Gen::Call { .. } | Gen::Manipulate { .. } => 0,
                    Gen::Loop { body, .. } => 1 + depth(body),
                    Gen::Choose {
                        bodies, otherwise, ..
                    } => {
                        1 + bodies
                            .iter()
                            .map(|b| depth(b))
                            .chain(otherwise.as_deref().map(depth))
                            .max()
                            .unwrap_or(0)
                    }
                    Gen::Parallel { branches, .. } => {
                        1 + branches.iter().map(|b| depth(b)).max().unwrap_or(0)
                    }
                })
                .max()
                .unwrap_or(0)
        }
        depth(&self.body)
    }

    pub fn to_model(&self, services: &ScriptedServices) -> ProcessModel {
        let mut m = ProcessModel::empty();
        m.endpoints.insert("sync".into(), services.sync_url());
        for k in 0..=9 {
            m.endpoints.insert(format!("u{k}"), services.updates_url(k));
        }
        m.root = Node::sequence("root", self.nodes(&self.body, &mut m.dataelements));
        m
    }

    fn nodes(&self, body: &[Gen], data: &mut BTreeMap<String, Value>) -> Vec<Node> {
        let mut out = Vec::new();
        for g in body {
            match g {
                Gen::Call { id, updates } => {
                    let key = if *updates == 0 {
                        "sync".to_string()
                    } else {
                        format!("u{updates}")
                    };
                    let mut n = call_node(id, &key);
                    if *updates > 0 {
                        n.scripts = Scripts {
                            update: Some(format!("data.{id}_seen = result.i")),
                            ..Scripts::default()
                        };
                    }
                    out.push(n);
                }
                Gen::Manipulate { id } => {
                    data.insert(format!("{id}_runs"), json!(0));
                    out.push(
                        Node::manipulate(id, format!("data.{id}_runs = data.{id}_runs + 1"))
                            .with_label(format!("Script {id}")),
                    );
                }
                Gen::Loop {
                    id,
                    mode,
                    times,
                    body,
                } => {
                    let counter = format!("c_{id}");
                    data.insert(counter.clone(), json!(0));
                    out.push(
                        call_node(&format!("{id}_reset"), "sync").with_scripts(Scripts {
                            finalize: Some(format!("data.{counter} = 0")),
                            ..Scripts::default()
                        }),
                    );
                    let mut children =
                        vec![
                            call_node(&format!("{id}_tick"), "sync").with_scripts(Scripts {
                                finalize: Some(format!("data.{counter} = data.{counter} + 1")),
                                ..Scripts::default()
                            }),
                        ];
                    children.extend(self.nodes(body, data));
                    out.push(Node::looped(
                        id,
                        *mode,
                        format!("data.{counter} < {times}"),
                        children,
                    ));
                }
                Gen::Choose {
                    id,
                    arms,
                    otherwise,
                    bodies,
                    pick,
                } => {
                    let selector = format!("s_{id}");
                    data.insert(selector.clone(), json!(pick.map_or(-1, |p| p as i64)));
                    let mut children: Vec<Node> = (0..*arms)
                        .map(|i| {
                            Node::alternative(
                                format!("{id}_{i}"),
                                format!("data.{selector} == {i}"),
                                self.nodes(&bodies[i], data),
                            )
                        })
                        .collect();
                    if let Some(o) = otherwise {
                        children.push(Node::otherwise(format!("{id}_o"), self.nodes(o, data)));
                    }
                    out.push(Node::choose(id, children));
                }
                Gen::Parallel { id, branches } => {
                    let bs = branches
                        .iter()
                        .enumerate()
                        .map(|(i, b)| Node::branch(format!("{id}_{i}"), self.nodes(b, data)))
                        .collect();
                    out.push(Node::parallel(id, Wait::All, bs));
                }
            }
        }
        out
    }

    /// Trace the tree interpreter predicts: `act:<enactment>` when an
    /// activity completes and `cond:<node>:<result>` per condition
    /// evaluation. Parallel branches are walked one after the other.
    pub fn expected_trace(&self) -> Vec<String> {
        let mut counts = HashMap::new();
        let mut out = Vec::new();
        walk(&self.body, &mut counts, &mut out);
        out
    }

    /// Update PUTs each call activity receives per enactment.
    pub fn updates(&self) -> HashMap<String, u8> {
        fn collect(body: &[Gen], out: &mut HashMap<String, u8>) {
            for g in body {
                match g {
                    Gen::Call { id, updates } => {
                        out.insert(id.clone(), *updates);
                    }
                    Gen::Manipulate { .. } => {}
                    Gen::Loop { id, body, .. } => {
                        out.insert(format!("{id}_reset"), 0);
                        out.insert(format!("{id}_tick"), 0);
                        collect(body, out);
                    }
                    Gen::Choose {
                        bodies, otherwise, ..
                    } => {
                        bodies.iter().for_each(|b| collect(b, out));
                        if let Some(o) = otherwise {
                            collect(o, out);
                        }
                    }
                    Gen::Parallel { branches, .. } => branches.iter().for_each(|b| collect(b, out)),
                }
            }
        }
        let mut out = HashMap::new();
        collect(&self.body, &mut out);
        out
    }
}

fn act(id: &str, counts: &mut HashMap<String, u32>, out: &mut Vec<String>) {
    let n = counts.entry(id.to_string()).or_insert(0);
    *n += 1;
    out.push(format!("act:{id}-enactment-{n}"));
}

fn walk(body: &[Gen], counts: &mut HashMap<String, u32>, out: &mut Vec<String>) {
    for g in body {
        match g {
            Gen::Call { id, .. } | Gen::Manipulate { id } => act(id, counts, out),
            Gen::Loop {
                id,
                mode,
                times,
                body,
            } => {
                act(&format!("{id}_reset"), counts, out);
                let tick = format!("{id}_tick");
                match mode {
                    LoopMode::PreTest => {
                        for _ in 0..*times {
                            out.push(format!("cond:{id}:true"));
                            act(&tick, counts, out);
                            walk(body, counts, out);
                        }
                        out.push(format!("cond:{id}:false"));
                    }
                    LoopMode::PostTest => {
                        let iterations = (*times).max(1);
                        for i in 1..=iterations {
                            act(&tick, counts, out);
                            walk(body, counts, out);
                            out.push(format!("cond:{id}:{}", i < *times));
                        }
                    }
                }
            }
            Gen::Choose {
                id,
                arms,
                otherwise,
                bodies,
                pick,
            } => {
                let mut taken = false;
                for i in 0..*arms {
                    let hit = *pick == Some(i);
                    out.push(format!("cond:{id}_{i}:{hit}"));
                    if hit {
                        walk(&bodies[i], counts, out);
                        taken = true;
                        break;
                    }
                }
                if !taken {
                    if let Some(o) = otherwise {
                        walk(o, counts, out);
                    }
                }
            }
            Gen::Parallel { branches, .. } => {
                for b in branches {
                    walk(b, counts, out);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn respects_bounds() {
        let opts = GenOptions::default();
        for seed in 0..500 {
            let g = Generated::new(seed, &opts);
            assert!(g.activity_count() <= 20, "seed {seed}");
            assert!(g.depth() <= 4, "seed {seed}");
            assert!(g.activity_count() >= 1);
        }
    }

    #[test]
    fn oracle_on_a_fixed_tree() {
        let g = Generated {
            seed: 0,
            body: vec![
                Gen::Call {
                    id: "a1".into(),
                    updates: 0,
                },
                Gen::Loop {
                    id: "l2".into(),
                    mode: LoopMode::PreTest,
                    times: 2,
                    body: vec![Gen::Call {
                        id: "a3".into(),
                        updates: 1,
                    }],
                },
                Gen::Choose {
                    id: "c4".into(),
                    arms: 2,
                    otherwise: None,
                    bodies: vec![vec![], vec![Gen::Manipulate { id: "m5".into() }]],
                    pick: Some(1),
                },
                Gen::Loop {
                    id: "l6".into(),
                    mode: LoopMode::PostTest,
                    times: 0,
                    body: vec![],
                },
            ],
        };
        assert_eq!(
            g.expected_trace(),
            [
                "act:a1-enactment-1",
                "act:l2_reset-enactment-1",
                "cond:l2:true",
                "act:l2_tick-enactment-1",
                "act:a3-enactment-1",
                "cond:l2:true",
                "act:l2_tick-enactment-2",
                "act:a3-enactment-2",
                "cond:l2:false",
                "cond:c4_0:false",
                "cond:c4_1:true",
                "act:m5-enactment-1",
                "act:l6_reset-enactment-1",
                "act:l6_tick-enactment-1",
                "cond:l6:false",
            ]
        );
    }
}
