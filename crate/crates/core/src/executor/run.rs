use std::future::Future;
use std::ops::Range;
use std::pin::Pin;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde_json::json;
use tokio::sync::{mpsc, watch};
use tokio::task::AbortHandle;

use super::enact::{self, Flow};
use super::plan::{Op, Plan};
use crate::engine::{position_content, Engine, InstanceCell};
use crate::event::Topic;
use crate::model::Position;

/// How an execution unit ended.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum UnitEnd {
    Finished,
    Stopped(Vec<Position>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ThreadEnd {
    Done,
    Halted,
    Terminated,
}

#[derive(Default)]
struct Tracking {
    /// Activities being executed right now.
    active: Vec<Position>,
    /// Where halted threads resume.
    halted: Vec<Position>,
    tasks: Vec<AbortHandle>,
    main: Option<AbortHandle>,
}

/// The execution unit of one running instance: a root thread plus one
/// task per parallel branch.
pub(crate) struct Unit {
    stop_tx: watch::Sender<bool>,
    live: watch::Sender<usize>,
    terminated: AtomicBool,
    threads: AtomicU64,
    pub(super) enactments: AtomicU64,
    tracking: Mutex<Tracking>,
}

impl Unit {
    fn new() -> Self {
        Unit {
            stop_tx: watch::channel(false).0,
            live: watch::channel(0).0,
            terminated: AtomicBool::new(false),
            threads: AtomicU64::new(1),
            enactments: AtomicU64::new(0),
            tracking: Mutex::new(Tracking::default()),
        }
    }

    pub(crate) fn start(
        engine: Engine,
        cell: Arc<InstanceCell>,
        plan: Arc<Plan>,
        positions: Vec<Position>,
    ) -> Arc<Unit> {
        let unit = Arc::new(Unit::new());
        let ctx = Ctx {
            engine: engine.clone(),
            cell: cell.clone(),
            plan: plan.clone(),
            unit: unit.clone(),
        };
        let handle = tokio::spawn(async move {
            let started = Instant::now();
            let root = run_thread(ctx.clone(), 0..plan.len(), positions).await;
            if root == ThreadEnd::Terminated {
                ctx.unit.terminate();
            }
            let mut live = ctx.unit.live.subscribe();
            let _ = live.wait_for(|n| *n == 0).await;
            let end = ctx.unit.outcome();
            engine.emit(
                &cell,
                Topic::Status,
                "resource_utilization",
                json!({
                    "threads": ctx.unit.threads.load(Ordering::Relaxed),
                    "enactments": ctx.unit.enactments.load(Ordering::Relaxed),
                    "duration_ms": started.elapsed().as_millis() as u64,
                }),
            );
            engine.unit_ended(&cell, &ctx.unit, end).await;
        });
        unit.tracking().main = Some(handle.abort_handle());
        unit
    }

    fn tracking(&self) -> std::sync::MutexGuard<'_, Tracking> {
        self.tracking.lock().expect("unit lock")
    }

    /// Asks every thread to halt at its next activity boundary.
    pub(crate) fn stop(&self) {
        self.stop_tx.send_replace(true);
    }

    pub(super) fn is_stopping(&self) -> bool {
        *self.stop_tx.borrow()
    }

    pub(super) fn stop_signal(&self) -> watch::Receiver<bool> {
        self.stop_tx.subscribe()
    }

    fn terminate(&self) {
        self.terminated.store(true, Ordering::Release);
        for t in self.tracking().tasks.drain(..) {
            t.abort();
        }
    }

    /// Kills all threads right away.
    pub(crate) fn abort(&self) {
        let mut t = self.tracking();
        for task in t.tasks.drain(..) {
            task.abort();
        }
        if let Some(main) = t.main.take() {
            main.abort();
        }
    }

    /// Kills all threads and returns where they were.
    pub(crate) fn force_stop(&self) -> Vec<Position> {
        self.stop();
        self.abort();
        let t = self.tracking();
        let mut out = t.halted.clone();
        for p in &t.active {
            if !out.iter().any(|h| h.node_id == p.node_id) {
                out.push(Position::at(p.node_id.clone()));
            }
        }
        out
    }

    fn outcome(&self) -> UnitEnd {
        if self.terminated.load(Ordering::Acquire) {
            return UnitEnd::Finished;
        }
        let t = self.tracking();
        if t.halted.is_empty() {
            UnitEnd::Finished
        } else {
            UnitEnd::Stopped(t.halted.clone())
        }
    }

    fn enter(&self, node: &str) -> Vec<Position> {
        let mut t = self.tracking();
        t.active.push(Position::at(node));
        t.active.clone()
    }

    fn leave(&self, node: &str) -> Vec<Position> {
        let mut t = self.tracking();
        if let Some(i) = t.active.iter().position(|p| p.node_id == node) {
            t.active.remove(i);
        }
        t.active.clone()
    }

    fn halt(&self, position: Position) {
        let mut t = self.tracking();
        if !t.halted.contains(&position) {
            t.halted.push(position);
        }
    }
}

/// Everything a thread needs.
#[derive(Clone)]
pub(super) struct Ctx {
    pub(super) engine: Engine,
    pub(super) cell: Arc<InstanceCell>,
    pub(super) plan: Arc<Plan>,
    pub(super) unit: Arc<Unit>,
}

impl Ctx {
    fn publish_positions(
        &self,
        active: Vec<Position>,
        after: Option<&str>,
        transition: Option<(Option<&str>, &str)>,
    ) {
        self.cell.lock().positions = active.clone();
        let mut shown = active;
        if let Some(a) = after {
            shown.push(Position::after(a));
        }
        self.engine.emit(
            &self.cell,
            Topic::Position,
            "change",
            position_content(&shown, transition),
        );
    }

    fn spawn(
        &self,
        range: Range<usize>,
        positions: Vec<Position>,
        report: Option<mpsc::UnboundedSender<ThreadEnd>>,
    ) {
        struct Live(Arc<Unit>);
        impl Drop for Live {
            fn drop(&mut self) {
                self.0.live.send_modify(|n| *n -= 1);
            }
        }
        self.unit.live.send_modify(|n| *n += 1);
        self.unit.threads.fetch_add(1, Ordering::Relaxed);
        let live = Live(self.unit.clone());
        let ctx = self.clone();
        let handle = tokio::spawn(async move {
            let _live = live;
            let end = run_thread(ctx.clone(), range, positions).await;
            if end == ThreadEnd::Terminated {
                ctx.unit.terminate();
            }
            if let Some(tx) = report {
                let _ = tx.send(end);
            }
        });
        self.unit.tracking().tasks.push(handle.abort_handle());
    }
}

type ThreadFuture = Pin<Box<dyn Future<Output = ThreadEnd> + Send>>;

fn run_thread(ctx: Ctx, range: Range<usize>, positions: Vec<Position>) -> ThreadFuture {
    Box::pin(async move {
        let plan = ctx.plan.clone();
        let entry = plan.entry(range.clone(), &positions);
        for (r, ps) in entry.detached {
            ctx.spawn(r, ps, None);
        }
        let mut pc = entry.pc;
        let mut resume_fork = entry.fork;
        let mut passthrough = entry.passthrough;
        let mut last_exit: Option<String> = None;
        while pc < range.end {
            match &plan.ops()[pc] {
                Op::Enter { node } => {
                    if ctx.unit.is_stopping() {
                        ctx.unit.halt(Position::at(node.clone()));
                        return ThreadEnd::Halted;
                    }
                    let active = ctx.unit.enter(node);
                    ctx.publish_positions(active, None, Some((last_exit.as_deref(), node)));
                    pc += 1;
                }
                Op::Call { node } | Op::Manipulate { node } => {
                    let flow = if matches!(plan.ops()[pc], Op::Call { .. }) {
                        let resume = passthrough
                            .take()
                            .filter(|(a, _)| a == node)
                            .map(|(_, cb)| cb);
                        enact::call(&ctx, node, resume).await
                    } else {
                        enact::manipulate(&ctx, node).await
                    };
                    match flow {
                        Flow::Continue => pc += 1,
                        Flow::Halt(position) => {
                            ctx.unit.halt(position);
                            let active = ctx.unit.leave(node);
                            ctx.cell.lock().positions = active;
                            return ThreadEnd::Halted;
                        }
                    }
                }
                Op::Exit { node } => {
                    let active = ctx.unit.leave(node);
                    ctx.publish_positions(active, Some(node), None);
                    last_exit = Some(node.clone());
                    pc += 1;
                }
                Op::Test {
                    node,
                    source,
                    condition,
                    on_false,
                } => match enact::condition(&ctx, node, source, condition).await {
                    Some(true) => pc += 1,
                    Some(false) => pc = *on_false,
                    None => {
                        let position = match &last_exit {
                            Some(a) => Position::after(a.clone()),
                            None => Position::at(node.clone()),
                        };
                        ctx.unit.halt(position);
                        return ThreadEnd::Halted;
                    }
                },
                Op::Jump { target } => pc = *target,
                Op::Fork {
                    branches,
                    wait,
                    join,
                    ..
                } => {
                    let positioned = if pc == entry.pc {
                        resume_fork.take()
                    } else {
                        None
                    };
                    match fork(&ctx, branches, *wait, positioned).await {
                        ThreadEnd::Done => pc = *join,
                        other => return other,
                    }
                }
                Op::Terminate { .. } => return ThreadEnd::Terminated,
            }
        }
        ThreadEnd::Done
    })
}

/// Runs the branches of a parallel node and returns once `wait` of them
/// completed. Branches still running afterwards stay detached.
async fn fork(
    ctx: &Ctx,
    branches: &[Range<usize>],
    wait: usize,
    positioned: Option<Vec<(usize, Vec<Position>)>>,
) -> ThreadEnd {
    let required = wait.min(branches.len());
    let (tx, mut rx) = mpsc::unbounded_channel();
    let (runs, mut completed): (Vec<(usize, Vec<Position>)>, usize) = match positioned {
        None => ((0..branches.len()).map(|b| (b, Vec::new())).collect(), 0),
        Some(list) => {
            let done = branches.len() - list.len();
            (list, done)
        }
    };
    let mut running = runs.len();
    for (b, ps) in runs {
        ctx.spawn(branches[b].clone(), ps, Some(tx.clone()));
    }
    drop(tx);
    while completed < required && running > 0 {
        match rx.recv().await {
            Some(ThreadEnd::Done) => completed += 1,
            Some(ThreadEnd::Halted) => {}
            Some(ThreadEnd::Terminated) => return ThreadEnd::Terminated,
            None => {
                return if ctx.unit.terminated.load(Ordering::Acquire) {
                    ThreadEnd::Terminated
                } else {
                    ThreadEnd::Halted
                };
            }
        }
        running -= 1;
    }
    if completed >= required {
        ThreadEnd::Done
    } else {
        ThreadEnd::Halted
    }
}
