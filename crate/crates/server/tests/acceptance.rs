//! End-to-end acceptance suite. Prints one line per criterion and exits
//! non-zero when any of them fails. Pass criterion numbers as arguments to
//! run a subset: `cargo test -p pf-server --test acceptance -- 3 7`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::future::Future;
use std::pin::Pin;
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::routing::get;
use axum::{Json, Router};
use chrono::Utc;
use futures::future::join_all;
use pf_core::bus::BusMessage;
use pf_core::config::EngineConfig;
use pf_core::event::{Envelope, Topic};
use pf_core::gateway::{
    combine_votes, Action, EventStream, Selection, SubscriptionSpec, ValuePayload, ValueTarget,
    VoteResponse,
};
use pf_core::lifecycle::{transition_allowed, Cause, InstanceState};
use pf_core::model::{InvocationParameters, LoopMode, Node, Position, ProcessModel, Scripts, Wait};
use pf_core::protocol::headers;
use pf_core::{Category, Engine, EngineError};
use pf_services::worklist::{
    Mode, Origin, StrategyKind, TaskRequest, UserAction, Worklist, WorklistConfig,
};
use pf_services::xes::{self, XesLogger};
use pf_services::ServiceSet;
use pf_testkit::{
    activity_sequences, matches_enactment_grammar, run_to_end, serve_engine, watch_all, GenOptions,
    Generated, ScriptedServices,
};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tokio::io::{AsyncBufReadExt, BufReader};

type Outcome = Result<String, String>;
type Check = fn() -> Pin<Box<dyn Future<Output = Outcome> + Send>>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() -> ExitCode {
    let criteria: [(u8, &str, Check); 10] = [
        (1, "instance lifecycle conformance", || {
            Box::pin(lifecycle_conformance())
        }),
        (2, "activity event order", || {
            Box::pin(activity_event_order())
        }),
        (3, "vote combination", || Box::pin(vote_combination())),
        (4, "asynchronous updates", || Box::pin(async_updates())),
        (5, "stop drains running calls", || Box::pin(stop_drain())),
        (6, "loop enactment identifiers", || {
            Box::pin(loop_enactments())
        }),
        (7, "repair a stopped instance", || {
            Box::pin(repair_singleton())
        }),
        (8, "worklist strategies", || Box::pin(worklist_strategies())),
        (9, "log completeness at scale", || {
            Box::pin(log_completeness())
        }),
        (10, "federation", || Box::pin(federation())),
    ];
    let wanted: Vec<u8> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(8)
        .enable_all()
        .build()
        .expect("runtime");
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let started = Instant::now();
        let result = rt.block_on(async {
            tokio::time::timeout(Duration::from_secs(180), check())
                .await
                .unwrap_or_else(|_| Err("timed out".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n}: PASS - {name} ({detail}; {secs:.2}s)"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n}: FAIL - {name}: {detail} ({secs:.2}s)");
            }
        }
    }
    rt.shutdown_timeout(Duration::from_secs(1));
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn quick() -> EngineConfig {
    EngineConfig {
        retry_delay: Duration::from_millis(20),
        vote_timeout: Duration::from_secs(2),
        drain_timeout: Duration::from_secs(5),
        ..EngineConfig::default()
    }
}

fn model(root: Node, endpoints: &[(&str, String)]) -> ProcessModel {
    let mut m = ProcessModel::empty();
    m.root = root;
    m.endpoints = endpoints
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect();
    m
}

fn scripts(update: Option<&str>, finalize: Option<&str>) -> Scripts {
    Scripts {
        update: update.map(Into::into),
        finalize: finalize.map(Into::into),
        ..Default::default()
    }
}

fn args(pairs: &[(&str, &str)]) -> InvocationParameters {
    InvocationParameters {
        method: "POST".into(),
        arguments: pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect(),
    }
}

async fn start(engine: &Engine, m: ProcessModel) -> Result<(u64, EventStream), String> {
    let id = engine.create_instance().map_err(|e| e.to_string())?.id;
    let stream = watch_all(engine, id);
    engine.put_model(id, m).await.map_err(|e| e.to_string())?;
    engine
        .set_state(id, InstanceState::Running)
        .await
        .map_err(|e| e.to_string())?;
    Ok((id, stream))
}

fn is_state(e: &Envelope, state: &str) -> bool {
    e.topic == Topic::State && e.event == "change" && e.content["state"] == state
}

/// Reads events up to and including the first one matching `stop`.
async fn read_until(
    stream: &mut EventStream,
    seen: &mut Vec<Envelope>,
    stop: impl Fn(&Envelope) -> bool,
) -> Result<(), String> {
    let fut = async {
        while let Some(e) = stream.next().await {
            let done = stop(&e);
            seen.push(e);
            if done {
                return true;
            }
        }
        false
    };
    match tokio::time::timeout(Duration::from_secs(20), fut).await {
        Ok(true) => Ok(()),
        _ => Err(format!(
            "expected event never came; saw {:?}",
            seen.iter().map(Envelope::name).collect::<Vec<_>>()
        )),
    }
}

/// Reads whatever arrives until the stream stays quiet for `quiet`.
async fn read_quiet(stream: &mut EventStream, seen: &mut Vec<Envelope>, quiet: Duration) {
    while let Ok(Some(e)) = tokio::time::timeout(quiet, stream.next()).await {
        seen.push(e);
    }
}

fn activity(e: &Envelope) -> &str {
    e.content["activity"].as_str().unwrap_or("")
}

fn enactment(e: &Envelope) -> &str {
    e.content["enactment"].as_str().unwrap_or("")
}

async fn wait_for<T>(limit: Duration, mut probe: impl FnMut() -> Option<T>) -> Option<T> {
    let deadline = Instant::now() + limit;
    loop {
        if let Some(v) = probe() {
            return Some(v);
        }
        if Instant::now() > deadline {
            return None;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
}

/// Callback URL of the asynchronous call `services` received from instance `id`.
async fn callback_of(services: &ScriptedServices, id: u64) -> Result<String, String> {
    let marker = format!("/{id}/callbacks/");
    wait_for(Duration::from_secs(10), || {
        services
            .stats
            .callbacks()
            .into_iter()
            .find(|u| u.contains(&marker))
    })
    .await
    .ok_or_else(|| format!("instance {id} never made an asynchronous call"))
}

async fn put_answer(
    http: &reqwest::Client,
    url: &str,
    update: bool,
    body: Value,
) -> Result<u16, String> {
    let mut req = http.put(url).json(&body);
    if update {
        req = req.header(headers::UPDATE, "true");
    }
    req.send()
        .await
        .map(|r| r.status().as_u16())
        .map_err(|e| e.to_string())
}

// 1 -------------------------------------------------------------------------

/// Written out by hand from the lifecycle description.
const LEGAL: [(InstanceState, InstanceState, Cause); 11] = {
    use Cause::*;
    use InstanceState::*;
    [
        (Ready, Running, Command),
        (Ready, Abandoned, Command),
        (Running, Stopping, Command),
        (Running, Stopping, Error),
        (Running, Finished, Completion),
        (Running, Purged, Command),
        (Stopping, Stopped, Completion),
        (Stopping, Stopped, Error),
        (Stopped, Running, Command),
        (Stopped, Abandoned, Command),
        (Abandoned, Purged, Command),
    ]
};

fn legal(from: InstanceState, to: InstanceState, cause: Cause) -> bool {
    LEGAL.contains(&(from, to, cause))
}

async fn attempt(
    engine: &Engine,
    id: u64,
    to: InstanceState,
    cause: Cause,
) -> Result<InstanceState, EngineError> {
    match cause {
        Cause::Command => engine.set_state(id, to).await,
        other => engine.transition(id, to, other).await,
    }
}

/// Snapshot compared before and after rejected requests.
fn snapshot(engine: &Engine, id: u64, full: bool) -> Value {
    match engine.overview(id) {
        Ok(o) if full => serde_json::to_value(o).expect("serializes"),
        Ok(o) => json!(o.state),
        Err(e) => json!(e.to_string()),
    }
}

async fn lifecycle_conformance() -> Outcome {
    let started = Instant::now();
    let mut table_mismatches = Vec::new();
    for from in InstanceState::ALL {
        for to in InstanceState::ALL {
            for cause in Cause::ALL {
                if transition_allowed(from, to, cause) != legal(from, to, cause) {
                    table_mismatches.push(format!("{from}->{to} {cause:?}"));
                }
            }
        }
    }
    ensure!(
        table_mismatches.is_empty(),
        "edge table differs: {table_mismatches:?}"
    );

    let services = ScriptedServices::start().await;
    let engine = Engine::in_memory(quick());
    let hold = || {
        model(
            Node::sequence("root", vec![Node::call("a1", "svc")]),
            &[("svc", services.url("hold"))],
        )
    };
    let slow = model(
        Node::sequence("root", vec![Node::call("a1", "svc")]),
        &[("svc", services.url("slow/700"))],
    );
    let new = || {
        engine
            .create_instance()
            .map(|s| s.id)
            .map_err(|e| e.to_string())
    };
    let running = |m: ProcessModel| {
        let engine = engine.clone();
        async move {
            let (id, _) = start(&engine, m).await?;
            wait_for(Duration::from_secs(2), || {
                (!engine.callbacks().records_for(id).is_empty()).then_some(())
            })
            .await
            .ok_or("hold call never started")?;
            Ok::<u64, String>(id)
        }
    };
    let stopped = |m: ProcessModel| {
        let engine = engine.clone();
        async move {
            let id = running(m).await?;
            engine
                .set_state(id, InstanceState::Stopping)
                .await
                .map_err(|e| e.to_string())?;
            engine
                .wait_for_state(id, InstanceState::Stopped, Duration::from_secs(2))
                .await
                .map_err(|e| e.to_string())?;
            Ok::<u64, String>(id)
        }
    };

    let ready = new()?;
    let ready2 = new()?;
    let abandoned = new()?;
    engine
        .set_state(abandoned, InstanceState::Abandoned)
        .await
        .map_err(|e| e.to_string())?;
    let purged = new()?;
    engine
        .set_state(purged, InstanceState::Abandoned)
        .await
        .map_err(|e| e.to_string())?;
    engine.purge(purged).await.map_err(|e| e.to_string())?;
    let finished = new()?;
    engine
        .set_state(finished, InstanceState::Running)
        .await
        .map_err(|e| e.to_string())?;
    let (run1, run2, stop1, stop2) = tokio::join!(
        running(hold()),
        running(hold()),
        stopped(hold()),
        stopped(hold())
    );
    let (run1, run2, stop1, stop2) = (run1?, run2?, stop1?, stop2?);
    let (draining, _) = start(&engine, slow).await?;
    engine
        .set_state(draining, InstanceState::Stopping)
        .await
        .map_err(|e| e.to_string())?;
    engine
        .wait_for_state(finished, InstanceState::Finished, Duration::from_secs(2))
        .await
        .map_err(|e| e.to_string())?;

    let subjects = [
        (ready, Some(InstanceState::Ready)),
        (run1, Some(InstanceState::Running)),
        (draining, Some(InstanceState::Stopping)),
        (stop1, Some(InstanceState::Stopped)),
        (finished, Some(InstanceState::Finished)),
        (abandoned, Some(InstanceState::Abandoned)),
        (purged, None),
    ];
    let mut tried = 0;
    let mut problems = Vec::new();
    for (id, state) in subjects {
        // A draining instance may still move on its own, so only its state is compared.
        let full = state != Some(InstanceState::Stopping);
        let before = snapshot(&engine, id, full);
        if let Some(s) = state {
            if engine.state(id).ok() != Some(s) {
                problems.push(format!("instance {id} is not {s}"));
                continue;
            }
        }
        for to in InstanceState::ALL {
            for cause in Cause::ALL {
                if state.is_some_and(|s| legal(s, to, cause)) {
                    continue;
                }
                tried += 1;
                let res = attempt(&engine, id, to, cause).await;
                let rejected = match state {
                    Some(_) => matches!(res, Err(EngineError::IllegalTransition(_))),
                    None => matches!(res, Err(EngineError::NotFound(_))),
                };
                if !rejected {
                    problems.push(format!("{state:?} -> {to} {cause:?} gave {res:?}"));
                }
                let after = snapshot(&engine, id, full);
                if after != before {
                    problems.push(format!(
                        "{state:?} -> {to} {cause:?} changed {before} into {after}"
                    ));
                }
            }
        }
    }
    ensure!(
        problems.is_empty(),
        "{} problems: {:?}",
        problems.len(),
        problems
    );

    let accepted = [
        (ready, InstanceState::Abandoned),
        (ready2, InstanceState::Running),
        (run1, InstanceState::Stopping),
        (run2, InstanceState::Purged),
        (stop1, InstanceState::Running),
        (stop2, InstanceState::Abandoned),
        (abandoned, InstanceState::Purged),
    ];
    for (id, to) in accepted {
        let from = engine.state(id).map_err(|e| e.to_string())?;
        engine
            .set_state(id, to)
            .await
            .map_err(|e| format!("{from} -> {to} refused: {e}"))?;
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!("147 triples match the table, {tried} illegal requests rejected without side effects, 7 legal commands accepted"))
}

// 2 -------------------------------------------------------------------------

async fn activity_event_order() -> Outcome {
    const MODELS: u64 = 1000;
    let started = Instant::now();
    let services = ScriptedServices::start().await;
    let engine = serve_engine(EngineConfig::default()).await;
    let opts = GenOptions {
        manipulates: false,
        ..GenOptions::default()
    };
    let mut failures = Vec::new();
    let mut enactments = 0;
    let seeds: Vec<u64> = (0..MODELS).map(|i| 10_000 + i).collect();
    for chunk in seeds.chunks(50) {
        let runs = chunk.iter().map(|seed| {
            let g = Generated::new(*seed, &opts);
            let engine = engine.clone();
            let m = g.to_model(&services);
            async move { (g, run_to_end(&engine, m, Duration::from_secs(30)).await) }
        });
        for (g, run) in join_all(runs).await {
            let run = run.map_err(|e| format!("seed {}: {e}", g.seed))?;
            if g.depth() > opts.max_depth || g.activity_count() > opts.max_activities {
                failures.push(format!("seed {} out of bounds", g.seed));
            }
            if run.final_state.as_deref() != Some("finished") {
                failures.push(format!("seed {} ended {:?}", g.seed, run.final_state));
                continue;
            }
            for (id, (_, seq)) in activity_sequences(&run.events) {
                enactments += 1;
                if !matches_enactment_grammar(&seq) {
                    failures.push(format!("seed {} {id}: {seq:?}", g.seed));
                }
            }
        }
    }
    ensure!(
        failures.is_empty(),
        "{} violations, first: {:?}",
        failures.len(),
        &failures[..failures.len().min(5)]
    );
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!(
        "{MODELS} models, {enactments} enactments follow the grammar"
    ))
}

// 3 -------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum R {
    Ack,
    Skip,
    Stop,
    Start,
    XA,
    XB,
    YA,
    CondTrue,
    CondFalse,
}

const RESPONSES: [R; 9] = [
    R::Ack,
    R::Skip,
    R::Stop,
    R::Start,
    R::XA,
    R::XB,
    R::YA,
    R::CondTrue,
    R::CondFalse,
];

impl R {
    fn response(self) -> VoteResponse {
        let data = |name: &str, v: &str| {
            VoteResponse::Value(ValuePayload::named(
                ValueTarget::Dataelement,
                name,
                json!(v),
            ))
        };
        match self {
            R::Ack => VoteResponse::Ack,
            R::Skip => VoteResponse::Skip,
            R::Stop => VoteResponse::Stop,
            R::Start => VoteResponse::Start,
            R::XA => data("x", "a"),
            R::XB => data("x", "b"),
            R::YA => data("y", "a"),
            R::CondTrue => VoteResponse::Value(ValuePayload::condition(true)),
            R::CondFalse => VoteResponse::Value(ValuePayload::condition(false)),
        }
    }

    /// Value group and value, for value responses.
    fn value(self) -> Option<(&'static str, &'static str)> {
        match self {
            R::XA => Some(("x", "a")),
            R::XB => Some(("x", "b")),
            R::YA => Some(("y", "a")),
            R::CondTrue => Some(("condition", "true")),
            R::CondFalse => Some(("condition", "false")),
            _ => None,
        }
    }
}

/// (start, stop or disagreement, skip, some value agreed) -> (blocked, actions)
type Rule = ((bool, bool, bool, bool), (bool, &'static [&'static str]));

const RULES: [Rule; 16] = [
    ((false, false, false, false), (false, &["proceed"])),
    ((false, false, false, true), (false, &["set", "proceed"])),
    ((false, false, true, false), (false, &["skip"])),
    ((false, false, true, true), (false, &["set", "skip"])),
    ((false, true, false, false), (false, &["stop"])),
    ((false, true, false, true), (false, &["set", "stop"])),
    ((false, true, true, false), (false, &["skip", "stop"])),
    ((false, true, true, true), (false, &["set", "skip", "stop"])),
    ((true, false, false, false), (false, &["start", "proceed"])),
    (
        (true, false, false, true),
        (false, &["set", "start", "proceed"]),
    ),
    ((true, false, true, false), (false, &["start", "skip"])),
    (
        (true, false, true, true),
        (false, &["set", "start", "skip"]),
    ),
    ((true, true, false, false), (true, &[])),
    ((true, true, false, true), (true, &[])),
    ((true, true, true, false), (true, &[])),
    ((true, true, true, true), (true, &[])),
];

/// Expected verdict: blocked flag, action names and the agreed values.
fn oracle(
    set: &[R],
) -> (
    bool,
    Vec<&'static str>,
    BTreeSet<(&'static str, &'static str)>,
) {
    let mut groups: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for (group, value) in set.iter().filter_map(|r| r.value()) {
        groups.entry(group).or_default().insert(value);
    }
    let disagreement = groups.values().any(|vs| vs.len() > 1);
    let agreed: BTreeSet<(&str, &str)> = groups
        .iter()
        .filter(|(_, vs)| vs.len() == 1)
        .map(|(g, vs)| (*g, *vs.iter().next().expect("one value")))
        .collect();
    let key = (
        set.contains(&R::Start),
        set.contains(&R::Stop) || disagreement,
        set.contains(&R::Skip),
        !agreed.is_empty(),
    );
    let (blocked, actions) = RULES
        .iter()
        .find(|(k, _)| *k == key)
        .expect("table is complete")
        .1;
    let agreed = if blocked { BTreeSet::new() } else { agreed };
    (blocked, actions.to_vec(), agreed)
}

fn observed(
    set: &[R],
) -> (
    bool,
    Vec<&'static str>,
    BTreeSet<(&'static str, &'static str)>,
) {
    let responses: Vec<VoteResponse> = set.iter().map(|r| r.response()).collect();
    let verdict = combine_votes(&responses);
    let names = verdict
        .actions
        .iter()
        .map(|a| match a {
            Action::SetValues(_) => "set",
            Action::StartInstance => "start",
            Action::SkipActivity => "skip",
            Action::StopInstance => "stop",
            Action::Proceed => "proceed",
        })
        .collect();
    let values = verdict
        .values()
        .iter()
        .map(|v| {
            let group = match (&v.target, v.name.as_deref()) {
                (ValueTarget::Condition, _) => "condition",
                (_, Some("x")) => "x",
                (_, Some("y")) => "y",
                _ => "?",
            };
            let value = match &v.value {
                Value::Bool(true) => "true",
                Value::Bool(false) => "false",
                Value::String(s) if s == "a" => "a",
                Value::String(s) if s == "b" => "b",
                _ => "?",
            };
            (group, value)
        })
        .collect();
    (verdict.blocked, names, values)
}

fn permutations(set: &[R]) -> Vec<Vec<R>> {
    if set.len() <= 1 {
        return vec![set.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..set.len() {
        let mut rest = set.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

async fn vote_combination() -> Outcome {
    let mut multisets: Vec<Vec<R>> = vec![vec![]];
    for a in 0..RESPONSES.len() {
        multisets.push(vec![RESPONSES[a]]);
        for b in a..RESPONSES.len() {
            multisets.push(vec![RESPONSES[a], RESPONSES[b]]);
            for c in b..RESPONSES.len() {
                multisets.push(vec![RESPONSES[a], RESPONSES[b], RESPONSES[c]]);
            }
        }
    }
    let mut orderings = 0;
    let mut mismatches = Vec::new();
    for set in &multisets {
        let expected = oracle(set);
        for order in permutations(set) {
            orderings += 1;
            let got = observed(&order);
            if got != expected {
                mismatches.push(format!("{order:?}: expected {expected:?}, got {got:?}"));
            }
        }
    }
    ensure!(
        mismatches.is_empty(),
        "{} of {orderings} differ, first: {:?}",
        mismatches.len(),
        &mismatches[..mismatches.len().min(3)]
    );
    Ok(format!(
        "{} multisets in {orderings} orderings match the rule table",
        multisets.len()
    ))
}

// 4 -------------------------------------------------------------------------

async fn async_updates() -> Outcome {
    let services = ScriptedServices::start().await;
    let engine = serve_engine(quick()).await;
    let http = reqwest::Client::new();
    for n in 0..=10u64 {
        let a1 = Node::call("a1", "hold").with_scripts(scripts(
            Some("data.u = data.u + 1"),
            Some("data.f = data.f + 1"),
        ));
        let mut m = model(
            Node::sequence("root", vec![a1, Node::call("a2", "sync")]),
            &[
                ("hold", services.url("hold")),
                ("sync", services.sync_url()),
            ],
        );
        m.dataelements.insert("u".into(), json!(0));
        m.dataelements.insert("f".into(), json!(0));
        let (id, mut stream) = start(&engine, m).await?;
        let url = callback_of(&services, id).await?;
        let mut seen = Vec::new();
        for i in 0..n {
            let status = put_answer(&http, &url, true, json!({"i": i})).await?;
            ensure!(status == 200, "N={n}: update {i} answered {status}");
        }
        read_quiet(&mut stream, &mut seen, Duration::from_millis(100)).await;
        let data = engine
            .context(id, Category::Dataelements)
            .map_err(|e| e.to_string())?;
        ensure!(
            data["u"] == json!(n) && data["f"] == json!(0),
            "N={n}: before the final answer data is {data:?}"
        );
        ensure!(
            !seen.iter().any(|e| activity(e) == "a2"),
            "N={n}: a2 started before the final answer"
        );
        ensure!(
            engine.state(id).ok() == Some(InstanceState::Running),
            "N={n}: instance left running"
        );

        let status = put_answer(&http, &url, false, json!({"i": n})).await?;
        ensure!(status == 200, "N={n}: final answer got {status}");
        read_until(&mut stream, &mut seen, |e| is_state(e, "finished")).await?;
        let data = engine
            .context(id, Category::Dataelements)
            .map_err(|e| e.to_string())?;
        ensure!(
            data["u"] == json!(n) && data["f"] == json!(1),
            "N={n}: after finishing data is {data:?}"
        );
        let a1_done = seen
            .iter()
            .position(|e| activity(e) == "a1" && e.event == "done");
        let a2_calling = seen
            .iter()
            .position(|e| activity(e) == "a2" && e.event == "calling");
        ensure!(
            matches!((a1_done, a2_calling), (Some(d), Some(c)) if d < c),
            "N={n}: a2 did not follow a1"
        );
        let late = put_answer(&http, &url, false, json!({"late": true})).await?;
        ensure!(late == 404, "N={n}: answer after the final one got {late}");
    }
    Ok("N = 0..10: N update scripts, one finalize, continuation after the final answer, late answer 404".into())
}

// 5 -------------------------------------------------------------------------

async fn stop_drain() -> Outcome {
    let services = ScriptedServices::start().await;
    let engine = serve_engine(quick()).await;
    let http = reqwest::Client::new();
    let root = Node::parallel(
        "p",
        Wait::All,
        vec![
            Node::branch(
                "b1",
                vec![Node::call("s1", "slow"), Node::call("s2", "sync")],
            ),
            Node::branch("b2", vec![Node::call("w1", "hold")]),
        ],
    );
    let endpoints = [
        ("slow", services.url("slow/300")),
        ("sync", services.sync_url()),
        ("hold", services.url("hold")),
    ];
    let (id, mut stream) = start(&engine, model(root, &endpoints)).await?;
    let url = callback_of(&services, id).await?;
    let mut seen = Vec::new();
    read_until(&mut stream, &mut seen, |e| {
        activity(e) == "s1" && e.event == "calling"
    })
    .await?;
    engine
        .set_state(id, InstanceState::Stopping)
        .await
        .map_err(|e| e.to_string())?;
    let mark = seen.len();
    read_until(&mut stream, &mut seen, |e| is_state(e, "stopped")).await?;
    let order: Vec<String> = seen[mark..]
        .iter()
        .filter_map(|e| {
            if is_state(e, "stopping") || is_state(e, "stopped") {
                Some(e.content["state"].as_str().unwrap_or("").to_string())
            } else if e.event == "receiving" {
                Some(format!("receiving {}", activity(e)))
            } else {
                None
            }
        })
        .collect();
    ensure!(
        order == ["stopping", "receiving s1", "stopped"],
        "order was {order:?}"
    );
    let positions = engine.positions(id).map_err(|e| e.to_string())?;
    ensure!(
        positions.contains(&Position::at("s2")),
        "s2 not kept as next position: {positions:?}"
    );

    let suspended = put_answer(&http, &url, false, json!({"late": true})).await?;
    ensure!(suspended == 503, "answer while stopped got {suspended}");
    engine
        .set_state(id, InstanceState::Running)
        .await
        .map_err(|e| e.to_string())?;
    let accepted = put_answer(&http, &url, false, json!({"late": true})).await?;
    ensure!(accepted == 200, "answer after restart got {accepted}");
    read_until(&mut stream, &mut seen, |e| is_state(e, "finished")).await?;
    ensure!(
        seen.iter()
            .any(|e| activity(e) == "w1" && e.event == "done"),
        "w1 never completed"
    );
    Ok("stopping, receiving, stopped; held answer 503 while stopped, 200 after restart".into())
}

// 6 -------------------------------------------------------------------------

async fn loop_enactments() -> Outcome {
    let services = ScriptedServices::start().await;
    let engine = Engine::in_memory(quick());
    let body = Node::call("t1", "sync").with_scripts(scripts(None, Some("data.i = data.i + 1")));
    let mut m = model(
        Node::sequence(
            "root",
            vec![Node::looped(
                "l1",
                LoopMode::PreTest,
                "data.i < 5",
                vec![body],
            )],
        ),
        &[("sync", services.sync_url())],
    );
    m.dataelements.insert("i".into(), json!(0));
    let run = run_to_end(&engine, m, Duration::from_secs(10))
        .await
        .map_err(|e| e.to_string())?;
    ensure!(
        run.final_state.as_deref() == Some("finished"),
        "ended {:?}",
        run.final_state
    );
    let callings: Vec<&str> = run
        .events
        .iter()
        .filter(|e| activity(e) == "t1" && e.event == "calling")
        .map(enactment)
        .collect();
    let ids: BTreeSet<&str> = run
        .events
        .iter()
        .filter(|e| activity(e) == "t1")
        .map(enactment)
        .collect();
    let expected: Vec<String> = (1..=5).map(|n| format!("t1-enactment-{n}")).collect();
    ensure!(callings == expected, "calling events carried {callings:?}");
    ensure!(
        ids.len() == 5 && ids.iter().all(|i| expected.iter().any(|e| e == i)),
        "enactment ids {ids:?}"
    );
    Ok(expected.join(", "))
}

// 7 -------------------------------------------------------------------------

async fn repair_singleton() -> Outcome {
    let services = ScriptedServices::start().await;
    let engine = serve_engine(quick()).await;
    let base = engine.config().base_url.clone();
    let http = reqwest::Client::new();
    let created: Value = http
        .post(&base)
        .send()
        .await
        .map_err(|e| e.to_string())?
        .json()
        .await
        .map_err(|e| e.to_string())?;
    let id = created["id"].as_u64().ok_or("no id in creation answer")?;
    let url = created["url"]
        .as_str()
        .ok_or("no url in creation answer")?
        .to_string();
    let mut stream = watch_all(&engine, id);
    let mut seen = Vec::new();

    let original = model(
        Node::sequence(
            "root",
            vec![Node::call("a1", "svc"), Node::call("a2", "svc")],
        ),
        &[("svc", services.url("fail"))],
    );
    let send = |req: reqwest::RequestBuilder| async move {
        let resp = req.send().await.map_err(|e| e.to_string())?;
        let status = resp.status();
        let text = resp.text().await.unwrap_or_default();
        if status.is_success() {
            Ok(())
        } else {
            Err(format!("{status}: {text}"))
        }
    };
    send(http.put(format!("{url}/model")).json(&original)).await?;
    send(
        http.put(format!("{url}/state"))
            .json(&json!({"state": "running"})),
    )
    .await?;
    read_until(&mut stream, &mut seen, |e| is_state(e, "stopped")).await?;
    ensure!(
        seen.iter()
            .any(|e| activity(e) == "a1" && e.event == "failed"),
        "a1 did not fail"
    );
    let positions = engine.positions(id).map_err(|e| e.to_string())?;
    ensure!(
        positions == vec![Position::at("a1")],
        "stopped at {positions:?}"
    );

    let mark = seen.len();
    send(
        http.patch(format!("{url}/endpoints"))
            .json(&json!({"svc": services.sync_url()})),
    )
    .await?;
    let repaired = model(
        Node::sequence(
            "root",
            vec![
                Node::call("a1", "svc"),
                Node::call("inserted", "svc"),
                Node::call("a2", "svc"),
            ],
        ),
        &[("svc", services.sync_url())],
    );
    send(http.put(format!("{url}/model")).json(&repaired)).await?;
    send(
        http.put(format!("{url}/state"))
            .json(&json!({"state": "running"})),
    )
    .await?;
    read_until(&mut stream, &mut seen, |e| is_state(e, "finished")).await?;

    let after = &seen[mark..];
    ensure!(
        after.iter().any(|e| e.name() == "endpoints/change"),
        "no endpoints/change event"
    );
    ensure!(
        after.iter().any(|e| e.name() == "description/change"),
        "no description/change event"
    );
    let done: Vec<&str> = after
        .iter()
        .filter(|e| e.event == "done")
        .map(activity)
        .collect();
    ensure!(done == ["a1", "inserted", "a2"], "completed {done:?}");
    let attrs: Value = http
        .get(format!("{url}/attributes"))
        .send()
        .await
        .map_err(|e| e.to_string())?
        .json()
        .await
        .map_err(|e| e.to_string())?;
    ensure!(attrs["singleton"] == "true", "attributes {attrs}");
    Ok("failed at a1, repaired, restarted at a1, finished with singleton=true".into())
}

// 8 -------------------------------------------------------------------------

fn origin(n: usize) -> Origin {
    Origin {
        callback_url: format!("http://engine/cb/{n}"),
        activity: format!("t{n}"),
        enactment: format!("t{n}-enactment-1"),
        ..Default::default()
    }
}

fn request(role: &str) -> TaskRequest {
    TaskRequest {
        role: role.into(),
        ..Default::default()
    }
}

fn round_robin() -> Result<String, String> {
    let mut w = Worklist::new(
        WorklistConfig::new(StrategyKind::RoundRobin).with_role("clerk", &["u1", "u2", "u3"]),
    );
    let now = Utc::now();
    let picks: Vec<String> = (0..9)
        .map(|n| {
            let (id, _) = w.create(origin(n), request("clerk"), now);
            w.task(&id)
                .and_then(|t| t.assigned_user.clone())
                .unwrap_or_default()
        })
        .collect();
    let expected: Vec<String> = (0..9).map(|n| format!("u{}", n % 3 + 1)).collect();
    ensure!(picks == expected, "round robin gave {picks:?}");
    Ok("3x3".into())
}

fn workload(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let users = ["u1", "u2", "u3", "u4", "u5"];
    let mut cfg = WorklistConfig::new(StrategyKind::Workload).with_role("clerk", &users);
    cfg.seed = 7;
    let mut w = Worklist::new(cfg);
    let now = Utc::now();
    for n in 0..100 {
        if n > 0 && rng.random_bool(0.3) {
            let open: Vec<(String, String)> = w
                .tasks()
                .filter_map(|t| {
                    t.assigned_user
                        .clone()
                        .filter(|_| !t.state.is_terminal())
                        .map(|u| (t.id.clone(), u))
                })
                .collect();
            if let Some((id, user)) = open.choose(rng) {
                w.act(id, user, UserAction::Complete, None, now)
                    .map_err(|e| e.to_string())?;
            }
        }
        let excluded: Vec<String> = users
            .iter()
            .filter(|_| rng.random_bool(0.2))
            .map(|u| u.to_string())
            .collect();
        let eligible: Vec<&str> = users
            .iter()
            .copied()
            .filter(|u| !excluded.iter().any(|e| e == u))
            .collect();
        let loads: HashMap<&str, usize> = users.iter().map(|u| (*u, w.load(u))).collect();
        let (id, _) = w.create(
            origin(n),
            TaskRequest {
                excluded_users: excluded,
                ..request("clerk")
            },
            now,
        );
        let task = w.task(&id).ok_or("task vanished")?;
        match (&task.assigned_user, eligible.iter().map(|u| loads[u]).min()) {
            (Some(u), Some(min)) => {
                ensure!(
                    eligible.contains(&u.as_str()),
                    "task {n} went to excluded {u}"
                );
                ensure!(
                    loads[u.as_str()] == min,
                    "task {n} went to {u} with load {} while the minimum was {min}",
                    loads[u.as_str()]
                );
            }
            (None, None) => {}
            (got, min) => return Err(format!("task {n}: assigned {got:?}, minimum load {min:?}")),
        }
    }
    Ok("100 tasks".into())
}

fn skill_based(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let skill_names = ["a", "b", "c", "d"];
    for round in 0..50 {
        let users: Vec<String> = (0..rng.random_range(2..=6))
            .map(|i| format!("u{i}"))
            .collect();
        let mut cfg = WorklistConfig::new(StrategyKind::SkillBased);
        cfg.roles.insert("expert".into(), users.clone());
        for u in &users {
            let offered = skill_names
                .iter()
                .map(|s| (s.to_string(), rng.random_range(0..=3) as f64))
                .collect();
            cfg.skills.insert(u.clone(), offered);
        }
        let required: BTreeMap<String, f64> = skill_names
            .iter()
            .map(|s| (s.to_string(), rng.random_range(0..=3) as f64))
            .collect();
        // First member with the highest dot product.
        let mut best: Option<(&String, f64)> = None;
        for u in &users {
            let score: f64 = skill_names
                .iter()
                .map(|s| required[*s] * cfg.skills[u][*s])
                .sum();
            if best.is_none() || score > best.expect("set").1 {
                best = Some((u, score));
            }
        }
        let expected = best.map(|(u, _)| u.clone());
        let mut w = Worklist::new(cfg);
        let (id, _) = w.create(
            origin(round),
            TaskRequest {
                skills: required,
                ..request("expert")
            },
            Utc::now(),
        );
        let got = w.task(&id).and_then(|t| t.assigned_user.clone());
        ensure!(
            got == expected,
            "matrix {round}: expected {expected:?}, got {got:?}"
        );
    }
    Ok("50 matrices".into())
}

fn duties(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let users = ["u1", "u2", "u3", "u4"];
    let mut rejected = 0;
    for seq in 0..200 {
        let mut cfg = WorklistConfig::new(StrategyKind::RoundRobin).with_role("clerk", &users[..3]);
        cfg.mode = if seq % 2 == 0 {
            Mode::SelfService
        } else {
            Mode::AutoAssign
        };
        let mut w = Worklist::new(cfg);
        let excluded: Vec<String> = users
            .iter()
            .filter(|_| rng.random_bool(0.3))
            .map(|u| u.to_string())
            .collect();
        let bound = rng
            .random_bool(0.4)
            .then(|| users.choose(rng).expect("users").to_string());
        let req = TaskRequest {
            excluded_users: excluded.clone(),
            bound_user: bound.clone(),
            ..request("clerk")
        };
        let now = Utc::now();
        let (id, _) = w.create(origin(seq), req, now);
        let check = |w: &Worklist| -> Result<(), String> {
            let t = w.task(&id).ok_or("task vanished")?;
            for u in t.worked_by.iter().chain(t.assigned_user.iter()) {
                ensure!(
                    !excluded.contains(u),
                    "sequence {seq}: excluded {u} worked on the task"
                );
                ensure!(
                    bound.as_ref().is_none_or(|b| b == u),
                    "sequence {seq}: {u} worked on a task bound to {bound:?}"
                );
            }
            Ok(())
        };
        check(&w)?;
        for _ in 0..rng.random_range(1..=8) {
            let user = *users.choose(rng).expect("users");
            let action = *[UserAction::Take, UserAction::Return, UserAction::Complete]
                .choose(rng)
                .expect("actions");
            let before = w.task(&id).cloned();
            let result = w.act(&id, user, action, Some(json!({"by": user})), now);
            let offends =
                excluded.iter().any(|e| e == user) || bound.as_deref().is_some_and(|b| b != user);
            ensure!(
                !(offends && result.is_ok()),
                "sequence {seq}: {user} was allowed to {action:?}"
            );
            if result.is_err() {
                rejected += 1;
                ensure!(
                    w.task(&id).cloned() == before,
                    "sequence {seq}: rejected {action:?} by {user} changed the task"
                );
            }
            check(&w)?;
        }
    }
    Ok(format!(
        "200 sequences, {rejected} rejected actions without effect"
    ))
}

async fn worklist_strategies() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let parts = [
        round_robin()?,
        workload(&mut rng)?,
        skill_based(&mut rng)?,
        duties(&mut rng)?,
    ];
    Ok(format!(
        "round robin {}, workload {}, skills {}, duties {}",
        parts[0], parts[1], parts[2], parts[3]
    ))
}

// 9 -------------------------------------------------------------------------

async fn serve(app: Router) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0")
        .await
        .expect("bind");
    let addr = listener.local_addr().expect("addr");
    tokio::spawn(async move { axum::serve(listener, app).await.expect("serve") });
    format!("http://{addr}")
}

async fn log_completeness() -> Outcome {
    const INSTANCES: usize = 100;
    const ACTIVITIES: usize = 10;
    let services = ScriptedServices::start().await;
    let engine = serve_engine(quick()).await;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let logger = Arc::new(XesLogger::new(dir.path()).map_err(|e| e.to_string())?);
    let log_url = serve(xes::router(logger.clone())).await;
    engine
        .subscribe(XesLogger::subscription(&log_url))
        .map_err(|e| e.to_string())?;

    let sse_id = engine
        .subscribe(SubscriptionSpec::sse(
            Topic::ALL
                .iter()
                .map(|t| Selection::event(*t, "*"))
                .collect(),
        ))
        .map_err(|e| e.to_string())?;
    let mut sse = engine
        .gateway()
        .stream(&sse_id)
        .ok_or("no stream for the subscription")?;
    let streamed: Arc<Mutex<HashMap<uuid::Uuid, u64>>> = Arc::default();
    let sink = streamed.clone();
    tokio::spawn(async move {
        while let Some(e) = sse.next().await {
            *sink
                .lock()
                .expect("lock")
                .entry(e.instance_uuid)
                .or_default() += 1;
        }
    });

    let started = Instant::now();
    let calls: Vec<Node> = (0..ACTIVITIES)
        .map(|i| Node::call(format!("a{i}"), "sync"))
        .collect();
    let m = model(
        Node::sequence("root", calls),
        &[("sync", services.sync_url())],
    );
    let runs = (0..INSTANCES).map(|_| {
        let engine = engine.clone();
        let m = m.clone();
        async move {
            let id = engine.create_instance().map_err(|e| e.to_string())?.id;
            engine.put_model(id, m).await.map_err(|e| e.to_string())?;
            engine
                .set_state(id, InstanceState::Running)
                .await
                .map_err(|e| e.to_string())?;
            let done = engine
                .wait_for_state(id, InstanceState::Finished, Duration::from_secs(60))
                .await
                .map_err(|e| e.to_string())?;
            ensure!(done, "instance {id} did not finish");
            engine
                .overview(id)
                .map(|o| o.uuid)
                .map_err(|e| e.to_string())
        }
    });
    let uuids: Vec<uuid::Uuid> = join_all(runs).await.into_iter().collect::<Result<_, _>>()?;
    let elapsed = started.elapsed();
    ensure!(
        elapsed < Duration::from_secs(60),
        "{INSTANCES} instances took {elapsed:?}"
    );

    // Delivery to the log is asynchronous; wait until both sides settle.
    let settled = wait_for(Duration::from_secs(30), || {
        let sse = streamed.lock().expect("lock").clone();
        let xes = logger.counts();
        let total: u64 = sse.values().sum();
        (total > 0
            && uuids
                .iter()
                .all(|u| sse.get(u).is_some_and(|n| xes.get(u) == Some(n))))
        .then_some(total)
    })
    .await;
    let sse = streamed.lock().expect("lock").clone();
    let Some(total) = settled else {
        let xes = logger.counts();
        let short: Vec<String> = uuids
            .iter()
            .filter(|u| xes.get(u) != sse.get(u))
            .take(3)
            .map(|u| format!("{u}: xes {:?} sse {:?}", xes.get(u), sse.get(u)))
            .collect();
        return Err(format!("logged and streamed counts differ: {short:?}"));
    };
    for u in &uuids {
        let text = std::fs::read_to_string(logger.path_for(u)).map_err(|e| e.to_string())?;
        let events =
            xes::parse_events(&text).map_err(|e| format!("trace {u} is not well formed: {e}"))?;
        ensure!(
            events.len() as u64 == sse[u],
            "trace {u} holds {} events, {} were streamed",
            events.len(),
            sse[u]
        );
        let activity_events = events
            .iter()
            .filter(|e| e.get("cpee:topic").map(String::as_str) == Some("activity"))
            .count();
        ensure!(
            activity_events == ACTIVITIES * 5,
            "trace {u} holds {activity_events} activity events"
        );
    }

    let mut samples: Vec<Duration> = (0..2000)
        .map(|i| {
            let env = Envelope::new(
                Topic::Status,
                "change",
                0,
                uuid::Uuid::nil(),
                json!({"sample": i}),
            );
            let t = Instant::now();
            let _ = engine.bus().publish(BusMessage::event(env));
            t.elapsed()
        })
        .collect();
    samples.sort();
    let median = samples[samples.len() / 2];
    ensure!(
        median < Duration::from_millis(1),
        "median emit latency {median:?}"
    );
    Ok(format!(
        "{INSTANCES} instances in {:.1}s, {total} events logged without loss, median emit {:.1}us",
        elapsed.as_secs_f64(),
        median.as_secs_f64() * 1e6
    ))
}

// 10 ------------------------------------------------------------------------

async fn federation() -> Outcome {
    let mut child = tokio::process::Command::new(env!("CARGO_BIN_EXE_pf-engine"))
        .args(["--listen", "127.0.0.1:0", "--services"])
        .stdout(std::process::Stdio::piped())
        .kill_on_drop(true)
        .spawn()
        .map_err(|e| format!("child engine did not start: {e}"))?;
    let stdout = child.stdout.take().ok_or("no child stdout")?;
    let mut lines = BufReader::new(stdout).lines();
    let banner = tokio::time::timeout(Duration::from_secs(10), lines.next_line())
        .await
        .map_err(|_| "child engine printed nothing")?
        .map_err(|e| e.to_string())?
        .ok_or("child engine exited")?;
    let child_base = banner
        .split("instances at ")
        .nth(1)
        .map(|s| s.trim_end_matches(')').to_string())
        .ok_or_else(|| format!("unexpected banner {banner:?}"))?;
    let child_root = banner
        .split_whitespace()
        .find(|w| w.starts_with("http://"))
        .ok_or("no address in banner")?
        .to_string();

    let sub = model(
        Node::sequence(
            "root",
            vec![Node::call("wait", "timeout").with_parameters(args(&[("timeout", "0.3")]))],
        ),
        &[("timeout", format!("{child_root}/services/timeout"))],
    );
    let sub_doc = serde_json::to_value(&sub).map_err(|e| e.to_string())?;
    let model_url = serve(Router::new().route("/model", get(move || async move { Json(sub_doc) })))
        .await
        + "/model";

    let services = ScriptedServices::start().await;
    let engine = serve_engine(quick()).await;
    let parent_services = serve(pf_services::router(ServiceSet {
        worklist: None,
        logger: None,
    }))
    .await;
    let quoted = |s: &str| format!("{s:?}");
    let spawn = Node::call("sp", "spawn").with_parameters(args(&[
        ("engine", &quoted(&child_base)),
        ("model_url", &quoted(&model_url)),
    ]));
    let m = model(
        Node::sequence("root", vec![spawn, Node::call("after", "sync")]),
        &[
            ("spawn", format!("{parent_services}/spawn")),
            ("sync", services.sync_url()),
        ],
    );
    let (id, mut stream) = start(&engine, m).await?;
    let http = reqwest::Client::new();
    let mut seen = Vec::new();
    read_until(&mut stream, &mut seen, |e| {
        e.topic == Topic::Task && e.event == "instantiation"
    })
    .await?;
    let announced = seen.last().expect("just read").content["content"]["url"]
        .as_str()
        .unwrap_or("")
        .to_string();
    ensure!(
        announced.starts_with(&child_base),
        "instantiation pointed at {announced:?}, child engine is {child_base}"
    );
    let child_state = |http: reqwest::Client, url: String| async move {
        let v: Value = http
            .get(format!("{url}/state"))
            .send()
            .await
            .map_err(|e| e.to_string())?
            .json()
            .await
            .map_err(|e| e.to_string())?;
        Ok::<String, String>(v["state"].as_str().unwrap_or("").to_string())
    };
    let first = child_state(http.clone(), announced.clone()).await?;
    ensure!(
        first == "running",
        "child was {first} while the parent waited"
    );
    ensure!(
        !seen
            .iter()
            .any(|e| activity(e) == "sp" && e.event == "done"),
        "parent moved on before the child ended"
    );

    read_until(&mut stream, &mut seen, |e| {
        activity(e) == "sp" && e.event == "done"
    })
    .await?;
    let at_unblock = child_state(http.clone(), announced.clone()).await?;
    ensure!(
        at_unblock == "finished",
        "parent unblocked while the child was {at_unblock}"
    );
    read_until(&mut stream, &mut seen, |e| is_state(e, "finished")).await?;
    let overview = engine.overview(id).map_err(|e| e.to_string())?;
    ensure!(
        overview.spawned.contains(&announced),
        "spawned list {:?}",
        overview.spawned
    );
    let _ = child.kill().await;
    Ok(format!(
        "child {announced} ran on a second process and unblocked the parent"
    ))
}
