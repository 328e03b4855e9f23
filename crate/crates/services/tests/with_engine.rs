//! Reference services driven by a real engine.

use std::sync::Arc;
use std::time::Duration;

use pf_core::config::EngineConfig;
use pf_core::event::{Envelope, Topic};
use pf_core::gateway::EventStream;
use pf_core::lifecycle::InstanceState;
use pf_core::model::{InvocationParameters, Node, ProcessModel, Scripts};
use pf_core::{Category, Engine};
use pf_services::worklist::{StrategyKind, WorklistConfig};
use pf_services::{router, ServiceSet, XesLogger};
use pf_testkit::{serve_engine, watch_all};
use serde_json::{json, Value};

async fn serve_services(set: ServiceSet) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = router(set);
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}")
}

fn call(id: &str, endpoint: &str, args: &[(&str, &str)], finalize: Option<&str>) -> Node {
    Node::call(id, endpoint)
        .with_parameters(InvocationParameters {
            method: "POST".into(),
            arguments: args
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        })
        .with_scripts(Scripts {
            finalize: finalize.map(Into::into),
            ..Default::default()
        })
}

async fn run(engine: &Engine, root: Node, endpoints: &[(&str, String)]) -> (u64, EventStream) {
    let mut m = ProcessModel::empty();
    m.root = root;
    m.endpoints = endpoints
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect();
    let id = engine.create_instance().unwrap().id;
    let stream = watch_all(engine, id);
    engine.put_model(id, m).await.unwrap();
    engine.set_state(id, InstanceState::Running).await.unwrap();
    (id, stream)
}

async fn until(stream: &mut EventStream, stop: impl Fn(&Envelope) -> bool) -> Vec<Envelope> {
    let mut seen = Vec::new();
    let read = async {
        while let Some(e) = stream.next().await {
            let done = stop(&e);
            seen.push(e);
            if done {
                break;
            }
        }
    };
    tokio::time::timeout(Duration::from_secs(10), read)
        .await
        .expect("event never came");
    seen
}

fn finished(e: &Envelope) -> bool {
    e.topic == Topic::State && e.content["state"] == "finished"
}

#[tokio::test(flavor = "multi_thread")]
async fn worklist_task_round_trip() {
    let engine = serve_engine(EngineConfig::default()).await;
    let cfg = WorklistConfig::new(StrategyKind::RoundRobin).with_role("clerk", &["ann", "bob"]);
    let services = serve_services(ServiceSet {
        worklist: Some(cfg),
        logger: None,
    })
    .await;
    let http = reqwest::Client::new();
    let task = call(
        "approve",
        "worklist",
        &[("role", "\"clerk\"")],
        Some("data.verdict = result.result.ok"),
    );
    let (id, mut stream) = run(
        &engine,
        Node::sequence("root", vec![task]),
        &[("worklist", format!("{services}/worklist"))],
    )
    .await;

    until(&mut stream, |e| e.event == "worklist/task-assigned").await;
    let tasks: Value = http
        .get(format!("{services}/worklist/tasks?user=ann"))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let tid = tasks[0]["id"].as_str().unwrap().to_string();
    assert_eq!(tasks[0]["origin"]["enactment"], "approve-enactment-1");

    let wrong = http
        .post(format!("{services}/worklist/tasks/{tid}/complete"))
        .json(&json!({"user": "bob"}))
        .send()
        .await
        .unwrap();
    assert_eq!(wrong.status(), 403);
    let ok = http
        .post(format!("{services}/worklist/tasks/{tid}/complete"))
        .json(&json!({"user": "ann", "result": {"ok": true}}))
        .send()
        .await
        .unwrap();
    assert!(ok.status().is_success());

    let seen = until(&mut stream, finished).await;
    assert!(seen
        .iter()
        .any(|e| e.topic == Topic::Task && e.event == "worklist/task-finished"));
    assert_eq!(
        engine.context(id, Category::Dataelements).unwrap()["verdict"],
        json!(true)
    );
}

#[tokio::test(flavor = "multi_thread")]
async fn timeout_service_answers_later() {
    let engine = serve_engine(EngineConfig::default()).await;
    let services = serve_services(ServiceSet {
        worklist: None,
        logger: None,
    })
    .await;
    let wait = call(
        "wait",
        "timeout",
        &[("timeout", "0.2")],
        Some("data.waited = result.timeout"),
    );
    let started = std::time::Instant::now();
    let (id, mut stream) = run(
        &engine,
        Node::sequence("root", vec![wait]),
        &[("timeout", format!("{services}/timeout"))],
    )
    .await;
    until(&mut stream, finished).await;
    assert!(started.elapsed() >= Duration::from_millis(200));
    assert_eq!(
        engine.context(id, Category::Dataelements).unwrap()["waited"],
        json!(0.2)
    );

    let http = reqwest::Client::new();
    let bad = http
        .post(format!("{services}/timeout"))
        .json(&json!({"timeout": -1}))
        .send()
        .await
        .unwrap();
    assert_eq!(bad.status(), 400);
}

#[tokio::test(flavor = "multi_thread")]
async fn spawner_needs_a_model() {
    let engine = serve_engine(EngineConfig::default()).await;
    let services = serve_services(ServiceSet {
        worklist: None,
        logger: None,
    })
    .await;
    let (_, mut stream) = run(
        &engine,
        Node::sequence("root", vec![call("sp", "spawn", &[], None)]),
        &[("spawn", format!("{services}/spawn"))],
    )
    .await;
    let seen = until(&mut stream, |e| {
        e.topic == Topic::State && e.content["state"] == "stopped"
    })
    .await;
    assert!(seen
        .iter()
        .any(|e| e.event == "failed" && e.content["activity"] == "sp"));
}

#[tokio::test(flavor = "multi_thread")]
async fn logger_writes_one_trace_per_instance() {
    let engine = serve_engine(EngineConfig::default()).await;
    let dir = tempfile::tempdir().unwrap();
    let logger = Arc::new(XesLogger::new(dir.path()).unwrap());
    let services = serve_services(ServiceSet {
        worklist: None,
        logger: Some(logger.clone()),
    })
    .await;
    engine
        .subscribe(XesLogger::subscription(&format!("{services}/log")))
        .unwrap();
    let wait = call("wait", "timeout", &[("timeout", "0")], None);
    let (id, mut stream) = run(
        &engine,
        Node::sequence("root", vec![wait]),
        &[("timeout", format!("{services}/timeout"))],
    )
    .await;
    let streamed = until(&mut stream, finished).await;
    let uuid = engine.overview(id).unwrap().uuid;
    // The log also saw the creation events the stream missed.
    for _ in 0..200 {
        if logger.event_count(&uuid) > streamed.len() as u64 {
            break;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    let text = std::fs::read_to_string(logger.path_for(&uuid)).unwrap();
    let events = pf_services::xes::parse_events(&text).unwrap();
    assert_eq!(events.len() as u64, logger.event_count(&uuid));
    let transitions: Vec<&str> = events
        .iter()
        .filter_map(|e| e.get("lifecycle:transition").map(String::as_str))
        .collect();
    assert_eq!(
        transitions,
        ["calling", "receiving", "manipulating", "status", "done"]
    );
    let listed: Value = reqwest::get(format!("{services}/log/traces"))
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert!(listed.to_string().contains(&uuid.to_string()));
}
