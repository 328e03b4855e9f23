use std::collections::BTreeMap;
use std::time::Duration;

use pf_core::event::{Envelope, Topic};
use pf_core::gateway::{EventStream, Selection, SubscriptionSpec};
use pf_core::lifecycle::InstanceState;
use pf_core::model::ProcessModel;
use pf_core::{Engine, EngineError};
use serde_json::Value;

/// SSE-mode subscription on every topic of one instance.
pub fn watch_all(engine: &Engine, instance: u64) -> EventStream {
    let spec = SubscriptionSpec::sse(
        Topic::ALL
            .iter()
            .map(|t| Selection::event(*t, "*"))
            .collect(),
    )
    .for_instance(instance);
    let id = engine.subscribe(spec).expect("valid subscription");
    engine.gateway().stream(&id).expect("sse subscription")
}

#[derive(Debug)]
pub struct RunOutcome {
    pub id: u64,
    pub events: Vec<Envelope>,
    /// `None` when the run did not end within the timeout.
    pub final_state: Option<String>,
}

impl RunOutcome {
    /// `act:<enactment>` per completed activity and `cond:<node>:<result>`
    /// per condition evaluation, in emission order.
    pub fn trace(&self) -> Vec<String> {
        self.events
            .iter()
            .filter_map(|e| match (e.topic, e.event.as_str()) {
                (Topic::Activity, "done") => Some(format!(
                    "act:{}",
                    e.content["enactment"].as_str().unwrap_or("?")
                )),
                (Topic::Condition, "eval") => Some(format!(
                    "cond:{}:{}",
                    e.content["node"].as_str().unwrap_or("?"),
                    e.content["result"]
                        .as_bool()
                        .map_or("error".to_string(), |b| b.to_string())
                )),
                _ => None,
            })
            .collect()
    }
}

fn ended(e: &Envelope) -> Option<String> {
    if e.topic != Topic::State || e.event != "change" {
        return None;
    }
    let s = e.content["state"].as_str()?;
    matches!(s, "finished" | "stopped" | "abandoned").then(|| s.to_string())
}

/// Creates an instance, loads `model`, starts it and collects its events
/// until it finishes, stops or the timeout passes.
pub async fn run_to_end(
    engine: &Engine,
    model: ProcessModel,
    timeout: Duration,
) -> Result<RunOutcome, EngineError> {
    let id = engine.create_instance()?.id;
    let mut stream = watch_all(engine, id);
    engine.put_model(id, model).await?;
    engine.set_state(id, InstanceState::Running).await?;
    let mut events = Vec::new();
    let mut final_state = None;
    let _ = tokio::time::timeout(timeout, async {
        while let Some(e) = stream.next().await {
            let end = ended(&e);
            events.push(e);
            if end.is_some() {
                final_state = end;
                break;
            }
        }
    })
    .await;
    Ok(RunOutcome {
        id,
        events,
        final_state,
    })
}

/// Activity event names per enactment, in order, with the activity id.
pub fn activity_sequences(events: &[Envelope]) -> BTreeMap<String, (String, Vec<String>)> {
    let mut out: BTreeMap<String, (String, Vec<String>)> = BTreeMap::new();
    for e in events.iter().filter(|e| e.topic == Topic::Activity) {
        let enactment = e
            .content
            .get("enactment")
            .and_then(Value::as_str)
            .unwrap_or("?")
            .to_string();
        let activity = e
            .content
            .get("activity")
            .and_then(Value::as_str)
            .unwrap_or("?")
            .to_string();
        out.entry(enactment)
            .or_insert_with(|| (activity, Vec::new()))
            .1
            .push(e.event.clone());
    }
    out
}

/// `calling (receiving manipulating)+ failed? status done`
pub fn matches_enactment_grammar(seq: &[String]) -> bool {
    let mut i = 0;
    let next = |i: &mut usize, name: &str| -> bool {
        if seq.get(*i).map(String::as_str) == Some(name) {
            *i += 1;
            true
        } else {
            false
        }
    };
    if !next(&mut i, "calling") {
        return false;
    }
    let mut pairs = 0;
    while seq.get(i).map(String::as_str) == Some("receiving") {
        i += 1;
        if !next(&mut i, "manipulating") {
            return false;
        }
        pairs += 1;
    }
    if pairs == 0 {
        return false;
    }
    next(&mut i, "failed");
    next(&mut i, "status") && next(&mut i, "done") && i == seq.len()
}

/// An in-memory engine serving its API on a free local port, so services
/// can reach its callback URLs.
pub async fn serve_engine(config: pf_core::config::EngineConfig) -> Engine {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0")
        .await
        .expect("bind");
    let addr = listener.local_addr().expect("addr");
    let engine = Engine::in_memory(config.with_base_url(format!("http://{addr}/flow/engine")));
    let app = pf_core::api::router(engine.clone());
    tokio::spawn(async move { axum::serve(listener, app).await.expect("serve") });
    engine
}
