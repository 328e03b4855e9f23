//! Event-log writer: turns engine events into XES traces, one file per
//! instance uuid.
//!
//! Activity events carry the standard `lifecycle:transition`; everything
//! else (tasks, state changes, data) gets `cpee:lifecycle:transition` so the
//! two lifecycles never mix.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use pf_core::event::{Envelope, Topic};
use pf_core::gateway::{Selection, SubscriptionSpec};
use quick_xml::escape::escape;
use quick_xml::events::Event;
use quick_xml::{Reader, XmlVersion};
use serde_json::{json, Value};
use uuid::Uuid;

const TRAILER: &str = "  </trace>\n</log>\n";

fn header(uuid: &Uuid) -> String {
    format!(
        r#"<?xml version="1.0" encoding="UTF-8"?>
<log xes.version="1.0" xes.features="nested-attributes" xmlns="http://www.xes-standard.org/">
  <extension name="Concept" prefix="concept" uri="http://www.xes-standard.org/concept.xesext"/>
  <extension name="Lifecycle" prefix="lifecycle" uri="http://www.xes-standard.org/lifecycle.xesext"/>
  <extension name="Time" prefix="time" uri="http://www.xes-standard.org/time.xesext"/>
  <extension name="Engine" prefix="cpee" uri="urn:pf:xes:engine"/>
  <trace>
    <string key="concept:name" value="{uuid}"/>
"#
    )
}

fn attr(out: &mut String, kind: &str, key: &str, value: &str) {
    out.push_str(&format!(
        "      <{kind} key=\"{key}\" value=\"{}\"/>\n",
        escape(value)
    ));
}

/// The `<event>` element for one envelope.
pub fn render_event(env: &Envelope) -> String {
    let text = |k: &str| {
        env.content
            .get(k)
            .and_then(Value::as_str)
            .filter(|s| !s.is_empty())
    };
    let name = text("label")
        .or_else(|| text("activity"))
        .map(str::to_string)
        .unwrap_or_else(|| env.name());
    let mut out = String::from("    <event>\n");
    attr(&mut out, "string", "concept:name", &name);
    if env.topic == Topic::Activity {
        attr(&mut out, "string", "lifecycle:transition", &env.event);
    } else {
        let transition = if env.topic == Topic::Task {
            env.event.clone()
        } else {
            env.name()
        };
        attr(&mut out, "string", "cpee:lifecycle:transition", &transition);
    }
    attr(&mut out, "date", "time:timestamp", &env.timestamp);
    attr(&mut out, "string", "cpee:topic", env.topic.as_str());
    attr(&mut out, "string", "cpee:event", &env.event);
    attr(&mut out, "int", "cpee:instance", &env.instance.to_string());
    if let Some(a) = text("activity") {
        attr(&mut out, "string", "cpee:activity", a);
    }
    if let Some(e) = text("enactment") {
        attr(&mut out, "string", "cpee:enactment", e);
    }
    attr(&mut out, "string", "cpee:payload", &env.content.to_string());
    out.push_str("    </event>\n");
    out
}

/// Attributes of every `<event>` in a trace document, keyed by attribute key.
pub fn parse_events(xml: &str) -> Result<Vec<HashMap<String, String>>, quick_xml::Error> {
    let mut reader = Reader::from_str(xml);
    let mut events = Vec::new();
    let mut current: Option<HashMap<String, String>> = None;
    loop {
        match reader.read_event()? {
            Event::Start(e) if e.name().as_ref() == "event" => current = Some(HashMap::new()),
            Event::End(e) if e.name().as_ref() == "event" => events.extend(current.take()),
            Event::Empty(e) => {
                if let Some(map) = current.as_mut() {
                    let mut key = None;
                    let mut value = None;
                    for a in e.attributes().flatten() {
                        let v = a.normalized_value(XmlVersion::Explicit1_0)?.into_owned();
                        match a.key.as_ref() {
                            "key" => key = Some(v),
                            "value" => value = Some(v),
                            _ => {}
                        }
                    }
                    if let (Some(k), Some(v)) = (key, value) {
                        map.insert(k, v);
                    }
                }
            }
            Event::Eof => break,
            _ => {}
        }
    }
    Ok(events)
}

struct Trace {
    file: File,
    events: u64,
    /// Rendered events that could not be written yet.
    pending: Vec<String>,
}

impl Trace {
    fn open(path: &Path, uuid: &Uuid) -> io::Result<Trace> {
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)?;
        let mut existing = String::new();
        file.read_to_string(&mut existing)?;
        let events = if existing.ends_with(TRAILER) {
            parse_events(&existing).map(|e| e.len() as u64).unwrap_or(0)
        } else {
            file.set_len(0)?;
            file.seek(SeekFrom::Start(0))?;
            file.write_all(header(uuid).as_bytes())?;
            file.write_all(TRAILER.as_bytes())?;
            0
        };
        Ok(Trace {
            file,
            events,
            pending: Vec::new(),
        })
    }

    fn append(&mut self, rendered: String) -> io::Result<()> {
        self.pending.push(rendered);
        let chunk: String = self.pending.concat();
        let end = self.file.seek(SeekFrom::End(-(TRAILER.len() as i64)))?;
        let written = self
            .file
            .write_all(chunk.as_bytes())
            .and_then(|_| self.file.write_all(TRAILER.as_bytes()));
        if let Err(e) = written {
            // Cut a partial write so the document stays well formed.
            let _ = self.file.set_len(end);
            let _ = self
                .file
                .seek(SeekFrom::Start(end))
                .and_then(|_| self.file.write_all(TRAILER.as_bytes()));
            return Err(e);
        }
        self.events += self.pending.len() as u64;
        self.pending.clear();
        Ok(())
    }
}

/// Writes traces below a directory. Writes are serialized, so every trace
/// file has a single writer.
pub struct XesLogger {
    dir: PathBuf,
    traces: Mutex<HashMap<Uuid, Trace>>,
}

impl XesLogger {
    pub fn new(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(XesLogger {
            dir,
            traces: Mutex::new(HashMap::new()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, uuid: &Uuid) -> PathBuf {
        self.dir.join(format!("{uuid}.xes"))
    }

    /// Subscription delivering every event to a logger listening at
    /// `endpoint`.
    pub fn subscription(endpoint: &str) -> SubscriptionSpec {
        SubscriptionSpec::push(
            endpoint,
            Topic::ALL
                .iter()
                .map(|t| Selection::event(*t, "*"))
                .collect(),
        )
    }

    /// Appends one event. On a write failure the event stays buffered and is
    /// written with the next one.
    pub fn consume(&self, env: &Envelope) -> io::Result<()> {
        let mut traces = self.traces.lock().expect("logger lock");
        let trace = match traces.entry(env.instance_uuid) {
            std::collections::hash_map::Entry::Occupied(o) => o.into_mut(),
            std::collections::hash_map::Entry::Vacant(v) => {
                let path = self.dir.join(format!("{}.xes", env.instance_uuid));
                v.insert(Trace::open(&path, &env.instance_uuid)?)
            }
        };
        let result = trace.append(render_event(env));
        if let Err(e) = &result {
            tracing::warn!(uuid = %env.instance_uuid, buffered = trace.pending.len(), error = %e, "trace write failed");
        }
        result
    }

    pub fn event_count(&self, uuid: &Uuid) -> u64 {
        self.traces
            .lock()
            .expect("logger lock")
            .get(uuid)
            .map_or(0, |t| t.events)
    }

    pub fn counts(&self) -> HashMap<Uuid, u64> {
        self.traces
            .lock()
            .expect("logger lock")
            .iter()
            .map(|(k, t)| (*k, t.events))
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.traces
            .lock()
            .expect("logger lock")
            .values()
            .map(|t| t.events)
            .sum()
    }
}

/// `POST /` takes pushed envelopes; `GET /traces` lists event counts.
pub fn router(logger: Arc<XesLogger>) -> Router {
    Router::new()
        .route("/", post(receive))
        .route("/traces", get(traces))
        .with_state(logger)
}

async fn receive(State(logger): State<Arc<XesLogger>>, Json(env): Json<Envelope>) -> StatusCode {
    let logger = logger.clone();
    match tokio::task::spawn_blocking(move || logger.consume(&env)).await {
        Ok(Ok(())) => StatusCode::NO_CONTENT,
        // Buffered; telling the gateway to retry would log it twice.
        Ok(Err(_)) => StatusCode::ACCEPTED,
        Err(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

async fn traces(State(logger): State<Arc<XesLogger>>) -> Json<Value> {
    let counts: serde_json::Map<String, Value> = logger
        .counts()
        .into_iter()
        .map(|(k, v)| (k.to_string(), json!(v)))
        .collect();
    Json(Value::Object(counts))
}
