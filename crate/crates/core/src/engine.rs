//! Instance registry, lifecycle transitions and context changes.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use tokio::sync::watch;
use uuid::Uuid;

use crate::bus::{Bus, BusMessage};
use crate::config::EngineConfig;
use crate::delta::{Change, Delta};
use crate::error::EngineError;
use crate::event::{Envelope, Topic};
use crate::executor::{compile, Unit, UnitEnd};
use crate::gateway::{
    Gateway, SubscriptionError, SubscriptionSpec, ValueTarget, Verdict, VoteResponse,
};
use crate::lifecycle::{check_transition, Cause, InstanceState};
use crate::model::{diff_models, serialize_model, ChangeSet, Position, ProcessModel};
use crate::persistence::{InstanceSnapshot, MemoryStore, PersistenceAdapter};
use crate::protocol::{CallbackMessage, CallbackRegistry, Delivery};
use crate::script::Status;

/// Mutable part of an instance.
#[derive(Debug, Clone)]
pub struct InstanceData {
    pub state: InstanceState,
    pub model: ProcessModel,
    pub dataelements: BTreeMap<String, Value>,
    pub endpoints: BTreeMap<String, String>,
    pub attributes: BTreeMap<String, String>,
    /// Where execution resumes while not running; the active activities
    /// while running.
    pub positions: Vec<Position>,
    pub status: Status,
    pub enactments: BTreeMap<String, u64>,
    pub spawned: Vec<String>,
}

pub(crate) struct InstanceCell {
    pub(crate) id: u64,
    pub(crate) uuid: Uuid,
    pub(crate) data: Mutex<InstanceData>,
    /// Serializes control commands.
    pub(crate) commands: tokio::sync::Mutex<()>,
    /// Serializes context changes so change events are totally ordered.
    pub(crate) context: tokio::sync::Mutex<()>,
    pub(crate) unit: Mutex<Option<Arc<Unit>>>,
    state_tx: watch::Sender<InstanceState>,
}

impl InstanceCell {
    fn new(id: u64, uuid: Uuid, data: InstanceData) -> Self {
        let (state_tx, _) = watch::channel(data.state);
        InstanceCell {
            id,
            uuid,
            data: Mutex::new(data),
            commands: tokio::sync::Mutex::new(()),
            context: tokio::sync::Mutex::new(()),
            unit: Mutex::new(None),
            state_tx,
        }
    }

    pub(crate) fn lock(&self) -> std::sync::MutexGuard<'_, InstanceData> {
        self.data.lock().expect("instance lock")
    }

    pub(crate) fn state(&self) -> InstanceState {
        self.lock().state
    }

    pub(crate) fn next_enactment(&self, activity: &str) -> u64 {
        let mut d = self.lock();
        let n = d.enactments.entry(activity.to_string()).or_insert(0);
        *n += 1;
        *n
    }

    fn current_unit(&self) -> Option<Arc<Unit>> {
        self.unit.lock().expect("unit lock").clone()
    }
}

/// Context categories that can be patched and voted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Dataelements,
    Endpoints,
    Attributes,
}

impl Category {
    pub fn topic(self) -> Topic {
        match self {
            Category::Dataelements => Topic::Dataelements,
            Category::Endpoints => Topic::Endpoints,
            Category::Attributes => Topic::Attributes,
        }
    }

    fn target(self) -> ValueTarget {
        match self {
            Category::Dataelements => ValueTarget::Dataelement,
            Category::Endpoints => ValueTarget::Endpoint,
            Category::Attributes => ValueTarget::Attribute,
        }
    }

    fn read(self, d: &InstanceData) -> BTreeMap<String, Value> {
        match self {
            Category::Dataelements => d.dataelements.clone(),
            Category::Endpoints => strings_to_values(&d.endpoints),
            Category::Attributes => strings_to_values(&d.attributes),
        }
    }

    fn apply(self, d: &mut InstanceData, delta: &Delta<Value>) -> Result<(), EngineError> {
        match self {
            Category::Dataelements => delta.apply_to(&mut d.dataelements),
            Category::Endpoints => values_to_strings(delta)?.apply_to(&mut d.endpoints),
            Category::Attributes => values_to_strings(delta)?.apply_to(&mut d.attributes),
        }
        Ok(())
    }
}

fn strings_to_values(m: &BTreeMap<String, String>) -> BTreeMap<String, Value> {
    m.iter()
        .map(|(k, v)| (k.clone(), Value::String(v.clone())))
        .collect()
}

pub(crate) fn string_delta_to_values(d: &Delta<String>) -> Delta<Value> {
    Delta {
        added: strings_to_values(&d.added),
        deleted: strings_to_values(&d.deleted),
        changed: d
            .changed
            .iter()
            .map(|(k, c)| {
                (
                    k.clone(),
                    Change {
                        from: Value::String(c.from.clone()),
                        to: Value::String(c.to.clone()),
                    },
                )
            })
            .collect(),
    }
}

fn values_to_strings(d: &Delta<Value>) -> Result<Delta<String>, EngineError> {
    let s = |k: &str, v: &Value| {
        v.as_str()
            .map(str::to_string)
            .ok_or_else(|| EngineError::BadRequest(format!("value of \"{k}\" must be a string")))
    };
    Ok(Delta {
        added: d
            .added
            .iter()
            .map(|(k, v)| Ok((k.clone(), s(k, v)?)))
            .collect::<Result<_, EngineError>>()?,
        deleted: d
            .deleted
            .iter()
            .map(|(k, v)| (k.clone(), v.as_str().unwrap_or_default().to_string()))
            .collect(),
        changed: d
            .changed
            .iter()
            .map(|(k, c)| {
                Ok((
                    k.clone(),
                    Change {
                        from: c.from.as_str().unwrap_or_default().to_string(),
                        to: s(k, &c.to)?,
                    },
                ))
            })
            .collect::<Result<_, EngineError>>()?,
    })
}

/// Body of a context PATCH: either an `{add, delete, change}` triple or a
/// merge patch where `null` deletes.
#[derive(Debug, Clone, PartialEq)]
pub enum ContextPatch {
    Triple {
        add: BTreeMap<String, Value>,
        delete: Vec<String>,
        change: BTreeMap<String, Value>,
    },
    Merge(BTreeMap<String, Value>),
}

const TRIPLE_KEYS: [&str; 6] = ["add", "delete", "change", "added", "deleted", "changed"];

impl ContextPatch {
    pub fn from_json(v: Value) -> Result<Self, EngineError> {
        let Value::Object(map) = v else {
            return Err(EngineError::BadRequest(
                "patch body must be a JSON object".into(),
            ));
        };
        let is_triple = !map.is_empty()
            && map
                .iter()
                .all(|(k, v)| TRIPLE_KEYS.contains(&k.as_str()) && (v.is_object() || v.is_array()));
        if !is_triple {
            return Ok(ContextPatch::Merge(map.into_iter().collect()));
        }
        let mut add = BTreeMap::new();
        let mut delete = Vec::new();
        let mut change = BTreeMap::new();
        for (k, v) in map {
            match (k.as_str(), v) {
                ("add" | "added", Value::Object(m)) => add.extend(m),
                ("delete" | "deleted", Value::Object(m)) => {
                    delete.extend(m.into_iter().map(|(k, _)| k))
                }
                ("delete" | "deleted", Value::Array(a)) => {
                    for key in a {
                        match key {
                            Value::String(s) => delete.push(s),
                            other => {
                                return Err(EngineError::BadRequest(format!(
                                    "cannot delete key {other}"
                                )))
                            }
                        }
                    }
                }
                ("change" | "changed", Value::Object(m)) => change.extend(m),
                (k, _) => {
                    return Err(EngineError::BadRequest(format!(
                        "\"{k}\" has the wrong shape"
                    )))
                }
            }
        }
        Ok(ContextPatch::Triple {
            add,
            delete,
            change,
        })
    }

    /// The delta this patch means against `current`.
    pub fn resolve(&self, current: &BTreeMap<String, Value>) -> Result<Delta<Value>, EngineError> {
        let mut target = current.clone();
        match self {
            ContextPatch::Merge(m) => {
                for (k, v) in m {
                    if v.is_null() {
                        target.remove(k);
                    } else {
                        target.insert(k.clone(), v.clone());
                    }
                }
            }
            ContextPatch::Triple {
                add,
                delete,
                change,
            } => {
                for k in delete {
                    target.remove(k);
                }
                for (k, v) in change {
                    let Some(old) = current.get(k) else {
                        return Err(EngineError::Conflict(format!("\"{k}\" does not exist")));
                    };
                    // `{from, to}` makes the change conditional on the current value.
                    let new = match v.as_object() {
                        Some(o)
                            if o.len() == 2 && o.contains_key("from") && o.contains_key("to") =>
                        {
                            if &o["from"] != old {
                                return Err(EngineError::Conflict(format!(
                                    "\"{k}\" changed concurrently"
                                )));
                            }
                            o["to"].clone()
                        }
                        _ => v.clone(),
                    };
                    target.insert(k.clone(), new);
                }
                for (k, v) in add {
                    if current.contains_key(k) && !delete.contains(k) {
                        return Err(EngineError::Conflict(format!("\"{k}\" already exists")));
                    }
                    target.insert(k.clone(), v.clone());
                }
            }
        }
        Ok(Delta::between(current, &target))
    }
}

/// What a vote on a context change decided.
pub(crate) enum ChangeDecision {
    Apply(Delta<Value>),
    Reject(String),
    Stop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceOverview {
    pub id: u64,
    pub uuid: Uuid,
    pub url: String,
    pub state: InstanceState,
    pub positions: Vec<Position>,
    pub dataelements: BTreeMap<String, Value>,
    pub endpoints: BTreeMap<String, String>,
    pub attributes: BTreeMap<String, String>,
    pub status: Status,
    /// Sub-process instances spawned by this instance's activities.
    pub spawned: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceSummary {
    pub id: u64,
    pub uuid: Uuid,
    pub state: InstanceState,
    pub url: String,
}

pub(crate) struct EngineInner {
    pub(crate) config: EngineConfig,
    pub(crate) bus: Bus,
    pub(crate) gateway: Gateway,
    pub(crate) callbacks: CallbackRegistry,
    pub(crate) http: reqwest::Client,
    persistence: Arc<dyn PersistenceAdapter>,
    instances: RwLock<BTreeMap<u64, Arc<InstanceCell>>>,
    next_id: Mutex<u64>,
}

/// Handle to a running engine. Cheap to clone.
#[derive(Clone)]
pub struct Engine {
    pub(crate) inner: Arc<EngineInner>,
}

impl Engine {
    /// Starts an engine, restoring the instances the adapter holds. Needs a
    /// tokio runtime.
    pub fn new(
        config: EngineConfig,
        persistence: Arc<dyn PersistenceAdapter>,
    ) -> Result<Self, EngineError> {
        let bus = Bus::new();
        let http = reqwest::Client::builder().build().expect("http client");
        let gateway = Gateway::start(bus.clone(), config.clone(), http.clone());
        let engine = Engine {
            inner: Arc::new(EngineInner {
                config,
                bus,
                gateway,
                callbacks: CallbackRegistry::new(),
                http,
                persistence,
                instances: RwLock::new(BTreeMap::new()),
                next_id: Mutex::new(1),
            }),
        };
        engine.restore()?;
        Ok(engine)
    }

    pub fn in_memory(config: EngineConfig) -> Self {
        Engine::new(config, Arc::new(MemoryStore::new())).expect("memory store cannot fail")
    }

    fn restore(&self) -> Result<(), EngineError> {
        let p = &self.inner.persistence;
        let snapshots = p.load_all()?;
        let mut next = p.load_next_id()?.unwrap_or(1);
        let mut instances = self.inner.instances.write().expect("registry lock");
        for snap in snapshots {
            next = next.max(snap.id + 1);
            let mut state = snap.state;
            if matches!(state, InstanceState::Running | InstanceState::Stopping) {
                state = InstanceState::Stopped;
            }
            if state == InstanceState::Purged {
                continue;
            }
            for mut record in snap.callbacks {
                record.suspended = state != InstanceState::Running;
                self.inner.callbacks.restore(record);
            }
            let data = InstanceData {
                state,
                model: snap.model,
                dataelements: snap.dataelements,
                endpoints: snap.endpoints,
                attributes: snap.attributes,
                positions: snap.positions,
                status: snap.status,
                enactments: snap.enactments,
                spawned: snap.spawned,
            };
            instances.insert(
                snap.id,
                Arc::new(InstanceCell::new(snap.id, snap.uuid, data)),
            );
        }
        *self.inner.next_id.lock().expect("id lock") = next;
        Ok(())
    }

    pub fn config(&self) -> &EngineConfig {
        &self.inner.config
    }

    pub fn bus(&self) -> &Bus {
        &self.inner.bus
    }

    pub fn gateway(&self) -> &Gateway {
        &self.inner.gateway
    }

    pub fn callbacks(&self) -> &CallbackRegistry {
        &self.inner.callbacks
    }

    pub(crate) fn cell(&self, id: u64) -> Result<Arc<InstanceCell>, EngineError> {
        self.inner
            .instances
            .read()
            .expect("registry lock")
            .get(&id)
            .cloned()
            .ok_or(EngineError::NotFound(id))
    }

    pub(crate) fn emit(&self, cell: &InstanceCell, topic: Topic, event: &str, content: Value) {
        let _ = self.inner.bus.publish(BusMessage::event(Envelope::new(
            topic, event, cell.id, cell.uuid, content,
        )));
    }

    /// Runs a vote and returns its verdict; without voters this is `proceed`.
    pub(crate) async fn vote(
        &self,
        cell: &InstanceCell,
        topic: Topic,
        event: &str,
        content: Value,
    ) -> Verdict {
        let env = Envelope::new(topic, event, cell.id, cell.uuid, content);
        if !self.inner.gateway.has_voters(&env) {
            return Verdict::proceed();
        }
        let cfg = &self.inner.config;
        let ceiling = cfg.vote_timeout + cfg.vote_callback_timeout + Duration::from_secs(1);
        match self.inner.bus.request(env, Uuid::new_v4().to_string()) {
            Ok(Some(rx)) => match tokio::time::timeout(ceiling, rx).await {
                Ok(Ok(v)) => serde_json::from_value(v).unwrap_or_else(|_| Verdict::proceed()),
                _ => Verdict::proceed(),
            },
            _ => Verdict::proceed(),
        }
    }

    fn snapshot(&self, cell: &InstanceCell) -> InstanceSnapshot {
        let d = cell.lock();
        InstanceSnapshot {
            id: cell.id,
            uuid: cell.uuid,
            state: d.state,
            model: d.model.clone(),
            dataelements: d.dataelements.clone(),
            endpoints: d.endpoints.clone(),
            attributes: d.attributes.clone(),
            positions: d.positions.clone(),
            status: d.status.clone(),
            enactments: d.enactments.clone(),
            spawned: d.spawned.clone(),
            callbacks: self.inner.callbacks.records_for(cell.id),
        }
    }

    pub(crate) fn persist(&self, cell: &InstanceCell) {
        if let Err(e) = self.inner.persistence.store(&self.snapshot(cell)) {
            tracing::error!(instance = cell.id, error = %e, "snapshot failed");
        }
    }

    pub fn url(&self, id: u64) -> String {
        self.inner.config.instance_url(id)
    }

    pub fn create_instance(&self) -> Result<InstanceSummary, EngineError> {
        let id = {
            let mut next = self.inner.next_id.lock().expect("id lock");
            self.inner.persistence.store_next_id(*next + 1)?;
            let id = *next;
            *next += 1;
            id
        };
        let data = InstanceData {
            state: InstanceState::Ready,
            model: ProcessModel::empty(),
            dataelements: BTreeMap::new(),
            endpoints: BTreeMap::new(),
            attributes: BTreeMap::new(),
            positions: Vec::new(),
            status: Status::default(),
            enactments: BTreeMap::new(),
            spawned: Vec::new(),
        };
        let cell = Arc::new(InstanceCell::new(id, Uuid::new_v4(), data));
        self.inner.persistence.store(&self.snapshot(&cell))?;
        self.inner
            .instances
            .write()
            .expect("registry lock")
            .insert(id, cell.clone());
        self.emit(
            &cell,
            Topic::State,
            "change",
            json!({"state": "ready", "from": null}),
        );
        Ok(InstanceSummary {
            id,
            uuid: cell.uuid,
            state: InstanceState::Ready,
            url: self.url(id),
        })
    }

    pub fn list(&self) -> Vec<InstanceSummary> {
        self.inner
            .instances
            .read()
            .expect("registry lock")
            .values()
            .map(|c| InstanceSummary {
                id: c.id,
                uuid: c.uuid,
                state: c.state(),
                url: self.url(c.id),
            })
            .collect()
    }

    pub fn overview(&self, id: u64) -> Result<InstanceOverview, EngineError> {
        let cell = self.cell(id)?;
        let d = cell.lock();
        Ok(InstanceOverview {
            id,
            uuid: cell.uuid,
            url: self.url(id),
            state: d.state,
            positions: d.positions.clone(),
            dataelements: d.dataelements.clone(),
            endpoints: d.endpoints.clone(),
            attributes: d.attributes.clone(),
            status: d.status.clone(),
            spawned: d.spawned.clone(),
        })
    }

    pub fn state(&self, id: u64) -> Result<InstanceState, EngineError> {
        Ok(self.cell(id)?.state())
    }

    pub fn model(&self, id: u64) -> Result<ProcessModel, EngineError> {
        Ok(self.cell(id)?.lock().model.clone())
    }

    pub fn context(
        &self,
        id: u64,
        category: Category,
    ) -> Result<BTreeMap<String, Value>, EngineError> {
        Ok(category.read(&self.cell(id)?.lock()))
    }

    pub fn positions(&self, id: u64) -> Result<Vec<Position>, EngineError> {
        Ok(self.cell(id)?.lock().positions.clone())
    }

    /// Follows the state of an instance.
    pub fn watch_state(&self, id: u64) -> Result<watch::Receiver<InstanceState>, EngineError> {
        Ok(self.cell(id)?.state_tx.subscribe())
    }

    /// Waits until the instance reaches `target`; purged instances count as
    /// reaching `purged`.
    pub async fn wait_for_state(
        &self,
        id: u64,
        target: InstanceState,
        timeout: Duration,
    ) -> Result<bool, EngineError> {
        let mut rx = self.watch_state(id)?;
        let fut = async {
            loop {
                if *rx.borrow_and_update() == target {
                    return true;
                }
                if rx.changed().await.is_err() {
                    return target == InstanceState::Purged;
                }
            }
        };
        Ok(tokio::time::timeout(timeout, fut).await.unwrap_or(false))
    }

    /// Replaces the instance model.
    pub async fn put_model(&self, id: u64, model: ProcessModel) -> Result<ChangeSet, EngineError> {
        let cell = self.cell(id)?;
        let _cmd = cell.commands.lock().await;
        let _ctx = cell.context.lock().await;
        let (state, current) = {
            let d = cell.lock();
            (d.state, d.model.clone())
        };
        if !state.is_editable() {
            return Err(EngineError::IllegalState {
                state,
                operation: "changing the model",
            });
        }
        let changes = diff_models(&current, &model);
        let verdict = self
            .vote(
                &cell,
                Topic::Description,
                "change",
                json!({"changes": changes}),
            )
            .await;
        if verdict.blocked || verdict.skips() || verdict.stops() {
            return Err(EngineError::VoteRejected("model change prohibited".into()));
        }
        let digest: String = Sha256::digest(serialize_model(&model).as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        let (before, after) = {
            let mut d = cell.lock();
            let before = [
                Category::Dataelements,
                Category::Endpoints,
                Category::Attributes,
            ]
            .map(|c| c.read(&d));
            if current.is_empty() {
                d.endpoints.extend(model.endpoints.clone());
                d.dataelements.extend(model.dataelements.clone());
                d.attributes.extend(model.attributes.clone());
                d.attributes.insert("modelled_from".into(), digest);
            } else {
                for (k, v) in &model.endpoints {
                    d.endpoints.entry(k.clone()).or_insert_with(|| v.clone());
                }
                for (k, v) in &model.dataelements {
                    d.dataelements.entry(k.clone()).or_insert_with(|| v.clone());
                }
                for (k, v) in &model.attributes {
                    d.attributes.entry(k.clone()).or_insert_with(|| v.clone());
                }
                d.attributes.insert("singleton".into(), "true".into());
            }
            d.positions.retain(|p| model.validate_position(p).is_ok());
            d.model = model;
            let after = [
                Category::Dataelements,
                Category::Endpoints,
                Category::Attributes,
            ]
            .map(|c| c.read(&d));
            (before, after)
        };
        self.emit(
            &cell,
            Topic::Description,
            "change",
            json!({"changes": changes}),
        );
        for (i, cat) in [
            Category::Dataelements,
            Category::Endpoints,
            Category::Attributes,
        ]
        .into_iter()
        .enumerate()
        {
            let delta = Delta::between(&before[i], &after[i]);
            if !delta.is_empty() {
                self.emit(
                    &cell,
                    cat.topic(),
                    "change",
                    serde_json::to_value(&delta).expect("serializes"),
                );
            }
        }
        self.persist(&cell);
        Ok(changes)
    }

    /// Votes on a context change and applies value corrections.
    pub(crate) async fn vote_change(
        &self,
        cell: &InstanceCell,
        category: Category,
        mut delta: Delta<Value>,
    ) -> ChangeDecision {
        let content = serde_json::to_value(&delta).expect("serializes");
        let verdict = self.vote(cell, category.topic(), "change", content).await;
        if verdict.blocked {
            return ChangeDecision::Reject("votes could not be combined".into());
        }
        if verdict.stops() {
            return ChangeDecision::Stop;
        }
        if verdict.skips() {
            return ChangeDecision::Reject("change skipped by vote".into());
        }
        let current = category.read(&cell.lock());
        for v in verdict
            .values()
            .iter()
            .filter(|v| v.target == category.target())
        {
            let Some(name) = &v.name else { continue };
            delta.deleted.remove(name);
            delta.added.remove(name);
            delta.changed.remove(name);
            match current.get(name) {
                Some(old) if old == &v.value => {}
                Some(old) => {
                    delta.changed.insert(
                        name.clone(),
                        Change {
                            from: old.clone(),
                            to: v.value.clone(),
                        },
                    );
                }
                None => {
                    delta.added.insert(name.clone(), v.value.clone());
                }
            }
        }
        ChangeDecision::Apply(delta)
    }

    /// Applies an already voted change and emits its event.
    pub(crate) fn commit_change(
        &self,
        cell: &InstanceCell,
        category: Category,
        delta: &Delta<Value>,
    ) -> Result<(), EngineError> {
        if delta.is_empty() {
            return Ok(());
        }
        category.apply(&mut cell.lock(), delta)?;
        self.emit(
            cell,
            category.topic(),
            "change",
            serde_json::to_value(delta).expect("serializes"),
        );
        Ok(())
    }

    /// Changes dataelements, endpoints or attributes from outside.
    pub async fn patch_context(
        &self,
        id: u64,
        category: Category,
        patch: ContextPatch,
    ) -> Result<Delta<Value>, EngineError> {
        let cell = self.cell(id)?;
        let _cmd = cell.commands.lock().await;
        let _ctx = cell.context.lock().await;
        let state = cell.state();
        if !state.is_editable() {
            return Err(EngineError::IllegalState {
                state,
                operation: "changing the context",
            });
        }
        let delta = patch.resolve(&category.read(&cell.lock()))?;
        if category != Category::Dataelements {
            values_to_strings(&delta)?;
        }
        if delta.is_empty() {
            return Ok(delta);
        }
        match self.vote_change(&cell, category, delta).await {
            ChangeDecision::Apply(d) => {
                self.commit_change(&cell, category, &d)?;
                self.persist(&cell);
                Ok(d)
            }
            ChangeDecision::Reject(reason) => Err(EngineError::VoteRejected(reason)),
            ChangeDecision::Stop => Err(EngineError::VoteRejected(
                "a subscriber demanded a stop".into(),
            )),
        }
    }

    /// Replaces the positions execution resumes from.
    pub async fn set_positions(
        &self,
        id: u64,
        positions: Vec<Position>,
    ) -> Result<Vec<Position>, EngineError> {
        let cell = self.cell(id)?;
        let _cmd = cell.commands.lock().await;
        let mut d = cell.lock();
        if !d.state.is_editable() {
            return Err(EngineError::IllegalState {
                state: d.state,
                operation: "changing positions",
            });
        }
        for p in &positions {
            d.model.validate_position(p)?;
        }
        d.positions = positions.clone();
        drop(d);
        self.emit(
            &cell,
            Topic::Position,
            "change",
            position_content(&positions, None),
        );
        self.persist(&cell);
        Ok(positions)
    }

    /// State change requested through the control interface.
    pub async fn set_state(
        &self,
        id: u64,
        target: InstanceState,
    ) -> Result<InstanceState, EngineError> {
        let cell = self.cell(id)?;
        let _cmd = cell.commands.lock().await;
        let current = cell.state();
        check_transition(current, target, Cause::Command)?;
        if matches!(target, InstanceState::Running | InstanceState::Stopping) {
            let verdict = self
                .vote(
                    &cell,
                    Topic::State,
                    "change",
                    json!({"state": target, "from": current}),
                )
                .await;
            let against = match target {
                InstanceState::Running => verdict.stops(),
                _ => verdict.starts(),
            };
            if verdict.blocked || against {
                return Err(EngineError::VoteRejected(format!("{target} prohibited")));
            }
        }
        self.transition_locked(&cell, target, Cause::Command)
    }

    /// Raw lifecycle step for any cause. Start/stop votes only run through
    /// [`Engine::set_state`].
    pub async fn transition(
        &self,
        id: u64,
        target: InstanceState,
        cause: Cause,
    ) -> Result<InstanceState, EngineError> {
        let cell = self.cell(id)?;
        let _cmd = cell.commands.lock().await;
        self.transition_locked(&cell, target, cause)
    }

    pub async fn purge(&self, id: u64) -> Result<(), EngineError> {
        self.set_state(id, InstanceState::Purged).await.map(|_| ())
    }

    /// Performs a checked transition; the caller holds the command lock.
    fn transition_locked(
        &self,
        cell: &Arc<InstanceCell>,
        target: InstanceState,
        cause: Cause,
    ) -> Result<InstanceState, EngineError> {
        let from = cell.state();
        check_transition(from, target, cause)?;
        let plan = if target == InstanceState::Running {
            let d = cell.lock();
            Some(
                compile(&d.model, &d.endpoints)
                    .map_err(|e| EngineError::BadRequest(format!("model not executable: {e}")))?,
            )
        } else {
            None
        };
        let positions = {
            let mut d = cell.lock();
            d.state = target;
            match target {
                InstanceState::Running => std::mem::take(&mut d.positions),
                InstanceState::Finished | InstanceState::Purged => {
                    d.positions.clear();
                    Vec::new()
                }
                _ => Vec::new(),
            }
        };
        cell.state_tx.send_replace(target);
        match target {
            InstanceState::Running => {
                self.inner.callbacks.resume(cell.id);
                self.emit(
                    cell,
                    Topic::State,
                    "change",
                    json!({"state": target, "from": from}),
                );
                let unit = Unit::start(
                    self.clone(),
                    cell.clone(),
                    Arc::new(plan.expect("compiled above")),
                    positions,
                );
                *cell.unit.lock().expect("unit lock") = Some(unit);
                self.persist(cell);
            }
            InstanceState::Stopping => {
                self.emit(
                    cell,
                    Topic::State,
                    "change",
                    json!({"state": target, "from": from}),
                );
                self.persist(cell);
                match cell.current_unit() {
                    Some(unit) => {
                        unit.stop();
                        let engine = self.clone();
                        let cell = cell.clone();
                        let drain = self.inner.config.drain_timeout;
                        tokio::spawn(async move {
                            tokio::time::sleep(drain).await;
                            engine.drain_expired(&cell, &unit).await;
                        });
                    }
                    None => {
                        return self.transition_locked(
                            cell,
                            InstanceState::Stopped,
                            Cause::Completion,
                        );
                    }
                }
            }
            InstanceState::Stopped => {
                if let Some(unit) = cell.unit.lock().expect("unit lock").take() {
                    let positions = unit.force_stop();
                    let mut d = cell.lock();
                    if d.positions.is_empty() {
                        d.positions = positions;
                    }
                }
                self.inner.callbacks.suspend(cell.id);
                self.emit(
                    cell,
                    Topic::State,
                    "change",
                    json!({"state": target, "from": from}),
                );
                self.persist(cell);
            }
            InstanceState::Finished | InstanceState::Abandoned => {
                if let Some(unit) = cell.unit.lock().expect("unit lock").take() {
                    unit.abort();
                }
                self.inner.callbacks.remove_instance(cell.id);
                self.emit(
                    cell,
                    Topic::State,
                    "change",
                    json!({"state": target, "from": from}),
                );
                self.persist(cell);
            }
            InstanceState::Purged => {
                if let Some(unit) = cell.unit.lock().expect("unit lock").take() {
                    unit.abort();
                }
                self.inner.callbacks.remove_instance(cell.id);
                self.inner
                    .instances
                    .write()
                    .expect("registry lock")
                    .remove(&cell.id);
                if let Err(e) = self.inner.persistence.remove(cell.id) {
                    tracing::error!(instance = cell.id, error = %e, "removing snapshot failed");
                }
                self.emit(
                    cell,
                    Topic::State,
                    "change",
                    json!({"state": target, "from": from}),
                );
            }
            InstanceState::Ready => unreachable!("no edge leads back to ready"),
        }
        Ok(target)
    }

    /// A failure inside the execution unit stops the instance without a vote.
    pub(crate) async fn stop_on_error(&self, cell: &Arc<InstanceCell>) {
        let _cmd = cell.commands.lock().await;
        if cell.state() == InstanceState::Running {
            let _ = self.transition_locked(cell, InstanceState::Stopping, Cause::Error);
        }
    }

    /// Called by a unit once all its threads ended.
    pub(crate) async fn unit_ended(
        &self,
        cell: &Arc<InstanceCell>,
        unit: &Arc<Unit>,
        end: UnitEnd,
    ) {
        let _cmd = cell.commands.lock().await;
        let is_current = cell.current_unit().is_some_and(|u| Arc::ptr_eq(&u, unit));
        if !is_current {
            return;
        }
        cell.unit.lock().expect("unit lock").take();
        let state = cell.state();
        let stopped_at = match (end, state) {
            (UnitEnd::Finished, InstanceState::Running) => {
                let _ = self.transition_locked(cell, InstanceState::Finished, Cause::Completion);
                return;
            }
            (UnitEnd::Finished, _) => vec![Position::after(cell.lock().model.root.id.clone())],
            (UnitEnd::Stopped(positions), _) => positions,
        };
        if state == InstanceState::Running {
            // Halted without a stop request; treat like an error stop.
            let _ = self.transition_locked(cell, InstanceState::Stopping, Cause::Error);
        }
        cell.lock().positions = stopped_at;
        let _ = self.transition_locked(cell, InstanceState::Stopped, Cause::Completion);
    }

    async fn drain_expired(&self, cell: &Arc<InstanceCell>, unit: &Arc<Unit>) {
        let _cmd = cell.commands.lock().await;
        let is_current = cell.current_unit().is_some_and(|u| Arc::ptr_eq(&u, unit));
        if !is_current || cell.state() != InstanceState::Stopping {
            return;
        }
        cell.unit.lock().expect("unit lock").take();
        let positions = unit.force_stop();
        for p in &positions {
            self.emit(
                cell,
                Topic::Activity,
                "failed",
                json!({"activity": p.node_id, "error": "drain timeout exceeded"}),
            );
        }
        cell.lock().positions = positions;
        let _ = self.transition_locked(cell, InstanceState::Stopped, Cause::Error);
    }

    /// Handles a PUT to `<base>/<id>/callbacks/<callback_id>`: vote answers
    /// first, then operation callbacks.
    pub fn deliver_callback(&self, id: u64, callback_id: &str, msg: CallbackMessage) -> Delivery {
        if self.inner.gateway.is_vote_ticket(callback_id) {
            let response =
                VoteResponse::parse_body(&msg.payload.bytes).unwrap_or(VoteResponse::Ack);
            return if self.inner.gateway.answer_vote(callback_id, response) {
                Delivery::Accepted
            } else {
                Delivery::Unknown
            };
        }
        if self.cell(id).is_err() {
            return Delivery::Unknown;
        }
        self.inner.callbacks.deliver(id, callback_id, msg)
    }

    pub fn subscribe(&self, spec: SubscriptionSpec) -> Result<String, SubscriptionError> {
        self.inner.gateway.subscribe(spec)
    }

    /// Stops every execution unit and detaches from the bus.
    pub fn shutdown(&self) {
        let cells: Vec<Arc<InstanceCell>> = self
            .inner
            .instances
            .read()
            .expect("registry lock")
            .values()
            .cloned()
            .collect();
        for cell in cells {
            if let Some(unit) = cell.unit.lock().expect("unit lock").take() {
                unit.abort();
            }
        }
        self.inner.gateway.shutdown();
    }
}

pub(crate) fn position_content(
    positions: &[Position],
    transition: Option<(Option<&str>, &str)>,
) -> Value {
    let ids = |mode| -> Vec<Value> {
        positions
            .iter()
            .filter(|p| p.mode == mode)
            .map(|p| Value::String(p.node_id.clone()))
            .collect()
    };
    let mut m = Map::new();
    m.insert(
        "at".into(),
        Value::Array(ids(crate::model::PositionMode::At)),
    );
    m.insert(
        "after".into(),
        Value::Array(ids(crate::model::PositionMode::After)),
    );
    if let Some((from, to)) = transition {
        m.insert("transition".into(), json!({"from": from, "to": to}));
    }
    Value::Object(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_forms() {
        let current = BTreeMap::from([("x".to_string(), json!(1)), ("y".to_string(), json!(2))]);
        let merge = ContextPatch::from_json(json!({"x": 5, "y": null, "z": "new"})).unwrap();
        let d = merge.resolve(&current).unwrap();
        assert_eq!(d.changed["x"].to, json!(5));
        assert!(d.deleted.contains_key("y"));
        assert_eq!(d.added["z"], json!("new"));

        let triple = ContextPatch::from_json(
            json!({"add": {"z": 1}, "delete": ["y"], "change": {"x": {"from": 1, "to": 3}}}),
        )
        .unwrap();
        let d = triple.resolve(&current).unwrap();
        assert_eq!(
            (d.added.len(), d.deleted.len(), d.changed["x"].to.clone()),
            (1, 1, json!(3))
        );

        let stale =
            ContextPatch::from_json(json!({"change": {"x": {"from": 9, "to": 3}}})).unwrap();
        assert!(matches!(
            stale.resolve(&current),
            Err(EngineError::Conflict(_))
        ));
        let dup = ContextPatch::from_json(json!({"add": {"x": 1}})).unwrap();
        assert!(matches!(
            dup.resolve(&current),
            Err(EngineError::Conflict(_))
        ));
        assert!(ContextPatch::from_json(json!([1])).is_err());
    }

    #[test]
    fn endpoint_values_must_be_strings() {
        let d = Delta {
            added: BTreeMap::from([("e".to_string(), json!(1))]),
            ..Default::default()
        };
        assert!(values_to_strings(&d).is_err());
    }
}
