//! Data stream interface: topic subscriptions, push and SSE delivery, and
//! vote collection.

mod queue;
pub mod vote;

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use futures::future::join_all;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;
use uuid::Uuid;

use crate::bus::{Bus, BusFilter, BusKind, BusMessage};
use crate::config::EngineConfig;
use crate::event::{is_votable, Envelope, Topic, VoteTicket};
use queue::{EventQueue, Pushed};
pub use vote::{combine_votes, Action, ValuePayload, ValueTarget, Verdict, VoteResponse};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub topic: Topic,
    /// Event name or `*`.
    #[serde(default = "any_event")]
    pub event: String,
    #[serde(default)]
    pub vote: bool,
}

fn any_event() -> String {
    "*".to_string()
}

impl Selection {
    pub fn event(topic: Topic, event: impl Into<String>) -> Self {
        Selection {
            topic,
            event: event.into(),
            vote: false,
        }
    }

    pub fn vote(topic: Topic, event: impl Into<String>) -> Self {
        Selection {
            topic,
            event: event.into(),
            vote: true,
        }
    }

    fn matches(&self, env: &Envelope, vote: bool) -> bool {
        self.vote == vote
            && self.topic == env.topic
            && (self.event == "*" || self.event == env.event)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubscriptionSpec {
    /// Push endpoint; without one, events are delivered over SSE.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// Restricts the subscription to one instance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance: Option<u64>,
    pub selections: Vec<Selection>,
}

impl SubscriptionSpec {
    pub fn sse(selections: Vec<Selection>) -> Self {
        SubscriptionSpec {
            endpoint: None,
            instance: None,
            selections,
        }
    }

    pub fn push(endpoint: impl Into<String>, selections: Vec<Selection>) -> Self {
        SubscriptionSpec {
            endpoint: Some(endpoint.into()),
            instance: None,
            selections,
        }
    }

    pub fn for_instance(mut self, instance: u64) -> Self {
        self.instance = Some(instance);
        self
    }

    /// Parses a subscription body, reporting unknown topics by name.
    pub fn from_json(value: serde_json::Value) -> Result<Self, SubscriptionError> {
        if let Some(sels) = value.get("selections").and_then(|s| s.as_array()) {
            for s in sels {
                if let Some(t) = s.get("topic").and_then(|t| t.as_str()) {
                    if Topic::parse(t).is_none() {
                        return Err(SubscriptionError::UnknownTopic(t.to_string()));
                    }
                }
            }
        }
        let spec: SubscriptionSpec = serde_json::from_value(value)
            .map_err(|e| SubscriptionError::Malformed(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SubscriptionError> {
        if self.selections.is_empty() {
            return Err(SubscriptionError::Malformed(
                "at least one selection is required".into(),
            ));
        }
        for s in &self.selections {
            if s.vote && !is_votable(s.topic, &s.event) {
                return Err(SubscriptionError::NotVotable(format!(
                    "{}/{}",
                    s.topic, s.event
                )));
            }
        }
        Ok(())
    }

    fn wants(&self, env: &Envelope, vote: bool) -> bool {
        self.instance.is_none_or(|i| i == env.instance)
            && self.selections.iter().any(|s| s.matches(env, vote))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SubscriptionError {
    #[error("unknown topic \"{0}\"")]
    UnknownTopic(String),
    #[error("{0} cannot be voted on")]
    NotVotable(String),
    #[error("malformed subscription: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Serialize)]
pub struct SubscriptionInfo {
    pub id: String,
    #[serde(flatten)]
    pub spec: SubscriptionSpec,
    pub queued: usize,
}

struct SubState {
    id: String,
    spec: SubscriptionSpec,
    queue: EventQueue,
    /// Set once a stream attached; later attaches start from live events.
    attached: std::sync::atomic::AtomicBool,
    worker: Mutex<Option<JoinHandle<()>>>,
}

struct Inner {
    config: EngineConfig,
    bus: Bus,
    http: reqwest::Client,
    subs: RwLock<BTreeMap<String, Arc<SubState>>>,
    pending_votes: Mutex<HashMap<String, oneshot::Sender<VoteResponse>>>,
    dispatcher: Mutex<Option<JoinHandle<()>>>,
}

/// Receives the envelopes of one SSE-mode subscription.
pub struct EventStream {
    sub: Arc<SubState>,
}

impl EventStream {
    pub async fn next(&mut self) -> Option<Envelope> {
        self.sub.queue.pop().await
    }

    pub fn into_stream(self) -> impl futures::Stream<Item = Envelope> + Send + 'static {
        futures::stream::unfold(self, |mut s| async move { s.next().await.map(|e| (e, s)) })
    }
}

#[derive(Clone)]
pub struct Gateway {
    inner: Arc<Inner>,
}

impl Gateway {
    /// Creates the gateway and attaches it to the bus. Must be called inside
    /// a tokio runtime.
    pub fn start(bus: Bus, config: EngineConfig, http: reqwest::Client) -> Self {
        let gw = Gateway {
            inner: Arc::new(Inner {
                config,
                bus: bus.clone(),
                http,
                subs: RwLock::new(BTreeMap::new()),
                pending_votes: Mutex::new(HashMap::new()),
                dispatcher: Mutex::new(None),
            }),
        };
        let mut rx = bus.subscribe(BusFilter::kinds(&[BusKind::Event, BusKind::Vote]));
        let weak = Arc::downgrade(&gw.inner);
        let handle = tokio::spawn(async move {
            while let Some(msg) = rx.recv().await {
                let Some(inner) = weak.upgrade() else { break };
                let gw = Gateway { inner };
                match msg.kind {
                    BusKind::Event => gw.dispatch(&msg.envelope),
                    BusKind::Vote => {
                        let corr = msg.correlation_id.clone().unwrap_or_default();
                        tokio::spawn(async move {
                            let responses = gw.collect_votes(msg.envelope.clone()).await;
                            let verdict = combine_votes(&responses);
                            let mut answer = msg.envelope;
                            answer.content =
                                serde_json::to_value(&verdict).expect("verdict serializes");
                            let _ = gw.inner.bus.publish(BusMessage {
                                kind: BusKind::VoteResponse,
                                envelope: answer,
                                correlation_id: Some(corr),
                            });
                        });
                    }
                    _ => {}
                }
            }
        });
        *gw.inner.dispatcher.lock().expect("gateway lock") = Some(handle);
        gw
    }

    pub fn subscribe(&self, spec: SubscriptionSpec) -> Result<String, SubscriptionError> {
        spec.validate()?;
        let id = Uuid::new_v4().simple().to_string();
        let state = Arc::new(SubState {
            id: id.clone(),
            queue: EventQueue::new(self.inner.config.queue_capacity),
            spec,
            attached: std::sync::atomic::AtomicBool::new(false),
            worker: Mutex::new(None),
        });
        if let Some(endpoint) = state.spec.endpoint.clone() {
            let gw = self.clone();
            let sub = state.clone();
            let handle = tokio::spawn(async move {
                while let Some(env) = sub.queue.pop().await {
                    gw.push(&sub, &endpoint, &env).await;
                }
            });
            *state.worker.lock().expect("gateway lock") = Some(handle);
        }
        self.inner
            .subs
            .write()
            .expect("gateway lock")
            .insert(id.clone(), state);
        Ok(id)
    }

    pub fn unsubscribe(&self, id: &str) -> bool {
        let removed = self.inner.subs.write().expect("gateway lock").remove(id);
        match removed {
            Some(sub) => {
                sub.queue.close();
                if let Some(h) = sub.worker.lock().expect("gateway lock").take() {
                    h.abort();
                }
                true
            }
            None => false,
        }
    }

    pub fn subscriptions(&self) -> Vec<SubscriptionInfo> {
        self.inner
            .subs
            .read()
            .expect("gateway lock")
            .values()
            .map(|s| SubscriptionInfo {
                id: s.id.clone(),
                spec: s.spec.clone(),
                queued: s.queue.len(),
            })
            .collect()
    }

    pub fn subscription(&self, id: &str) -> Option<SubscriptionInfo> {
        self.subscriptions().into_iter().find(|s| s.id == id)
    }

    /// Attaches to an SSE-mode subscription. The first attach receives
    /// everything since the subscription was created; reattaching skips what
    /// queued up in between.
    pub fn stream(&self, id: &str) -> Option<EventStream> {
        let sub = self
            .inner
            .subs
            .read()
            .expect("gateway lock")
            .get(id)
            .cloned()?;
        if sub.spec.endpoint.is_some() {
            return None;
        }
        if sub.attached.swap(true, std::sync::atomic::Ordering::AcqRel) {
            sub.queue.clear();
        }
        Some(EventStream { sub })
    }

    /// Whether any subscription would be asked to vote on `env`.
    pub fn has_voters(&self, env: &Envelope) -> bool {
        self.inner
            .subs
            .read()
            .expect("gateway lock")
            .values()
            .any(|s| s.spec.wants(env, true))
    }

    /// Delivers the later answer of a subscriber that voted `callback`.
    /// Returns false when no vote waits under `ticket`.
    pub fn answer_vote(&self, ticket: &str, response: VoteResponse) -> bool {
        match self
            .inner
            .pending_votes
            .lock()
            .expect("gateway lock")
            .remove(ticket)
        {
            Some(tx) => tx.send(response).is_ok(),
            None => false,
        }
    }

    pub fn is_vote_ticket(&self, ticket: &str) -> bool {
        self.inner
            .pending_votes
            .lock()
            .expect("gateway lock")
            .contains_key(ticket)
    }

    fn dispatch(&self, env: &Envelope) {
        let subs = self.inner.subs.read().expect("gateway lock");
        for sub in subs.values() {
            if !sub.spec.wants(env, false) {
                continue;
            }
            // Delivery warnings are not sent back to the subscription they concern.
            if env.topic == Topic::Status
                && env.content.get("subscription").and_then(|s| s.as_str()) == Some(&sub.id)
            {
                continue;
            }
            if let Pushed::StartedDropping = sub.queue.push(env.clone()) {
                self.warn(env, &sub.id, "delivery queue full, dropping oldest events");
            }
        }
    }

    fn warn(&self, env: &Envelope, sub: &str, reason: &str) {
        tracing::warn!(subscription = sub, reason, "event delivery");
        let warning = Envelope::new(
            Topic::Status,
            "warning",
            env.instance,
            env.instance_uuid,
            json!({"subscription": sub, "reason": reason, "event": env.name()}),
        );
        let _ = self.inner.bus.publish(BusMessage::event(warning));
    }

    async fn push(&self, sub: &SubState, endpoint: &str, env: &Envelope) {
        let cfg = &self.inner.config;
        for attempt in 0..=cfg.push_retries {
            let res = self
                .inner
                .http
                .post(endpoint)
                .timeout(cfg.push_timeout)
                .json(env)
                .send()
                .await;
            match res {
                Ok(r) if r.status().is_success() => return,
                Ok(r) => tracing::debug!(status = %r.status(), attempt, "push rejected"),
                Err(e) => tracing::debug!(error = %e, attempt, "push failed"),
            }
            if attempt < cfg.push_retries {
                tokio::time::sleep(Duration::from_millis(100 * (1 << attempt.min(5)))).await;
            }
        }
        self.warn(env, &sub.id, "push delivery failed, event dropped");
    }

    /// Sends the vote to every voting subscription and gathers one response
    /// from each. Timeouts and delivery failures count as `ack`.
    pub async fn collect_votes(&self, env: Envelope) -> Vec<VoteResponse> {
        let voters: Vec<Arc<SubState>> = self
            .inner
            .subs
            .read()
            .expect("gateway lock")
            .values()
            .filter(|s| s.spec.wants(&env, true))
            .cloned()
            .collect();
        join_all(voters.into_iter().map(|sub| self.ask(sub, env.clone()))).await
    }

    async fn ask(&self, sub: Arc<SubState>, mut env: Envelope) -> VoteResponse {
        let cfg = &self.inner.config;
        let ticket = Uuid::new_v4().to_string();
        env.vote = Some(VoteTicket {
            id: ticket.clone(),
            callback: cfg.callback_url(env.instance, &ticket),
        });
        let (tx, rx) = oneshot::channel();
        self.inner
            .pending_votes
            .lock()
            .expect("gateway lock")
            .insert(ticket.clone(), tx);
        let answer = match &sub.spec.endpoint {
            Some(endpoint) => {
                let immediate = match self
                    .inner
                    .http
                    .post(endpoint)
                    .timeout(cfg.vote_timeout)
                    .json(&env)
                    .send()
                    .await
                {
                    Ok(r) if r.status().is_success() => match r.bytes().await {
                        Ok(body) => VoteResponse::parse_body(&body).unwrap_or_else(|e| {
                            tracing::warn!(error = %e, "unreadable vote answer, counted as ack");
                            VoteResponse::Ack
                        }),
                        Err(_) => VoteResponse::Ack,
                    },
                    _ => VoteResponse::Ack,
                };
                if immediate == VoteResponse::Callback {
                    tokio::time::timeout(cfg.vote_callback_timeout, rx)
                        .await
                        .ok()
                        .and_then(Result::ok)
                        .unwrap_or(VoteResponse::Ack)
                } else {
                    immediate
                }
            }
            None => {
                sub.queue.push(env);
                tokio::time::timeout(cfg.vote_timeout, rx)
                    .await
                    .ok()
                    .and_then(Result::ok)
                    .unwrap_or(VoteResponse::Ack)
            }
        };
        self.inner
            .pending_votes
            .lock()
            .expect("gateway lock")
            .remove(&ticket);
        answer
    }

    pub fn shutdown(&self) {
        if let Some(h) = self.inner.dispatcher.lock().expect("gateway lock").take() {
            h.abort();
        }
        let ids: Vec<String> = self
            .inner
            .subs
            .read()
            .expect("gateway lock")
            .keys()
            .cloned()
            .collect();
        for id in ids {
            self.unsubscribe(&id);
        }
    }
}
