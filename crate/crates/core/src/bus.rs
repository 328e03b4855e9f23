//! In-process publish/subscribe bus connecting instances with the rest of the
//! engine.
//!
//! Every subscriber gets its own unbounded channel, so publishing never waits
//! on a slow consumer. Messages published from one task reach each subscriber
//! in publish order.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::{mpsc, oneshot};

use crate::event::{Envelope, Topic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BusKind {
    Event,
    Vote,
    VoteResponse,
    Command,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusMessage {
    pub kind: BusKind,
    pub envelope: Envelope,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation_id: Option<String>,
}

impl BusMessage {
    pub fn event(envelope: Envelope) -> Self {
        BusMessage {
            kind: BusKind::Event,
            envelope,
            correlation_id: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct BusFilter {
    pub kinds: Option<Vec<BusKind>>,
    pub topics: Option<Vec<Topic>>,
    pub instance: Option<u64>,
}

impl BusFilter {
    pub fn all() -> Self {
        BusFilter::default()
    }

    pub fn kinds(kinds: &[BusKind]) -> Self {
        BusFilter {
            kinds: Some(kinds.to_vec()),
            ..Default::default()
        }
    }

    pub fn matches(&self, msg: &BusMessage) -> bool {
        self.kinds.as_ref().is_none_or(|k| k.contains(&msg.kind))
            && self
                .topics
                .as_ref()
                .is_none_or(|t| t.contains(&msg.envelope.topic))
            && self.instance.is_none_or(|i| i == msg.envelope.instance)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("bus closed")]
pub struct BusClosed;

struct Subscriber {
    id: u64,
    filter: BusFilter,
    tx: mpsc::UnboundedSender<BusMessage>,
}

#[derive(Default)]
struct Inner {
    subscribers: Mutex<Vec<Subscriber>>,
    pending: Mutex<HashMap<String, oneshot::Sender<Value>>>,
    next_id: AtomicU64,
    closed: std::sync::atomic::AtomicBool,
}

#[derive(Clone, Default)]
pub struct Bus {
    inner: Arc<Inner>,
}

pub struct BusSubscription {
    pub id: u64,
    rx: mpsc::UnboundedReceiver<BusMessage>,
}

impl BusSubscription {
    pub async fn recv(&mut self) -> Option<BusMessage> {
        self.rx.recv().await
    }

    pub fn try_recv(&mut self) -> Option<BusMessage> {
        self.rx.try_recv().ok()
    }
}

impl Bus {
    pub fn new() -> Self {
        Bus::default()
    }

    pub fn subscribe(&self, filter: BusFilter) -> BusSubscription {
        let (tx, rx) = mpsc::unbounded_channel();
        let id = self.inner.next_id.fetch_add(1, Ordering::Relaxed);
        self.inner
            .subscribers
            .lock()
            .expect("bus lock")
            .push(Subscriber { id, filter, tx });
        BusSubscription { id, rx }
    }

    pub fn unsubscribe(&self, id: u64) {
        self.inner
            .subscribers
            .lock()
            .expect("bus lock")
            .retain(|s| s.id != id);
    }

    /// Delivers `msg` to every matching subscriber and returns how many got
    /// it. A vote response additionally resolves the vote it correlates to.
    pub fn publish(&self, msg: BusMessage) -> Result<usize, BusClosed> {
        if self.inner.closed.load(Ordering::Acquire) {
            return Err(BusClosed);
        }
        if msg.kind == BusKind::VoteResponse {
            if let Some(id) = &msg.correlation_id {
                if let Some(tx) = self.inner.pending.lock().expect("bus lock").remove(id) {
                    let _ = tx.send(msg.envelope.content.clone());
                }
            }
        }
        let mut subs = self.inner.subscribers.lock().expect("bus lock");
        let mut delivered = 0;
        subs.retain(|s| {
            if !s.filter.matches(&msg) {
                return true;
            }
            match s.tx.send(msg.clone()) {
                Ok(()) => {
                    delivered += 1;
                    true
                }
                Err(_) => false,
            }
        });
        Ok(delivered)
    }

    /// Publishes a vote and returns a receiver for the correlated response,
    /// or `None` when nobody listens for votes.
    pub fn request(
        &self,
        envelope: Envelope,
        correlation_id: String,
    ) -> Result<Option<oneshot::Receiver<Value>>, BusClosed> {
        let (tx, rx) = oneshot::channel();
        self.inner
            .pending
            .lock()
            .expect("bus lock")
            .insert(correlation_id.clone(), tx);
        let msg = BusMessage {
            kind: BusKind::Vote,
            envelope,
            correlation_id: Some(correlation_id.clone()),
        };
        let delivered = self.publish(msg);
        if !matches!(delivered, Ok(n) if n > 0) {
            self.inner
                .pending
                .lock()
                .expect("bus lock")
                .remove(&correlation_id);
        }
        match delivered? {
            0 => Ok(None),
            _ => Ok(Some(rx)),
        }
    }

    pub fn is_pending(&self, correlation_id: &str) -> bool {
        self.inner
            .pending
            .lock()
            .expect("bus lock")
            .contains_key(correlation_id)
    }

    pub fn close(&self) {
        self.inner.closed.store(true, Ordering::Release);
        self.inner.subscribers.lock().expect("bus lock").clear();
    }
}
