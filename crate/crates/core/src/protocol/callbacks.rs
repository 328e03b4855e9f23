use std::collections::HashMap;
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;

use super::Payload;

/// An open slot for asynchronous answers to one enactment attempt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallbackRecord {
    pub callback_id: String,
    pub instance_id: u64,
    pub activity_id: String,
    pub enactment_id: String,
    pub created_at: DateTime<Utc>,
    pub suspended: bool,
}

impl CallbackRecord {
    pub fn new(instance_id: u64, activity_id: &str, enactment_id: &str) -> Self {
        CallbackRecord {
            callback_id: uuid::Uuid::new_v4().to_string(),
            instance_id,
            activity_id: activity_id.to_string(),
            enactment_id: enactment_id.to_string(),
            created_at: Utc::now(),
            suspended: false,
        }
    }
}

/// One PUT to a callback URL.
#[derive(Debug, Clone, PartialEq)]
pub struct CallbackMessage {
    pub payload: Payload,
    /// More answers follow.
    pub update: bool,
    /// Names from CPEE-EVENT headers.
    pub events: Vec<String>,
}

impl CallbackMessage {
    pub fn is_failure(&self) -> bool {
        !self.update && self.payload.is_problem()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delivery {
    Accepted,
    Unknown,
    Suspended,
}

struct Entry {
    record: CallbackRecord,
    /// Cleared once a final answer was accepted.
    open: bool,
    tx: mpsc::UnboundedSender<CallbackMessage>,
    /// Receiver kept while no enactment listens (instance stopping/stopped or
    /// restored from a snapshot).
    parked: Option<mpsc::UnboundedReceiver<CallbackMessage>>,
}

/// Engine-wide table of open callbacks.
#[derive(Default)]
pub struct CallbackRegistry {
    entries: Mutex<HashMap<String, Entry>>,
}

impl CallbackRegistry {
    pub fn new() -> Self {
        CallbackRegistry::default()
    }

    /// Registers `record` and returns the receiving end for its answers.
    pub fn register(&self, record: CallbackRecord) -> mpsc::UnboundedReceiver<CallbackMessage> {
        let (tx, rx) = mpsc::unbounded_channel();
        let id = record.callback_id.clone();
        self.entries.lock().expect("registry lock").insert(
            id,
            Entry {
                record,
                open: true,
                tx,
                parked: None,
            },
        );
        rx
    }

    /// Re-creates a record loaded from a snapshot; answers queue until an
    /// enactment attaches.
    pub fn restore(&self, record: CallbackRecord) {
        let (tx, rx) = mpsc::unbounded_channel();
        let id = record.callback_id.clone();
        self.entries.lock().expect("registry lock").insert(
            id,
            Entry {
                record,
                open: true,
                tx,
                parked: Some(rx),
            },
        );
    }

    pub fn deliver(&self, instance_id: u64, callback_id: &str, msg: CallbackMessage) -> Delivery {
        let mut entries = self.entries.lock().expect("registry lock");
        let Some(entry) = entries.get_mut(callback_id) else {
            return Delivery::Unknown;
        };
        if entry.record.instance_id != instance_id || !entry.open {
            return Delivery::Unknown;
        }
        if entry.record.suspended {
            return Delivery::Suspended;
        }
        if !msg.update {
            entry.open = false;
        }
        if entry.tx.send(msg).is_err() {
            entries.remove(callback_id);
            return Delivery::Unknown;
        }
        Delivery::Accepted
    }

    /// Keeps the receiver of a detached enactment.
    pub fn park(&self, callback_id: &str, rx: mpsc::UnboundedReceiver<CallbackMessage>) {
        if let Some(entry) = self
            .entries
            .lock()
            .expect("registry lock")
            .get_mut(callback_id)
        {
            entry.parked = Some(rx);
        }
    }

    /// Hands the parked receiver to a resuming enactment.
    pub fn attach(
        &self,
        callback_id: &str,
    ) -> Option<(CallbackRecord, mpsc::UnboundedReceiver<CallbackMessage>)> {
        let mut entries = self.entries.lock().expect("registry lock");
        let entry = entries.get_mut(callback_id)?;
        let rx = entry.parked.take()?;
        Some((entry.record.clone(), rx))
    }

    pub fn remove(&self, callback_id: &str) -> bool {
        self.entries
            .lock()
            .expect("registry lock")
            .remove(callback_id)
            .is_some()
    }

    pub fn remove_instance(&self, instance_id: u64) -> usize {
        let mut entries = self.entries.lock().expect("registry lock");
        let before = entries.len();
        entries.retain(|_, e| e.record.instance_id != instance_id);
        before - entries.len()
    }

    fn set_suspended(&self, instance_id: u64, suspended: bool) -> usize {
        let mut entries = self.entries.lock().expect("registry lock");
        let mut count = 0;
        for e in entries
            .values_mut()
            .filter(|e| e.record.instance_id == instance_id)
        {
            e.record.suspended = suspended;
            count += 1;
        }
        count
    }

    /// Suspends every callback of the instance and returns how many it has.
    pub fn suspend(&self, instance_id: u64) -> usize {
        self.set_suspended(instance_id, true)
    }

    pub fn resume(&self, instance_id: u64) -> usize {
        self.set_suspended(instance_id, false)
    }

    /// Open records of the instance, ordered by creation.
    pub fn records_for(&self, instance_id: u64) -> Vec<CallbackRecord> {
        let entries = self.entries.lock().expect("registry lock");
        let mut records: Vec<CallbackRecord> = entries
            .values()
            .filter(|e| e.record.instance_id == instance_id && e.open)
            .map(|e| e.record.clone())
            .collect();
        records.sort_by(|a, b| {
            a.created_at
                .cmp(&b.created_at)
                .then_with(|| a.callback_id.cmp(&b.callback_id))
        });
        records
    }

    pub fn contains(&self, callback_id: &str) -> bool {
        self.entries
            .lock()
            .expect("registry lock")
            .contains_key(callback_id)
    }
}
