use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use tokio::sync::Notify;

use crate::event::Envelope;

/// Bounded per-subscription delivery queue. When full, the oldest envelope is
/// dropped.
pub(crate) struct EventQueue {
    items: Mutex<VecDeque<Envelope>>,
    notify: Notify,
    capacity: usize,
    overflowing: AtomicBool,
    closed: AtomicBool,
}

pub(crate) enum Pushed {
    Queued,
    /// The queue was full and started dropping.
    StartedDropping,
    Dropped,
}

impl EventQueue {
    pub(crate) fn new(capacity: usize) -> Self {
        EventQueue {
            items: Mutex::new(VecDeque::new()),
            notify: Notify::new(),
            capacity: capacity.max(1),
            overflowing: AtomicBool::new(false),
            closed: AtomicBool::new(false),
        }
    }

    pub(crate) fn push(&self, env: Envelope) -> Pushed {
        let mut items = self.items.lock().expect("queue lock");
        let mut result = Pushed::Queued;
        if items.len() >= self.capacity {
            items.pop_front();
            result = if self.overflowing.swap(true, Ordering::AcqRel) {
                Pushed::Dropped
            } else {
                Pushed::StartedDropping
            };
        }
        items.push_back(env);
        drop(items);
        self.notify.notify_one();
        result
    }

    pub(crate) async fn pop(&self) -> Option<Envelope> {
        loop {
            if self.closed.load(Ordering::Acquire) {
                return None;
            }
            {
                let mut items = self.items.lock().expect("queue lock");
                if let Some(env) = items.pop_front() {
                    if items.is_empty() {
                        self.overflowing.store(false, Ordering::Release);
                    }
                    return Some(env);
                }
            }
            self.notify.notified().await;
        }
    }

    /// Drops everything queued.
    pub(crate) fn clear(&self) {
        self.items.lock().expect("queue lock").clear();
        self.overflowing.store(false, Ordering::Release);
    }

    pub(crate) fn len(&self) -> usize {
        self.items.lock().expect("queue lock").len()
    }

    pub(crate) fn close(&self) {
        self.closed.store(true, Ordering::Release);
        self.notify.notify_waiters();
        self.notify.notify_one();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::Topic;
    use serde_json::json;
    use uuid::Uuid;

    #[tokio::test]
    async fn drops_oldest() {
        let q = EventQueue::new(2);
        for i in 0..4 {
            q.push(Envelope::new(
                Topic::State,
                "change",
                1,
                Uuid::nil(),
                json!(i),
            ));
        }
        assert_eq!(q.len(), 2);
        assert_eq!(q.pop().await.unwrap().content, json!(2));
        assert_eq!(q.pop().await.unwrap().content, json!(3));
        q.close();
        assert!(q.pop().await.is_none());
    }
}
