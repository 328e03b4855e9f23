use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use pf_core::protocol::service::CallbackClient;
use serde_json::Value;
use tokio::sync::mpsc;

#[derive(Debug, Clone, PartialEq)]
pub enum Answer {
    Update {
        event: Option<String>,
        body: Value,
    },
    Finish {
        event: Option<String>,
        body: Value,
    },
    Fail {
        event: Option<String>,
        title: String,
        detail: String,
    },
}

impl Answer {
    fn is_last(&self) -> bool {
        !matches!(self, Answer::Update { .. })
    }
}

/// Delivers callback answers in order per callback URL. Queues for
/// different URLs do not block each other, so one suspended instance does
/// not hold up the rest.
#[derive(Clone)]
pub struct Notifier {
    client: CallbackClient,
    queues: Arc<Mutex<HashMap<String, mpsc::UnboundedSender<Answer>>>>,
}

impl Notifier {
    pub fn new(client: CallbackClient) -> Self {
        Notifier {
            client,
            queues: Arc::default(),
        }
    }

    pub fn send(&self, url: &str, answer: Answer) {
        let mut queues = self.queues.lock().expect("notifier lock");
        let tx = queues
            .entry(url.to_string())
            .or_insert_with(|| self.worker(url.to_string()));
        if let Err(mpsc::error::SendError(answer)) = tx.send(answer) {
            let tx = self.worker(url.to_string());
            let _ = tx.send(answer);
            queues.insert(url.to_string(), tx);
        }
    }

    fn worker(&self, url: String) -> mpsc::UnboundedSender<Answer> {
        let (tx, mut rx) = mpsc::unbounded_channel::<Answer>();
        let client = self.client.clone();
        let queues = self.queues.clone();
        tokio::spawn(async move {
            while let Some(answer) = rx.recv().await {
                let last = answer.is_last();
                let result = match &answer {
                    Answer::Update { event, body } => {
                        client.update(&url, event.as_deref(), body).await
                    }
                    Answer::Finish { event, body } => {
                        client.finish(&url, event.as_deref(), body).await
                    }
                    Answer::Fail {
                        event,
                        title,
                        detail,
                    } => client.fail(&url, event.as_deref(), title, detail).await,
                };
                if let Err(e) = result {
                    tracing::warn!(%url, error = %e, "callback not delivered");
                }
                if last {
                    break;
                }
            }
            drop(rx);
            let mut queues = queues.lock().expect("notifier lock");
            if queues.get(&url).is_some_and(|tx| tx.is_closed()) {
                queues.remove(&url);
            }
        });
        tx
    }
}
