//! Reference functionalities the engine calls through the operation
//! protocol: a worklist for human tasks, an XES event-log writer, a timeout
//! service and a sub-process spawner.

pub mod notify;
pub mod spawner;
pub mod timeout;
pub mod worklist;
pub mod xes;

use std::sync::Arc;
use std::time::Duration;

use axum::Router;
use pf_core::protocol::service::CallbackClient;

pub use notify::{Answer, Notifier};
pub use spawner::Spawner;
pub use worklist::{WorklistConfig, WorklistService};
pub use xes::XesLogger;

/// Which services to mount and how.
pub struct ServiceSet {
    pub worklist: Option<WorklistConfig>,
    pub logger: Option<Arc<XesLogger>>,
}

/// Mounts `/worklist`, `/log`, `/timeout` and `/spawn`. Must be called
/// inside a tokio runtime.
pub fn router(set: ServiceSet) -> Router {
    let http = reqwest::Client::builder()
        .timeout(Duration::from_secs(30))
        .build()
        .expect("http client");
    let notifier = Notifier::new(CallbackClient::new(http.clone()));
    let mut app = Router::new()
        .nest("/timeout", timeout::router(notifier.clone()))
        .nest(
            "/spawn",
            spawner::router(Spawner::new(http, notifier.clone())),
        );
    if let Some(cfg) = set.worklist {
        app = app.nest(
            "/worklist",
            worklist::router(WorklistService::new(cfg, notifier)),
        );
    }
    if let Some(logger) = set.logger {
        app = app.nest("/log", xes::router(logger));
    }
    app
}
