use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use clap::Parser;
use pf_core::config::EngineConfig;
use pf_core::persistence::{FileStore, MemoryStore, PersistenceAdapter};
use pf_core::Engine;
use pf_services::{ServiceSet, WorklistConfig, XesLogger};
use tracing_subscriber::EnvFilter;

/// Process engine server.
#[derive(Parser, Debug)]
#[command(name = "pf-engine", version)]
struct Args {
    /// Address to listen on. Port 0 picks a free one.
    #[arg(long, env = "PF_LISTEN", default_value = "127.0.0.1:8298")]
    listen: SocketAddr,
    /// Public base URL of the instance collection. Defaults to
    /// http://<listen>/flow/engine.
    #[arg(long, env = "PF_BASE_URL")]
    base_url: Option<String>,
    /// Directory for instance snapshots. Without it, state lives in memory.
    #[arg(long, env = "PF_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Mount the reference services under /services.
    #[arg(long)]
    services: bool,
    /// Worklist configuration (JSON). Implies --services.
    #[arg(long)]
    worklist: Option<PathBuf>,
    /// Write XES traces of every instance into this directory. Implies
    /// --services.
    #[arg(long)]
    log_dir: Option<PathBuf>,
    /// Seconds before a synchronous service call times out.
    #[arg(long, default_value_t = 30.0)]
    call_timeout: f64,
    /// Seconds between retries of salvaged calls.
    #[arg(long, default_value_t = 1.0)]
    retry_delay: f64,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let args = Args::parse();

    let listener = tokio::net::TcpListener::bind(args.listen)
        .await
        .with_context(|| format!("binding {}", args.listen))?;
    let addr = listener.local_addr()?;
    let base_url = args
        .base_url
        .clone()
        .unwrap_or_else(|| format!("http://{addr}/flow/engine"));

    let mut config = EngineConfig::default().with_base_url(&base_url);
    config.call_timeout = Duration::from_secs_f64(args.call_timeout);
    config.retry_delay = Duration::from_secs_f64(args.retry_delay);
    let store: Arc<dyn PersistenceAdapter> = match &args.data_dir {
        Some(dir) => {
            Arc::new(FileStore::open(dir).with_context(|| format!("opening {}", dir.display()))?)
        }
        None => Arc::new(MemoryStore::new()),
    };
    let engine = Engine::new(config, store).context("restoring instances")?;

    let mut app = pf_core::api::router(engine.clone());
    if args.services || args.worklist.is_some() || args.log_dir.is_some() {
        let worklist = match &args.worklist {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                Some(
                    serde_json::from_str::<WorklistConfig>(&text)
                        .context("worklist configuration")?,
                )
            }
            None => None,
        };
        let logger = match &args.log_dir {
            Some(dir) => Some(Arc::new(
                XesLogger::new(dir).with_context(|| format!("creating {}", dir.display()))?,
            )),
            None => None,
        };
        if logger.is_some() {
            engine
                .subscribe(XesLogger::subscription(&format!(
                    "http://{addr}/services/log"
                )))
                .context("subscribing the logger")?;
        }
        app = app.nest(
            "/services",
            pf_services::router(ServiceSet { worklist, logger }),
        );
    }

    println!("pf-engine listening on http://{addr} (instances at {base_url})");
    let shutdown_engine = engine.clone();
    axum::serve(listener, app)
        .with_graceful_shutdown(async move {
            let _ = tokio::signal::ctrl_c().await;
            shutdown_engine.shutdown();
        })
        .await?;
    Ok(())
}
