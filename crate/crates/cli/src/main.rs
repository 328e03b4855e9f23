//! `pf`: command-line client for the engine's control API.
//!
//! Exit codes: 0 success, 1 request rejected (or bad input), 2 engine not
//! reachable.

use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand, ValueEnum};
use reqwest::blocking::{Client, RequestBuilder, Response};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "pf", version, about = "Operate a process engine")]
struct Cli {
    /// Instance collection URL of the engine.
    #[arg(
        long,
        env = "PF_ENGINE",
        default_value = "http://localhost:8298/flow/engine",
        global = true
    )]
    engine: String,
    #[arg(long, value_enum, default_value_t = Output::Json, global = true)]
    output: Output,
    /// Seconds to wait for a response (and for `stop` to drain).
    #[arg(long, default_value_t = 10.0, global = true)]
    timeout: f64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Output {
    Json,
    Table,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Instance operations.
    #[command(subcommand)]
    Instance(InstanceCommand),
    /// Stream events as JSON lines until interrupted.
    Watch {
        /// Comma separated topics; all when omitted.
        #[arg(long, value_delimiter = ',')]
        topics: Vec<String>,
        #[arg(long)]
        instance: Option<u64>,
        /// Exit after this many events.
        #[arg(long)]
        count: Option<u64>,
    },
}

#[derive(Subcommand, Debug)]
enum InstanceCommand {
    /// Create an instance, optionally loading a model and starting it.
    Create {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        start: bool,
    },
    List,
    Show {
        id: u64,
    },
    Start {
        id: u64,
    },
    /// Stop and wait until the instance has drained.
    Stop {
        id: u64,
    },
    Abandon {
        id: u64,
    },
    Purge {
        id: u64,
    },
    /// Replace context values or positions. Values are JSON documents.
    Patch {
        id: u64,
        #[arg(long)]
        dataelements: Option<String>,
        #[arg(long)]
        endpoints: Option<String>,
        #[arg(long)]
        attributes: Option<String>,
        #[arg(long)]
        positions: Option<String>,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("engine not reachable: {0}")]
    Connect(String),
    #[error("{status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("{0}")]
    Input(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Connect(_) => 2,
            _ => 1,
        }
    }
}

impl From<reqwest::Error> for CliError {
    fn from(e: reqwest::Error) -> Self {
        CliError::Connect(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

struct Api {
    http: Client,
    base: String,
    output: Output,
    timeout: Duration,
}

fn check(resp: Response) -> CliResult<Value> {
    let status = resp.status();
    let text = resp.text()?;
    if !status.is_success() {
        return Err(CliError::Rejected {
            status: status.as_u16(),
            body: text,
        });
    }
    Ok(if text.trim().is_empty() {
        Value::Null
    } else {
        serde_json::from_str(&text).unwrap_or(Value::String(text))
    })
}

impl Api {
    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    fn send(&self, req: RequestBuilder) -> CliResult<Value> {
        check(req.send()?)
    }

    fn get(&self, path: &str) -> CliResult<Value> {
        self.send(self.http.get(self.url(path)))
    }

    fn set_state(&self, id: u64, state: &str) -> CliResult<Value> {
        self.send(
            self.http
                .put(self.url(&format!("/{id}/state")))
                .json(&json!({"state": state})),
        )
    }

    fn print(&self, value: &Value) {
        match (self.output, value) {
            (Output::Json, v) => println!("{v}"),
            (Output::Table, Value::Array(rows)) => {
                for row in rows {
                    match row.as_object() {
                        Some(m) => {
                            println!("{}", m.values().map(cell).collect::<Vec<_>>().join("\t"))
                        }
                        None => println!("{}", cell(row)),
                    }
                }
            }
            (Output::Table, Value::Object(m)) => {
                let width = m.keys().map(String::len).max().unwrap_or(0);
                for (k, v) in m {
                    println!("{k:width$}  {}", cell(v));
                }
            }
            (Output::Table, v) => println!("{}", cell(v)),
        }
    }

    fn instance(&self, cmd: InstanceCommand) -> CliResult<()> {
        let out = match cmd {
            InstanceCommand::Create { model, start } => {
                let body = match model {
                    Some(path) => {
                        let text = std::fs::read_to_string(&path)
                            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
                        let doc: Value = serde_json::from_str(&text).map_err(|e| {
                            CliError::Input(format!("{}: not JSON: {e}", path.display()))
                        })?;
                        json!({"model": doc})
                    }
                    None => json!({}),
                };
                let created = self.send(self.http.post(&self.base).json(&body))?;
                if start {
                    let id = created["id"]
                        .as_u64()
                        .ok_or_else(|| CliError::Input("engine returned no id".into()))?;
                    self.set_state(id, "running")?;
                }
                json!({"id": created["id"], "url": created["url"]})
            }
            InstanceCommand::List => self.get("")?,
            InstanceCommand::Show { id } => self.get(&format!("/{id}"))?,
            InstanceCommand::Start { id } => self.set_state(id, "running")?,
            InstanceCommand::Abandon { id } => self.set_state(id, "abandoned")?,
            InstanceCommand::Stop { id } => {
                self.set_state(id, "stopping")?;
                let deadline = Instant::now() + self.timeout;
                loop {
                    let state = self.get(&format!("/{id}/state"))?;
                    if state["state"] != "stopping" || Instant::now() >= deadline {
                        break state;
                    }
                    std::thread::sleep(Duration::from_millis(50));
                }
            }
            InstanceCommand::Purge { id } => {
                self.send(self.http.delete(self.url(&format!("/{id}"))))?;
                json!({"id": id, "purged": true})
            }
            InstanceCommand::Patch {
                id,
                dataelements,
                endpoints,
                attributes,
                positions,
            } => {
                let parse = |s: &str| {
                    serde_json::from_str::<Value>(s)
                        .map_err(|e| CliError::Input(format!("not JSON: {e}")))
                };
                let mut result = serde_json::Map::new();
                for (name, doc) in [
                    ("dataelements", dataelements),
                    ("endpoints", endpoints),
                    ("attributes", attributes),
                ] {
                    if let Some(doc) = doc {
                        let r = self.send(
                            self.http
                                .patch(self.url(&format!("/{id}/{name}")))
                                .json(&parse(&doc)?),
                        )?;
                        result.insert(name.to_string(), r);
                    }
                }
                if let Some(doc) = positions {
                    let r = self.send(
                        self.http
                            .put(self.url(&format!("/{id}/positions")))
                            .json(&parse(&doc)?),
                    )?;
                    result.insert("positions".to_string(), r);
                }
                if result.is_empty() {
                    return Err(CliError::Input("nothing to patch".into()));
                }
                Value::Object(result)
            }
        };
        self.print(&out);
        Ok(())
    }

    fn watch(
        &self,
        topics: Vec<String>,
        instance: Option<u64>,
        count: Option<u64>,
    ) -> CliResult<()> {
        const ALL: [&str; 10] = [
            "state",
            "activity",
            "position",
            "status",
            "dataelements",
            "description",
            "endpoints",
            "attributes",
            "condition",
            "task",
        ];
        let topics: Vec<String> = if topics.is_empty() {
            ALL.iter().map(|s| s.to_string()).collect()
        } else {
            topics
        };
        let mut spec = json!({"selections": topics.iter().map(|t| json!({"topic": t, "event": "*"})).collect::<Vec<_>>()});
        if let Some(i) = instance {
            spec["instance"] = json!(i);
        }
        let sub = self.send(self.http.post(self.url("/subscriptions")).json(&spec))?;
        let sid = sub["id"]
            .as_str()
            .ok_or_else(|| CliError::Input("engine returned no subscription id".into()))?
            .to_string();

        let interrupted = Arc::new(AtomicBool::new(false));
        {
            let flag = interrupted.clone();
            let http = self.http.clone();
            let url = self.url(&format!("/subscriptions/{sid}"));
            let _ = ctrlc::set_handler(move || {
                flag.store(true, Ordering::SeqCst);
                let _ = http.delete(&url).send();
                std::process::exit(0);
            });
        }

        let stream = Client::builder().build()?;
        let mut seen = 0u64;
        let mut backoff = Duration::from_millis(200);
        let result = loop {
            let resp = match stream
                .get(self.url(&format!("/subscriptions/{sid}/stream")))
                .send()
            {
                Ok(r) if r.status().is_success() => r,
                Ok(r) => break check(r).map(|_| ()),
                Err(e) => {
                    eprintln!("stream lost ({e}), reconnecting in {backoff:?}");
                    std::thread::sleep(backoff);
                    backoff = (backoff * 2).min(Duration::from_secs(10));
                    continue;
                }
            };
            backoff = Duration::from_millis(200);
            let stdout = std::io::stdout();
            for line in BufReader::new(resp).lines() {
                let Ok(line) = line else { break };
                if let Some(data) = line.strip_prefix("data:") {
                    let data = data.trim_start();
                    if data == "heartbeat" {
                        continue;
                    }
                    let mut out = stdout.lock();
                    let _ = writeln!(out, "{data}");
                    let _ = out.flush();
                    seen += 1;
                    if count.is_some_and(|c| seen >= c) {
                        break;
                    }
                }
            }
            if count.is_some_and(|c| seen >= c) || interrupted.load(Ordering::SeqCst) {
                break Ok(());
            }
            eprintln!("stream closed, reconnecting in {backoff:?}");
            std::thread::sleep(backoff);
        };
        let _ = self
            .http
            .delete(self.url(&format!("/subscriptions/{sid}")))
            .send();
        result
    }
}

fn cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => "-".to_string(),
        other => other.to_string(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let timeout = Duration::from_secs_f64(cli.timeout.max(0.0));
    let http = match Client::builder().timeout(timeout).build() {
        Ok(h) => h,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let client = Api {
        http,
        base: cli.engine.trim_end_matches('/').to_string(),
        output: cli.output,
        timeout,
    };
    let result = match cli.command {
        Command::Instance(cmd) => client.instance(cmd),
        Command::Watch {
            topics,
            instance,
            count,
        } => client.watch(topics, instance, count),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
