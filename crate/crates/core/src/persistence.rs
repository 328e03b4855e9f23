//! Instance snapshots and where they are kept.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use uuid::Uuid;

use crate::lifecycle::InstanceState;
use crate::model::{Position, ProcessModel};
use crate::protocol::CallbackRecord;
use crate::script::Status;

/// Everything needed to bring an instance back after a restart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSnapshot {
    pub id: u64,
    pub uuid: Uuid,
    pub state: InstanceState,
    pub model: ProcessModel,
    pub dataelements: BTreeMap<String, Value>,
    pub endpoints: BTreeMap<String, String>,
    pub attributes: BTreeMap<String, String>,
    pub positions: Vec<Position>,
    pub status: Status,
    /// Last enactment number per activity.
    pub enactments: BTreeMap<String, u64>,
    /// Sub-process instance URLs announced by services.
    pub spawned: Vec<String>,
    pub callbacks: Vec<CallbackRecord>,
}

#[derive(Debug, thiserror::Error)]
pub enum PersistenceError {
    #[error("persistence unavailable")]
    Unavailable,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt snapshot {path}: {message}")]
    Corrupt { path: String, message: String },
}

pub trait PersistenceAdapter: Send + Sync {
    fn store(&self, snapshot: &InstanceSnapshot) -> Result<(), PersistenceError>;
    fn remove(&self, id: u64) -> Result<(), PersistenceError>;
    fn load_all(&self) -> Result<Vec<InstanceSnapshot>, PersistenceError>;
    /// Persists the next instance id so ids are not reused after purges.
    fn store_next_id(&self, next_id: u64) -> Result<(), PersistenceError>;
    fn load_next_id(&self) -> Result<Option<u64>, PersistenceError>;
}

/// Keeps snapshots as serialized JSON in memory.
#[derive(Default)]
pub struct MemoryStore {
    docs: Mutex<BTreeMap<u64, String>>,
    next_id: Mutex<Option<u64>>,
    down: AtomicBool,
}

impl MemoryStore {
    pub fn new() -> Self {
        MemoryStore::default()
    }

    /// Simulates an outage: every call fails until switched back.
    pub fn set_available(&self, available: bool) {
        self.down.store(!available, Ordering::Release);
    }

    /// The stored document of one instance.
    pub fn document(&self, id: u64) -> Option<String> {
        self.docs.lock().expect("store lock").get(&id).cloned()
    }

    fn check(&self) -> Result<(), PersistenceError> {
        if self.down.load(Ordering::Acquire) {
            Err(PersistenceError::Unavailable)
        } else {
            Ok(())
        }
    }
}

impl PersistenceAdapter for MemoryStore {
    fn store(&self, snapshot: &InstanceSnapshot) -> Result<(), PersistenceError> {
        self.check()?;
        let doc = serde_json::to_string(snapshot).expect("snapshots serialize");
        self.docs
            .lock()
            .expect("store lock")
            .insert(snapshot.id, doc);
        Ok(())
    }

    fn remove(&self, id: u64) -> Result<(), PersistenceError> {
        self.check()?;
        self.docs.lock().expect("store lock").remove(&id);
        Ok(())
    }

    fn load_all(&self) -> Result<Vec<InstanceSnapshot>, PersistenceError> {
        self.check()?;
        self.docs
            .lock()
            .expect("store lock")
            .iter()
            .map(|(id, doc)| {
                serde_json::from_str(doc).map_err(|e| PersistenceError::Corrupt {
                    path: id.to_string(),
                    message: e.to_string(),
                })
            })
            .collect()
    }

    fn store_next_id(&self, next_id: u64) -> Result<(), PersistenceError> {
        self.check()?;
        *self.next_id.lock().expect("store lock") = Some(next_id);
        Ok(())
    }

    fn load_next_id(&self) -> Result<Option<u64>, PersistenceError> {
        self.check()?;
        Ok(*self.next_id.lock().expect("store lock"))
    }
}

/// One pretty-printed JSON file per instance under `<dir>/instances`.
pub struct FileStore {
    dir: PathBuf,
}

impl FileStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, PersistenceError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(dir.join("instances"))?;
        Ok(FileStore { dir })
    }

    pub fn instance_path(&self, id: u64) -> PathBuf {
        self.dir.join("instances").join(format!("{id}.json"))
    }

    fn write_atomic(path: &Path, data: &[u8]) -> Result<(), PersistenceError> {
        let tmp = path.with_extension("json.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(data)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

impl PersistenceAdapter for FileStore {
    fn store(&self, snapshot: &InstanceSnapshot) -> Result<(), PersistenceError> {
        let doc = serde_json::to_vec_pretty(snapshot).expect("snapshots serialize");
        Self::write_atomic(&self.instance_path(snapshot.id), &doc)
    }

    fn remove(&self, id: u64) -> Result<(), PersistenceError> {
        match fs::remove_file(self.instance_path(id)) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e.into()),
            _ => Ok(()),
        }
    }

    fn load_all(&self) -> Result<Vec<InstanceSnapshot>, PersistenceError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(self.dir.join("instances"))? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let data = fs::read(&path)?;
            let snap: InstanceSnapshot =
                serde_json::from_slice(&data).map_err(|e| PersistenceError::Corrupt {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
            out.push(snap);
        }
        out.sort_by_key(|s| s.id);
        Ok(out)
    }

    fn store_next_id(&self, next_id: u64) -> Result<(), PersistenceError> {
        let doc = serde_json::to_vec(&serde_json::json!({"next_id": next_id})).expect("serializes");
        Self::write_atomic(&self.dir.join("engine.json"), &doc)
    }

    fn load_next_id(&self) -> Result<Option<u64>, PersistenceError> {
        match fs::read(self.dir.join("engine.json")) {
            Ok(data) => {
                let v: Value =
                    serde_json::from_slice(&data).map_err(|e| PersistenceError::Corrupt {
                        path: "engine.json".into(),
                        message: e.to_string(),
                    })?;
                Ok(v.get("next_id").and_then(Value::as_u64))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }
}
