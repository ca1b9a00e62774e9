//! Simulator state persisted between invocations.
//!
//! The file is JSON: `{"format": "gridauth-state", "version": 1,
//! "engine": {...}}`, where `engine` holds the configuration, clock, jobs,
//! grid-mapfile, dynamic account pool, ledger and event log. Writers hold
//! an exclusive lock on `<state>.lock` for the whole command and replace
//! the file atomically.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use gridauth_core::JobManager;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FORMAT: &str = "gridauth-state";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StateError {
    #[error("state file {0} does not exist")]
    Missing(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: not a state file: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("{path}: unsupported state version {found} (expected {VERSION})")]
    Version { path: PathBuf, found: u32 },
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    format: String,
    version: u32,
    engine: JobManager,
}

/// An open state file. The lock is held until this value is dropped.
#[derive(Debug)]
pub struct StateFile {
    path: PathBuf,
    _lock: File,
}

impl StateFile {
    pub fn lock(path: &Path) -> Result<Self, StateError> {
        let lock_path = sidecar(path, "lock");
        let io_err = |source| StateError::Io {
            path: lock_path.clone(),
            source,
        };
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(io_err)?;
        lock.lock().map_err(io_err)?;
        Ok(StateFile {
            path: path.to_path_buf(),
            _lock: lock,
        })
    }

    pub fn exists(&self) -> bool {
        self.path.exists()
    }

    pub fn load(&self) -> Result<JobManager, StateError> {
        let text = match fs::read_to_string(&self.path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(StateError::Missing(self.path.clone())),
            Err(source) => {
                return Err(StateError::Io {
                    path: self.path.clone(),
                    source,
                })
            }
        };
        let malformed = |reason: String| StateError::Malformed {
            path: self.path.clone(),
            reason,
        };
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
        if value.get("format").and_then(|f| f.as_str()) != Some(FORMAT) {
            return Err(malformed(format!("missing \"format\": \"{FORMAT}\"")));
        }
        let version = value
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| malformed("missing version".into()))?;
        if version != u64::from(VERSION) {
            return Err(StateError::Version {
                path: self.path.clone(),
                found: u32::try_from(version).unwrap_or(u32::MAX),
            });
        }
        let env: Envelope = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
        Ok(env.engine)
    }

    pub fn save(&self, engine: &JobManager) -> Result<(), StateError> {
        let env = Envelope {
            format: FORMAT.into(),
            version: VERSION,
            engine: engine.clone(),
        };
        let mut text = serde_json::to_string_pretty(&env).expect("state serializes");
        text.push('\n');
        let tmp = sidecar(&self.path, "tmp");
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| StateError::Io { path, source }
        };
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(text.as_bytes()).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
        fs::rename(&tmp, &self.path).map_err(io_err(&self.path))
    }
}

fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".");
    name.push(ext);
    PathBuf::from(name)
}
