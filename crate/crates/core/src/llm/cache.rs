//! Content-addressed response cache backed by an append-only JSONL file.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::client::{LlmRequest, Usage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: String,
    pub request: LlmRequest,
    pub completions: Vec<String>,
    pub usage: Usage,
}

#[derive(Debug, Default)]
pub struct ResponseCache {
    path: Option<PathBuf>,
    entries: Mutex<HashMap<String, CacheRecord>>,
    file: Mutex<Option<File>>,
    key_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads existing records from `path` (if any) and appends new ones to
    /// it. Unreadable lines, such as a torn final write, are skipped.
    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                match serde_json::from_str::<CacheRecord>(line) {
                    Ok(r) => {
                        entries.insert(r.key.clone(), r);
                    }
                    Err(e) => log::warn!("{}:{}: skipping cache record: {e}", path.display(), i + 1),
                }
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: Some(path.to_path_buf()),
            entries: Mutex::new(entries),
            file: Mutex::new(Some(file)),
            key_locks: Mutex::default(),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<CacheRecord> {
        self.entries.lock().unwrap().get(key).cloned()
    }

    /// Stores `record` and, for file-backed caches, appends and syncs it.
    pub fn insert(&self, record: CacheRecord) -> Result<()> {
        let mut file = self.file.lock().unwrap();
        if let (Some(f), Some(path)) = (file.as_mut(), self.path.as_ref()) {
            let mut line = serde_json::to_string(&record)?;
            line.push('\n');
            f.write_all(line.as_bytes()).and_then(|_| f.sync_data()).map_err(|e| Error::io(path, e))?;
        }
        self.entries.lock().unwrap().insert(record.key.clone(), record);
        Ok(())
    }

    /// Per-key lock, so concurrent misses on one key make a single call.
    pub(crate) fn key_lock(&self, key: &str) -> Arc<Mutex<()>> {
        self.key_locks.lock().unwrap().entry(key.to_string()).or_default().clone()
    }
}
