//! Line-oriented replay cache for external-service responses.
//!
//! File format, one record per line:
//!
//! ```text
//! <key>\t<input hash>\t<payload as compact JSON>
//! ```
//!
//! Records are written sorted by key so identical contents always produce
//! identical bytes.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    /// Serve hits, call the service on a miss and store the answer.
    Record,
    /// Serve hits only; a miss or stale entry is a determinism error.
    Replay,
    /// Always call the service; never read or write the cache.
    Passthrough,
}

impl FromStr for CacheMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "record" => Ok(CacheMode::Record),
            "replay" => Ok(CacheMode::Replay),
            "passthrough" => Ok(CacheMode::Passthrough),
            _ => Err(Error::Config(format!("unknown cache mode {s:?}"))),
        }
    }
}

impl fmt::Display for CacheMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CacheMode::Record => "record",
            CacheMode::Replay => "replay",
            CacheMode::Passthrough => "passthrough",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub hash: String,
    pub payload: Value,
}

#[derive(Default)]
struct State {
    entries: BTreeMap<String, CacheEntry>,
    unflushed: usize,
    writes: usize,
}

const FLUSH_EVERY: usize = 64;

pub struct ReplayCache {
    path: PathBuf,
    mode: CacheMode,
    state: Mutex<State>,
    in_flight: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl fmt::Debug for ReplayCache {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ReplayCache")
            .field("path", &self.path)
            .field("mode", &self.mode)
            .finish()
    }
}

impl ReplayCache {
    /// Opens the cache file at `path`, loading it when it exists.
    pub fn open(path: impl Into<PathBuf>, mode: CacheMode) -> Result<Self> {
        let path = path.into();
        let entries = if path.exists() {
            parse_cache_file(&path)?
        } else {
            BTreeMap::new()
        };
        Ok(Self {
            path,
            mode,
            state: Mutex::new(State {
                entries,
                ..State::default()
            }),
            in_flight: Mutex::new(HashMap::new()),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn mode(&self) -> CacheMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entries stored since the cache was opened.
    pub fn writes(&self) -> usize {
        self.state.lock().unwrap().writes
    }

    pub fn get(&self, key: &str) -> Option<CacheEntry> {
        self.state.lock().unwrap().entries.get(key).cloned()
    }

    /// Stored payload for `key` if its hash matches, regardless of mode.
    pub fn peek(&self, key: &str, hash: &str) -> Option<Value> {
        self.get(key).filter(|e| e.hash == hash).map(|e| e.payload)
    }

    /// Looks up `key`, computing and storing the payload on a miss.
    ///
    /// Concurrent callers with the same key wait for the first computation
    /// instead of repeating it.
    pub fn get_or_compute<F>(&self, key: &str, hash: &str, compute: F) -> Result<Value>
    where
        F: FnOnce() -> Result<Value>,
    {
        if key.contains(['\t', '\n', '\r']) || key.is_empty() {
            return Err(Error::Validation(format!("invalid cache key {key:?}")));
        }
        if self.mode == CacheMode::Passthrough {
            return compute();
        }
        let key_lock = {
            let mut map = self.in_flight.lock().unwrap();
            map.entry(key.to_string()).or_default().clone()
        };
        let _guard = key_lock.lock().unwrap();

        match (self.get(key), self.mode) {
            (Some(e), _) if e.hash == hash => return Ok(e.payload),
            (Some(e), CacheMode::Replay) => {
                return Err(Error::Determinism(format!(
                    "{}: entry {key} was recorded for input {} but input is now {hash}",
                    self.path.display(),
                    e.hash
                )))
            }
            (None, CacheMode::Replay) => {
                return Err(Error::Determinism(format!(
                    "{}: no recorded entry for {key}",
                    self.path.display()
                )))
            }
            _ => {}
        }
        let payload = compute()?;
        self.insert(key, hash, payload.clone())?;
        Ok(payload)
    }

    /// Stores an entry; flushes to disk every few writes.
    pub fn insert(&self, key: &str, hash: &str, payload: Value) -> Result<()> {
        let flush_now = {
            let mut st = self.state.lock().unwrap();
            st.entries.insert(
                key.to_string(),
                CacheEntry {
                    hash: hash.to_string(),
                    payload,
                },
            );
            st.unflushed += 1;
            st.writes += 1;
            st.unflushed >= FLUSH_EVERY
        };
        if flush_now {
            self.flush()?;
        }
        Ok(())
    }

    /// Atomically rewrites the cache file if anything changed.
    pub fn flush(&self) -> Result<()> {
        let mut st = self.state.lock().unwrap();
        if st.unflushed == 0 {
            return Ok(());
        }
        let mut buf = String::new();
        for (key, entry) in &st.entries {
            buf.push_str(key);
            buf.push('\t');
            buf.push_str(&entry.hash);
            buf.push('\t');
            buf.push_str(&serde_json::to_string(&entry.payload)?);
            buf.push('\n');
        }
        write_atomic(&self.path, buf.as_bytes())?;
        st.unflushed = 0;
        Ok(())
    }
}

impl Drop for ReplayCache {
    fn drop(&mut self) {
        if let Err(e) = self.flush() {
            log::error!("failed to flush {}: {e}", self.path.display());
        }
    }
}

fn parse_cache_file(path: &Path) -> Result<BTreeMap<String, CacheEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let mut parts = line.splitn(3, '\t');
        let (Some(key), Some(hash), Some(payload)) = (parts.next(), parts.next(), parts.next())
        else {
            return Err(parse_err("expected key, hash and payload".into()));
        };
        let payload: Value = serde_json::from_str(payload).map_err(|e| parse_err(e.to_string()))?;
        entries.insert(
            key.to_string(),
            CacheEntry {
                hash: hash.to_string(),
                payload,
            },
        );
    }
    Ok(entries)
}

/// The set of cache files under one root directory.
#[derive(Debug, Clone)]
pub struct CacheDir {
    pub root: PathBuf,
    pub mode: CacheMode,
}

impl CacheDir {
    pub fn new(root: impl Into<PathBuf>, mode: CacheMode) -> Self {
        Self {
            root: root.into(),
            mode,
        }
    }

    pub fn captions_path(&self) -> PathBuf {
        self.root.join("captions.cache")
    }

    pub fn keywords_path(&self) -> PathBuf {
        self.root.join("keywords.cache")
    }

    pub fn unified_text_path(&self) -> PathBuf {
        self.root.join("unified_text.cache")
    }

    pub fn visual_dir(&self) -> PathBuf {
        self.root.join("visual")
    }

    pub fn visual_path(&self, triplet_id: &str) -> PathBuf {
        self.visual_dir().join(format!("{triplet_id}.png"))
    }

    pub fn open_captions(&self) -> Result<ReplayCache> {
        ReplayCache::open(self.captions_path(), self.mode)
    }

    pub fn open_keywords(&self) -> Result<ReplayCache> {
        ReplayCache::open(self.keywords_path(), self.mode)
    }

    /// Unified texts are derived locally, so this cache is always recordable.
    pub fn open_unified_text(&self) -> Result<ReplayCache> {
        ReplayCache::open(self.unified_text_path(), CacheMode::Record)
    }
}
