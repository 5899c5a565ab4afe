//! Fixture store, replay backend and the run transcript.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{fixture_key, ChatBackend, ChatExchange, ChatRequest, GatewayError};

/// One JSON file per fixture key.
#[derive(Debug, Clone)]
pub struct FixtureStore {
    dir: PathBuf,
}

impl FixtureStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn write(&self, exchange: &ChatExchange) -> Result<(), GatewayError> {
        let path = self.path_for(&exchange.fixture_key);
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(exchange)?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn read(&self, key: &str) -> Result<Option<ChatExchange>, GatewayError> {
        match fs::read(self.path_for(key)) {
            Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn len(&self) -> Result<usize, GatewayError> {
        let mut n = 0;
        for entry in fs::read_dir(&self.dir)? {
            if entry?.path().extension().is_some_and(|e| e == "json") {
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn is_empty(&self) -> Result<bool, GatewayError> {
        Ok(self.len()? == 0)
    }
}

/// Serves recorded responses; never touches the network.
pub struct ReplayBackend {
    store: FixtureStore,
    source: String,
}

impl ReplayBackend {
    /// `source` is the id of the backend that made the recording.
    pub fn new(store: FixtureStore, source: impl Into<String>) -> Self {
        Self { store, source: source.into() }
    }
}

impl ChatBackend for ReplayBackend {
    fn id(&self) -> &str {
        "replay"
    }

    fn key_id(&self) -> &str {
        &self.source
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let key = fixture_key(&request.system, &request.user, &self.source, &request.sampling);
        match self.store.read(&key)? {
            Some(exchange) => Ok(exchange.response),
            None => Err(GatewayError::ReplayMiss { key }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub sequence: u64,
    #[serde(flatten)]
    pub exchange: ChatExchange,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Append-only log of every exchange, optionally mirrored to a JSONL file.
pub struct Transcript {
    inner: Mutex<TranscriptInner>,
}

struct TranscriptInner {
    entries: Vec<TranscriptEntry>,
    sink: Option<File>,
}

impl Transcript {
    pub fn in_memory() -> Self {
        Self { inner: Mutex::new(TranscriptInner { entries: Vec::new(), sink: None }) }
    }

    /// Appends to `path`, continuing the sequence of whatever is already there.
    pub fn to_file(path: &Path) -> Result<Self, GatewayError> {
        let existing = if path.exists() { Self::read_file(path)? } else { Vec::new() };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let sink = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { inner: Mutex::new(TranscriptInner { entries: existing, sink: Some(sink) }) })
    }

    pub fn read_file(path: &Path) -> Result<Vec<TranscriptEntry>, GatewayError> {
        let mut out = Vec::new();
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }

    pub fn append(&self, exchange: ChatExchange, error: Option<String>) -> Result<u64, GatewayError> {
        let mut inner = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        let sequence = inner.entries.len() as u64;
        let entry = TranscriptEntry { sequence, exchange, error };
        if let Some(sink) = inner.sink.as_mut() {
            let mut line = serde_json::to_vec(&entry)?;
            line.push(b'\n');
            sink.write_all(&line)?;
            sink.flush()?;
        }
        inner.entries.push(entry);
        Ok(sequence)
    }

    pub fn entries(&self) -> Vec<TranscriptEntry> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner()).entries.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap_or_else(|p| p.into_inner()).entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
