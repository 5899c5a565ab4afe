//! File persistence for the annotation store: an append-only JSONL event log
//! plus an occasional snapshot. On open, the snapshot is loaded and log
//! records newer than it are replayed.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::store::{AnnotationStore, EvalError, StoreEvent};
use crate::codebook::Codebook;

pub const LOG_FILE: &str = "annotations.log.jsonl";
pub const SNAPSHOT_FILE: &str = "annotations.snapshot.json";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}:{line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
    #[error("unsupported snapshot version {0}")]
    Version(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LogRecord {
    seq: u64,
    #[serde(flatten)]
    event: StoreEvent,
}

#[derive(Debug, Serialize, Deserialize)]
struct Snapshot {
    schema_version: u32,
    last_seq: u64,
    events: Vec<StoreEvent>,
}

pub struct PersistentStore {
    store: AnnotationStore,
    dir: PathBuf,
    log: File,
    next_seq: u64,
}

impl PersistentStore {
    pub fn open<'a>(dir: &Path, codebooks: impl IntoIterator<Item = &'a Codebook>) -> Result<Self, PersistError> {
        fs::create_dir_all(dir)?;
        let mut store = AnnotationStore::new().with_codebooks(codebooks);
        let mut last_seq = 0u64;
        let mut have_snapshot = false;

        let snapshot_path = dir.join(SNAPSHOT_FILE);
        if snapshot_path.exists() {
            let snap: Snapshot = serde_json::from_slice(&fs::read(&snapshot_path)?)?;
            if snap.schema_version != SNAPSHOT_VERSION {
                return Err(PersistError::Version(snap.schema_version));
            }
            for event in snap.events {
                store.apply_unchecked(event);
            }
            last_seq = snap.last_seq;
            have_snapshot = true;
        }

        let log_path = dir.join(LOG_FILE);
        let mut next_seq = if have_snapshot { last_seq + 1 } else { 0 };
        if log_path.exists() {
            for (i, line) in BufReader::new(File::open(&log_path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: LogRecord = serde_json::from_str(&line).map_err(|e| PersistError::Corrupt {
                    path: log_path.clone(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                if !have_snapshot || record.seq > last_seq {
                    store.apply_unchecked(record.event);
                }
                next_seq = next_seq.max(record.seq + 1);
            }
        }
        let log = OpenOptions::new().create(true).append(true).open(&log_path)?;
        Ok(Self { store, dir: dir.to_path_buf(), log, next_seq })
    }

    pub fn store(&self) -> &AnnotationStore {
        &self.store
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Validate, log, then apply. A failed validation writes nothing.
    pub fn apply(&mut self, event: StoreEvent) -> Result<(), PersistError> {
        self.store.validate(&event)?;
        let record = LogRecord { seq: self.next_seq, event };
        let mut line = serde_json::to_vec(&record)?;
        line.push(b'\n');
        self.log.write_all(&line)?;
        self.log.flush()?;
        self.next_seq += 1;
        self.store.apply_unchecked(record.event);
        Ok(())
    }

    pub fn register_rater(&mut self, name: &str) -> Result<String, PersistError> {
        if let Some(token) = self.store.token(name) {
            return Ok(token.to_string());
        }
        let token = hex::encode(rand::random::<[u8; 16]>());
        self.apply(StoreEvent::RegisterRater { name: name.to_string(), token: token.clone() })?;
        Ok(token)
    }

    /// Writes the snapshot; the log stays as it is.
    pub fn snapshot(&self) -> Result<(), PersistError> {
        let snap = Snapshot {
            schema_version: SNAPSHOT_VERSION,
            last_seq: self.next_seq.saturating_sub(1),
            events: self.store.to_events(),
        };
        let path = self.dir.join(SNAPSHOT_FILE);
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&snap)?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{Approach, Code, CodeFlags, NormalizedLabel, Provenance};
    use crate::evaluation::store::{Annotation, Flag};

    fn codebook() -> Codebook {
        let codes = ["a", "b"]
            .iter()
            .map(|l| Code {
                normalized_label: NormalizedLabel::new(l).unwrap(),
                display_label: l.to_string(),
                definition: None,
                examples: vec![],
                provenance: Provenance { approach: Approach::Chunk, chunks: vec![] },
                flags: CodeFlags::default(),
            })
            .collect();
        Codebook { approach: Approach::Chunk, codes, run: None }
    }

    fn annotate(rater: &str, label: &str) -> StoreEvent {
        StoreEvent::Annotate(Annotation {
            rater: rater.into(),
            approach: Approach::Chunk,
            label: NormalizedLabel::new(label).unwrap(),
            flags: [Flag::OverlyBroad].into_iter().collect(),
            note: None,
        })
    }

    #[test]
    fn reopen_replays_log_and_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let cb = codebook();
        let state = {
            let mut p = PersistentStore::open(dir.path(), [&cb]).unwrap();
            p.register_rater("x").unwrap();
            p.register_rater("y").unwrap();
            p.apply(annotate("x", "a")).unwrap();
            p.snapshot().unwrap();
            p.apply(annotate("y", "b")).unwrap();
            assert!(p.apply(annotate("nobody", "b")).is_err());
            p.apply(StoreEvent::Complete { rater: "x".into(), approach: Approach::Chunk }).unwrap();
            p.store().clone()
        };
        let reopened = PersistentStore::open(dir.path(), [&cb]).unwrap();
        assert_eq!(reopened.store(), &state);
        let lines = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap().lines().count();
        assert_eq!(lines, 5);

        // without the snapshot the log alone gives the same state
        fs::remove_file(dir.path().join(SNAPSHOT_FILE)).unwrap();
        let from_log = PersistentStore::open(dir.path(), [&cb]).unwrap();
        assert_eq!(from_log.store(), &state);
    }

    #[test]
    fn corrupt_line_reported_with_position() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(LOG_FILE), "{\"seq\":0,\"event\":\"complete\"}\nnot json\n").unwrap();
        match PersistentStore::open(dir.path(), [&codebook()]) {
            Err(PersistError::Corrupt { line, .. }) => assert_eq!(line, 1),
            Err(other) => panic!("unexpected {other}"),
            Ok(_) => panic!("corrupt log accepted"),
        }
    }
}
