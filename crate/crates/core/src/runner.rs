//! Runs approaches end to end and keeps track of what was produced.
//!
//! A run directory holds `chunks.json`, `responses/<approach>.json`,
//! `codebooks/<approach>.json` and `manifest.json`. The manifest lists every
//! artifact with its sha256 so a later load can tell if anything changed.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codebook::{merge, Approach, Codebook, CodebookError, RawCodeInstance, RunMetadata};
use crate::corpus::{CorpusError, Dataset};
use crate::gateway::Gateway;
use crate::pipelines::{run_chunk_level, run_item_level, CarryState, ChunkLevelResult, ItemLevelResult, PipelineError};
use crate::segmenter::{attach_context, segment, Chunk, ChunkSet, SegmentError, SegmentationConfig};
use crate::topic::{run_topic, Embedder, TopicConfig, TopicError, TopicRun};

pub const RESPONSES_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHUNKS_FILE: &str = "chunks.json";
pub const CONTEXT_SIZE: usize = 3;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Topic(#[from] TopicError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Codebook(#[from] CodebookError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: digest mismatch (manifest {expected}, file {actual})")]
    Digest { path: PathBuf, expected: String, actual: String },
    #[error("unsupported {what} version {version}")]
    Version { what: &'static str, version: u32 },
    #[error("responses are for {got}, expected {expected}")]
    WrongApproach { got: Approach, expected: Approach },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn dataset_digest(dataset: &Dataset) -> String {
    sha256_hex(dataset.to_document_json().as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub segmentation: SegmentationConfig,
    pub context: usize,
    pub topic: TopicConfig,
    /// "tfidf" or the remote embedding model name.
    pub embedder: String,
    pub carry: bool,
    pub backend: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn new(backend: impl Into<String>, seed: Option<u64>) -> Self {
        Self {
            segmentation: SegmentationConfig::default(),
            context: CONTEXT_SIZE,
            topic: TopicConfig::default(),
            embedder: "tfidf".to_string(),
            carry: true,
            backend: backend.into(),
            seed,
        }
    }

    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    fn metadata(&self) -> RunMetadata {
        RunMetadata { backend: self.backend.clone(), seed: self.seed, config_digest: self.digest() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Responses {
    Topic(TopicRun),
    Chunk { results: Vec<ChunkLevelResult> },
    Item { results: Vec<ItemLevelResult> },
}

/// Raw and parsed model output for one approach.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponsesFile {
    pub schema_version: u32,
    pub approach: Approach,
    pub dataset_digest: String,
    pub config: RunConfig,
    pub responses: Responses,
}

impl ResponsesFile {
    pub fn instances(&self) -> Vec<RawCodeInstance> {
        match &self.responses {
            Responses::Topic(run) => run.instances.clone(),
            Responses::Chunk { results } => results.iter().flat_map(|r| r.instances.iter().cloned()).collect(),
            Responses::Item { results } => results.iter().flat_map(|r| r.instances.iter().cloned()).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("responses serialize")
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let file: ResponsesFile = serde_json::from_slice(&fs::read(path).map_err(io(path))?)?;
        if file.schema_version != RESPONSES_VERSION {
            return Err(RunError::Version { what: "responses", version: file.schema_version });
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<String, RunError> {
        write_artifact(path, self.to_json().as_bytes())
    }
}

/// Merge a responses file into its codebook.
pub fn aggregate(responses: &ResponsesFile, dataset: &Dataset) -> Codebook {
    let mut codebook = merge(&responses.instances(), responses.approach, dataset);
    codebook.run = Some(responses.config.metadata());
    codebook
}

pub fn chunk_dataset(dataset: &Dataset, config: &RunConfig) -> Result<ChunkSet, RunError> {
    let chunks = attach_context(&segment(dataset, &config.segmentation)?, config.context);
    Ok(ChunkSet { config: config.segmentation.clone(), context: config.context, chunks })
}

/// Chunk-level units are independent and fan out; results keep chunk order.
pub fn run_chunks(chunks: &[Chunk], dataset: &Dataset, gateway: &Gateway) -> Result<Vec<ChunkLevelResult>, RunError> {
    Ok(chunks.par_iter().map(|c| run_chunk_level(c, dataset, gateway)).collect::<Result<_, _>>()?)
}

/// With carry on, chunks go strictly in order, each seeing the previous
/// summary and notes. Without it they are independent.
pub fn run_items(
    chunks: &[Chunk],
    dataset: &Dataset,
    gateway: &Gateway,
    carry: bool,
    verb: bool,
) -> Result<Vec<ItemLevelResult>, RunError> {
    if !carry {
        let empty = CarryState::default();
        return Ok(chunks
            .par_iter()
            .map(|c| run_item_level(c, dataset, gateway, &empty, verb).map(|(r, _)| r))
            .collect::<Result<_, _>>()?);
    }
    let mut state = CarryState::default();
    let mut out = Vec::with_capacity(chunks.len());
    for chunk in chunks {
        let (result, next) = run_item_level(chunk, dataset, gateway, &state, verb)?;
        state = next;
        out.push(result);
    }
    Ok(out)
}

pub fn run_approach(
    approach: Approach,
    dataset: &Dataset,
    chunks: &[Chunk],
    gateway: &Gateway,
    embedder: &Embedder,
    config: &RunConfig,
) -> Result<ResponsesFile, RunError> {
    let responses = match approach {
        Approach::Topic => Responses::Topic(run_topic(dataset, embedder, &config.topic, gateway)?),
        Approach::Chunk => Responses::Chunk { results: run_chunks(chunks, dataset, gateway)? },
        Approach::Item | Approach::Verb => Responses::Item {
            results: run_items(chunks, dataset, gateway, config.carry, approach == Approach::Verb)?,
        },
    };
    Ok(ResponsesFile {
        schema_version: RESPONSES_VERSION,
        approach,
        dataset_digest: dataset_digest(dataset),
        config: config.clone(),
        responses,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub approach: Option<Approach>,
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub dataset_digest: String,
    pub config: RunConfig,
    pub config_digest: String,
    pub approaches: Vec<Approach>,
    pub artifacts: Vec<Artifact>,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
}

impl RunManifest {
    pub fn artifact(&self, kind: &str, approach: Option<Approach>) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.kind == kind && a.approach == approach)
    }

    /// Loads the manifest and checks every listed artifact's digest.
    pub fn load_verified(dir: &Path) -> Result<Self, RunError> {
        let path = dir.join(MANIFEST_FILE);
        let manifest: RunManifest = serde_json::from_slice(&fs::read(&path).map_err(io(&path))?)?;
        if manifest.schema_version != MANIFEST_VERSION {
            return Err(RunError::Version { what: "manifest", version: manifest.schema_version });
        }
        for a in &manifest.artifacts {
            let p = dir.join(&a.path);
            let actual = sha256_hex(&fs::read(&p).map_err(io(&p))?);
            if actual != a.sha256 {
                return Err(RunError::Digest { path: p, expected: a.sha256.clone(), actual });
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, dir: &Path) -> Result<(), RunError> {
        write_artifact(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(())
    }
}

/// Writes the file (creating parents) and returns its digest.
pub fn write_artifact(path: &Path, bytes: &[u8]) -> Result<String, RunError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    fs::write(path, bytes).map_err(io(path))?;
    Ok(sha256_hex(bytes))
}

pub fn responses_path(approach: Approach) -> String {
    format!("responses/{}.json", approach.as_str())
}

pub fn codebook_path(approach: Approach) -> String {
    format!("codebooks/{}.json", approach.as_str())
}

/// Segments once, runs each approach, aggregates, and writes the manifest.
pub fn run_to_dir(
    dir: &Path,
    dataset: &Dataset,
    approaches: &[Approach],
    gateway: &Gateway,
    embedder: &Embedder,
    config: &RunConfig,
) -> Result<RunManifest, RunError> {
    let started_at = Utc::now();
    let mut artifacts = Vec::new();
    let chunk_set = chunk_dataset(dataset, config)?;
    let sha = write_artifact(&dir.join(CHUNKS_FILE), serde_json::to_string_pretty(&chunk_set)?.as_bytes())?;
    artifacts.push(Artifact { kind: "chunks".into(), approach: None, path: CHUNKS_FILE.into(), sha256: sha });

    for &approach in approaches {
        tracing::info!(approach = approach.as_str(), "running");
        let responses = run_approach(approach, dataset, &chunk_set.chunks, gateway, embedder, config)?;
        let rel = responses_path(approach);
        let sha = responses.save(&dir.join(&rel))?;
        artifacts.push(Artifact { kind: "responses".into(), approach: Some(approach), path: rel, sha256: sha });

        let codebook = aggregate(&responses, dataset);
        let rel = codebook_path(approach);
        let sha = write_artifact(&dir.join(&rel), codebook.to_json().as_bytes())?;
        tracing::info!(approach = approach.as_str(), codes = codebook.len(), "codebook written");
        artifacts.push(Artifact { kind: "codebook".into(), approach: Some(approach), path: rel, sha256: sha });
    }

    let manifest = RunManifest {
        schema_version: MANIFEST_VERSION,
        dataset_digest: dataset_digest(dataset),
        config: config.clone(),
        config_digest: config.digest(),
        approaches: approaches.to_vec(),
        artifacts,
        started_at,
        finished_at: Utc::now(),
    };
    manifest.save(dir)?;
    Ok(manifest)
}
