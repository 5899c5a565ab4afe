//! Where the CLI and server keep things inside a working directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use qualcode_core::codebook::{Approach, Codebook};
use qualcode_core::corpus::Dataset;

pub const DATASET_FILE: &str = "dataset.json";
pub const HUMAN_LABELS_FILE: &str = "human_labels.json";
pub const ANNOTATIONS_DIR: &str = "annotations";
pub const CODEBOOKS_DIR: &str = "codebooks";

#[derive(Debug, Clone)]
pub struct Workdir {
    root: PathBuf,
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.root.join(DATASET_FILE)
    }

    pub fn codebook_path(&self, approach: Approach) -> PathBuf {
        self.root.join(CODEBOOKS_DIR).join(format!("{}.json", approach.as_str()))
    }

    pub fn annotations_dir(&self) -> PathBuf {
        self.root.join(ANNOTATIONS_DIR)
    }

    pub fn human_labels_path(&self) -> PathBuf {
        self.root.join(HUMAN_LABELS_FILE)
    }

    pub fn dataset(&self) -> Result<Option<Dataset>> {
        let path = self.dataset_path();
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(Dataset::load(&path).with_context(|| format!("loading {}", path.display()))?))
    }

    /// Codebooks present in the workdir, keyed by approach.
    pub fn codebooks(&self) -> Result<BTreeMap<Approach, Codebook>> {
        let mut out = BTreeMap::new();
        for approach in Approach::ALL {
            let path = self.codebook_path(approach);
            if path.exists() {
                let cb = Codebook::load(&path).with_context(|| format!("loading {}", path.display()))?;
                out.insert(approach, cb);
            }
        }
        Ok(out)
    }

    pub fn human_labels(&self) -> Result<Option<Vec<String>>> {
        let path = self.human_labels_path();
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?))
    }
}
