//! Reference corpus, codebooks, human labels and rater annotations shipped
//! with the crate. Used by the acceptance tests and `fixtures load`.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::codebook::{merge, Approach, Codebook, RawCodeInstance};
use crate::corpus::{ingest_str, CorpusError, Dataset, DatasetMetadata, InputFormat, MessageId};
use crate::evaluation::{AnnotationStore, EvalError, FlagSet, StoreEvent};

pub const BASE_YEAR: i32 = 2017;

const DATASET_TSV: &str = include_str!("../fixtures/reference/dataset.tsv");
const METADATA_JSON: &str = include_str!("../fixtures/reference/metadata.json");
const TOPIC_JSON: &str = include_str!("../fixtures/reference/codebook_topic.json");
const CHUNK_JSON: &str = include_str!("../fixtures/reference/codebook_chunk.json");
const ITEM_JSON: &str = include_str!("../fixtures/reference/codebook_item.json");
const VERB_JSON: &str = include_str!("../fixtures/reference/codebook_verb.json");
const HUMAN_JSON: &str = include_str!("../fixtures/reference/human_feedback.json");
const ANNOTATIONS_JSON: &str = include_str!("../fixtures/reference/annotations.json");

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("fixture json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("fixture {approach}: bad message id {id:?}")]
    BadId { approach: Approach, id: String },
}

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join("reference")
}

pub fn dataset() -> Result<Dataset, FixtureError> {
    let metadata: DatasetMetadata = serde_json::from_str(METADATA_JSON)?;
    Ok(ingest_str(DATASET_TSV, InputFormat::Tsv, Some(BASE_YEAR), metadata)?.dataset)
}

#[derive(Deserialize)]
struct CodebookRows {
    rows: Vec<Row>,
}

#[derive(Deserialize)]
struct Row {
    label: String,
    #[serde(default)]
    examples: Vec<String>,
}

fn raw_json(approach: Approach) -> &'static str {
    match approach {
        Approach::Topic => TOPIC_JSON,
        Approach::Chunk => CHUNK_JSON,
        Approach::Item => ITEM_JSON,
        Approach::Verb => VERB_JSON,
    }
}

/// Rows go through the regular merge, so repeated labels collapse.
pub fn codebook(approach: Approach, dataset: &Dataset) -> Result<Codebook, FixtureError> {
    let rows: CodebookRows = serde_json::from_str(raw_json(approach))?;
    let mut instances = Vec::with_capacity(rows.rows.len());
    for (ordinal, row) in rows.rows.into_iter().enumerate() {
        let message_ids = row
            .examples
            .iter()
            .map(|s| s.parse::<MessageId>().map_err(|_| FixtureError::BadId { approach, id: s.clone() }))
            .collect::<Result<Vec<_>, _>>()?;
        instances.push(RawCodeInstance { raw_label: row.label, chunk: 0, ordinal, message_ids, definition: None });
    }
    Ok(merge(&instances, approach, dataset))
}

pub fn codebooks(dataset: &Dataset) -> Result<Vec<Codebook>, FixtureError> {
    Approach::ALL.iter().map(|a| codebook(*a, dataset)).collect()
}

#[derive(Deserialize)]
struct HumanLabels {
    labels: Vec<String>,
}

/// Feedback-related labels from the human coders.
pub fn human_labels() -> Result<Vec<String>, FixtureError> {
    Ok(serde_json::from_str::<HumanLabels>(HUMAN_JSON)?.labels)
}

#[derive(Deserialize)]
struct AnnotationFile {
    raters: Vec<String>,
    approaches: std::collections::BTreeMap<Approach, ApproachAnnotations>,
}

#[derive(Deserialize)]
struct ApproachAnnotations {
    #[serde(flatten)]
    by_rater: std::collections::BTreeMap<String, Vec<Entry>>,
}

#[derive(Deserialize)]
struct Entry {
    label: String,
    #[serde(default)]
    flags: FlagSet,
    #[serde(default)]
    note: Option<String>,
}

const RECONCILIATIONS: &str = "reconciliations";

/// The store events the fixture describes: registration, both raters'
/// flags, completion, then reconciliation of each disagreement.
pub fn annotation_events(store: &AnnotationStore) -> Result<Vec<StoreEvent>, FixtureError> {
    let file: AnnotationFile = serde_json::from_str(ANNOTATIONS_JSON)?;
    let mut scratch = store.clone();
    let mut events = Vec::new();
    let mut push = |scratch: &mut AnnotationStore, e: StoreEvent| -> Result<(), FixtureError> {
        scratch.apply(e.clone())?;
        events.push(e);
        Ok(())
    };
    for rater in &file.raters {
        if scratch.token(rater).is_none() {
            let token = hex::encode(rand::random::<[u8; 16]>());
            push(&mut scratch, StoreEvent::RegisterRater { name: rater.clone(), token })?;
        }
    }
    for (approach, ann) in &file.approaches {
        for rater in &file.raters {
            for e in ann.by_rater.get(rater).map(Vec::as_slice).unwrap_or_default() {
                let label = crate::codebook::NormalizedLabel::new(&e.label).map_err(|_| EvalError::EmptyLabel)?;
                push(
                    &mut scratch,
                    StoreEvent::Annotate(crate::evaluation::Annotation {
                        rater: rater.clone(),
                        approach: *approach,
                        label,
                        flags: e.flags.clone(),
                        note: e.note.clone(),
                    }),
                )?;
            }
            push(&mut scratch, StoreEvent::Complete { rater: rater.clone(), approach: *approach })?;
        }
        for e in ann.by_rater.get(RECONCILIATIONS).map(Vec::as_slice).unwrap_or_default() {
            let event = scratch.reconcile_event(*approach, &e.label, e.flags.clone(), e.note.clone())?;
            push(&mut scratch, event)?;
        }
    }
    Ok(events)
}

/// Applies the fixture annotations to `store`.
pub fn load_annotations(store: &mut AnnotationStore) -> Result<(), FixtureError> {
    for e in annotation_events(store)? {
        store.apply(e)?;
    }
    Ok(())
}
