//! Label normalization, exact-match merging and codebook export.
//!
//! Two labels merge only when they are identical after lowercasing,
//! replacing punctuation with spaces and collapsing whitespace. There is no
//! stemming or synonym folding: "resource sharing" and "sharing resources"
//! stay separate codes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, MessageId, SpeakerRole};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CodebookError {
    #[error("label empty after normalization")]
    EmptyLabel,
    #[error("unknown approach {0:?} (expected topic, chunk, item or verb)")]
    UnknownApproach(String),
    #[error("unsupported codebook schema version {0}")]
    Schema(u32),
    #[error("invalid codebook document: {0}")]
    Invalid(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn normalize_label(raw: &str) -> Result<String, CodebookError> {
    let mapped: String = raw
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    let out = mapped.split_whitespace().collect::<Vec<_>>().join(" ");
    if out.is_empty() {
        Err(CodebookError::EmptyLabel)
    } else {
        Ok(out)
    }
}

/// A label that has been through [`normalize_label`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct NormalizedLabel(String);

impl NormalizedLabel {
    pub fn new(raw: &str) -> Result<Self, CodebookError> {
        normalize_label(raw).map(Self)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.0.split(' ')
    }
}

impl TryFrom<String> for NormalizedLabel {
    type Error = CodebookError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        let n = normalize_label(&value)?;
        if n != value {
            return Err(CodebookError::Invalid(format!("label {value:?} is not normalized")));
        }
        Ok(Self(n))
    }
}

impl From<NormalizedLabel> for String {
    fn from(value: NormalizedLabel) -> Self {
        value.0
    }
}

impl fmt::Display for NormalizedLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Approach {
    Topic,
    Chunk,
    Item,
    Verb,
}

impl Approach {
    pub const ALL: [Approach; 4] = [Approach::Topic, Approach::Chunk, Approach::Item, Approach::Verb];

    pub fn as_str(self) -> &'static str {
        match self {
            Approach::Topic => "topic",
            Approach::Chunk => "chunk",
            Approach::Item => "item",
            Approach::Verb => "verb",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Approach::Topic => "Topic modeling",
            Approach::Chunk => "Chunk-level",
            Approach::Item => "Item-level",
            Approach::Verb => "Item-level (verb phrases)",
        }
    }
}

impl fmt::Display for Approach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Approach {
    type Err = CodebookError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Approach::ALL
            .into_iter()
            .find(|a| a.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| CodebookError::UnknownApproach(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub message_id: MessageId,
    pub speaker_role: SpeakerRole,
    pub content: String,
}

impl Example {
    pub fn render_line(&self) -> String {
        format!("{}: {}: {}", self.message_id, self.speaker_role, self.content)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub approach: Approach,
    pub chunks: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeFlags {
    pub verb_nonconforming: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Code {
    pub normalized_label: NormalizedLabel,
    pub display_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub definition: Option<String>,
    pub examples: Vec<Example>,
    pub provenance: Provenance,
    #[serde(default)]
    pub flags: CodeFlags,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub backend: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "CodebookDocument", into = "CodebookDocument")]
pub struct Codebook {
    pub approach: Approach,
    pub codes: Vec<Code>,
    pub run: Option<RunMetadata>,
}

/// Versioned on-disk form of a codebook.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodebookDocument {
    pub schema_version: u32,
    pub approach: Approach,
    pub code_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunMetadata>,
    pub codes: Vec<Code>,
}

impl From<Codebook> for CodebookDocument {
    fn from(c: Codebook) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            approach: c.approach,
            code_count: c.codes.len(),
            run: c.run,
            codes: c.codes,
        }
    }
}

impl TryFrom<CodebookDocument> for Codebook {
    type Error = CodebookError;

    fn try_from(d: CodebookDocument) -> Result<Self, Self::Error> {
        if d.schema_version != SCHEMA_VERSION {
            return Err(CodebookError::Schema(d.schema_version));
        }
        if d.code_count != d.codes.len() {
            return Err(CodebookError::Invalid(format!(
                "code_count {} but {} codes",
                d.code_count,
                d.codes.len()
            )));
        }
        let codebook = Codebook { approach: d.approach, codes: d.codes, run: d.run };
        codebook.check()?;
        Ok(codebook)
    }
}

/// One label occurrence as emitted by a pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawCodeInstance {
    pub raw_label: String,
    pub chunk: usize,
    /// Position within the chunk's output; fixes "first seen".
    pub ordinal: usize,
    pub message_ids: Vec<MessageId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub definition: Option<String>,
}

impl Codebook {
    pub fn empty(approach: Approach) -> Self {
        Self { approach, codes: Vec::new(), run: None }
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn get(&self, label: &str) -> Option<&Code> {
        let key = normalize_label(label).ok()?;
        self.codes
            .binary_search_by(|c| c.normalized_label.as_str().cmp(&key))
            .ok()
            .map(|i| &self.codes[i])
    }

    pub fn labels(&self) -> impl Iterator<Item = &NormalizedLabel> {
        self.codes.iter().map(|c| &c.normalized_label)
    }

    /// Sorted, unique labels; each label matches its display form; examples
    /// sorted and unique.
    pub fn check(&self) -> Result<(), CodebookError> {
        for pair in self.codes.windows(2) {
            if pair[0].normalized_label >= pair[1].normalized_label {
                return Err(CodebookError::Invalid(format!(
                    "codes not strictly sorted at {:?}",
                    pair[1].normalized_label.as_str()
                )));
            }
        }
        for code in &self.codes {
            if normalize_label(&code.display_label)? != code.normalized_label.as_str() {
                return Err(CodebookError::Invalid(format!(
                    "display label {:?} does not normalize to {:?}",
                    code.display_label,
                    code.normalized_label.as_str()
                )));
            }
            for pair in code.examples.windows(2) {
                if pair[0].message_id >= pair[1].message_id {
                    return Err(CodebookError::Invalid(format!(
                        "examples of {:?} not strictly sorted",
                        code.display_label
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("codebook serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, CodebookError> {
        let doc: CodebookDocument = serde_json::from_str(text)?;
        Codebook::try_from(doc)
    }

    pub fn load(path: &Path) -> Result<Self, CodebookError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), CodebookError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// Groups instances by normalized label. The result does not depend on the
/// order of `instances`: they are first sorted by (chunk, ordinal, label,
/// definition), and "first seen" refers to that order.
///
/// Instances whose label normalizes to nothing, and message ids absent from
/// the dataset, are dropped with a warning.
pub fn merge(instances: &[RawCodeInstance], approach: Approach, dataset: &Dataset) -> Codebook {
    let mut sorted: Vec<&RawCodeInstance> = instances.iter().collect();
    sorted.sort_by(|a, b| {
        (a.chunk, a.ordinal, &a.raw_label, &a.definition, &a.message_ids)
            .cmp(&(b.chunk, b.ordinal, &b.raw_label, &b.definition, &b.message_ids))
    });

    struct Acc {
        display: String,
        definition: Option<String>,
        ids: BTreeSet<MessageId>,
        chunks: BTreeSet<usize>,
    }
    let mut groups: BTreeMap<String, Acc> = BTreeMap::new();
    for inst in sorted {
        let Ok(key) = normalize_label(&inst.raw_label) else {
            tracing::warn!(label = %inst.raw_label, chunk = inst.chunk, "dropping label that is empty after normalization");
            continue;
        };
        let acc = groups.entry(key).or_insert_with(|| Acc {
            display: inst.raw_label.trim().to_string(),
            definition: None,
            ids: BTreeSet::new(),
            chunks: BTreeSet::new(),
        });
        if acc.definition.is_none() {
            acc.definition = inst.definition.as_ref().map(|d| d.trim()).filter(|d| !d.is_empty()).map(str::to_string);
        }
        acc.chunks.insert(inst.chunk);
        for id in &inst.message_ids {
            if dataset.contains(*id) {
                acc.ids.insert(*id);
            } else {
                tracing::warn!(%id, label = %inst.raw_label, "dropping example not in dataset");
            }
        }
    }

    let codes = groups
        .into_iter()
        .map(|(key, acc)| {
            let examples = acc
                .ids
                .into_iter()
                .filter_map(|id| dataset.get(id))
                .map(|m| Example { message_id: m.id, speaker_role: m.speaker_role, content: m.content.clone() })
                .collect();
            let normalized_label = NormalizedLabel(key);
            let flags = CodeFlags {
                verb_nonconforming: approach == Approach::Verb
                    && !crate::pipelines::check_verb_phrase(&normalized_label),
            };
            Code {
                normalized_label,
                display_label: acc.display,
                definition: acc.definition,
                examples,
                provenance: Provenance { approach, chunks: acc.chunks.into_iter().collect() },
                flags,
            }
        })
        .collect();
    Codebook { approach, codes, run: None }
}

fn cell(text: &str) -> String {
    text.replace('|', "\\|").replace(['\n', '\r'], " ")
}

/// Markdown table, one row per code, examples as "● id: role: content"
/// bullets separated by `<br>`.
pub fn export_table(codebook: &Codebook) -> String {
    let with_definitions = codebook.codes.iter().any(|c| c.definition.is_some());
    let mut out = format!("# {} codebook ({} codes)\n\n", codebook.approach.title(), codebook.len());
    if with_definitions {
        out.push_str("| Label | Definition | Examples |\n| --- | --- | --- |\n");
    } else {
        out.push_str("| Label | Examples |\n| --- | --- |\n");
    }
    for code in &codebook.codes {
        let bullets = code
            .examples
            .iter()
            .map(|e| format!("● {}", cell(&e.render_line())))
            .collect::<Vec<_>>()
            .join("<br>");
        let mut label = cell(&code.display_label);
        if code.flags.verb_nonconforming {
            label.push_str(" (not a verb phrase)");
        }
        if with_definitions {
            let def = code.definition.as_deref().map(cell).unwrap_or_default();
            out.push_str(&format!("| {label} | {def} | {bullets} |\n"));
        } else {
            out.push_str(&format!("| {label} | {bullets} |\n"));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Table,
    Structured,
}

impl FromStr for ExportFormat {
    type Err = CodebookError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" | "table-doc" | "md" => Ok(ExportFormat::Table),
            "structured" | "json" => Ok(ExportFormat::Structured),
            other => Err(CodebookError::Invalid(format!("unknown export format {other:?}"))),
        }
    }
}

pub fn export_codebook(codebook: &Codebook, format: ExportFormat) -> String {
    match format {
        ExportFormat::Table => export_table(codebook),
        ExportFormat::Structured => codebook.to_json(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{DatasetMetadata, Message};
    use chrono::NaiveDate;

    fn dataset(n: u32) -> Dataset {
        let t = NaiveDate::from_ymd_opt(2017, 11, 6).unwrap().and_hms_opt(10, 0, 0).unwrap();
        let messages = (0..n)
            .map(|i| Message {
                id: MessageId::new(2, i),
                speaker_role: if i % 2 == 0 { SpeakerRole::Designer } else { SpeakerRole::User },
                speaker_alias: None,
                timestamp: t,
                content: format!("message {i}"),
                media_markers: vec![],
            })
            .collect();
        Dataset::new(messages, DatasetMetadata::default()).unwrap()
    }

    fn inst(label: &str, chunk: usize, ordinal: usize, ids: &[u32]) -> RawCodeInstance {
        RawCodeInstance {
            raw_label: label.into(),
            chunk,
            ordinal,
            message_ids: ids.iter().map(|&i| MessageId::new(2, i)).collect(),
            definition: None,
        }
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_label("User Feedback ").unwrap(), "user feedback");
        assert_eq!(normalize_label("multi-language support").unwrap(), "multi language support");
        assert_eq!(normalize_label("user_role\t(second)").unwrap(), "user role second");
        assert_eq!(normalize_label(" -- ").unwrap_err().to_string(), "label empty after normalization");
    }

    #[test]
    fn merge_unions_examples_across_chunks() {
        let ds = dataset(10);
        let cb = merge(
            &[
                inst("participatory design", 0, 0, &[3, 1]),
                inst("Participatory Design", 2, 0, &[7, 3]),
                inst("resource sharing", 1, 0, &[2]),
                inst("sharing resources", 1, 1, &[2]),
            ],
            Approach::Chunk,
            &ds,
        );
        assert_eq!(cb.len(), 3);
        let pd = cb.get("participatory design").unwrap();
        assert_eq!(pd.display_label, "participatory design");
        let ids: Vec<String> = pd.examples.iter().map(|e| e.message_id.to_string()).collect();
        assert_eq!(ids, ["2-1", "2-3", "2-7"]);
        assert_eq!(pd.provenance.chunks, vec![0, 2]);
        cb.check().unwrap();
    }

    #[test]
    fn merge_empty_and_unknown_ids() {
        let ds = dataset(3);
        assert!(merge(&[], Approach::Item, &ds).is_empty());
        let cb = merge(&[inst("x", 0, 0, &[1, 99]), inst("!!", 0, 1, &[0])], Approach::Item, &ds);
        assert_eq!(cb.len(), 1);
        assert_eq!(cb.codes[0].examples.len(), 1);
    }

    #[test]
    fn definition_is_first_non_empty() {
        let ds = dataset(3);
        let mut a = inst("code", 0, 0, &[]);
        a.definition = Some("  ".into());
        let mut b = inst("code", 1, 0, &[]);
        b.definition = Some("second".into());
        let mut c = inst("code", 2, 0, &[]);
        c.definition = Some("third".into());
        let cb = merge(&[c, b, a], Approach::Chunk, &ds);
        assert_eq!(cb.codes[0].definition.as_deref(), Some("second"));
    }

    #[test]
    fn verb_flags_only_on_verb_codebooks() {
        let ds = dataset(3);
        let items = [inst("acknowledge feedback", 0, 0, &[0]), inst("emoji", 0, 1, &[1])];
        let verb = merge(&items, Approach::Verb, &ds);
        assert!(!verb.get("acknowledge feedback").unwrap().flags.verb_nonconforming);
        assert!(verb.get("emoji").unwrap().flags.verb_nonconforming);
        let item = merge(&items, Approach::Item, &ds);
        assert!(!item.get("emoji").unwrap().flags.verb_nonconforming);
    }

    #[test]
    fn table_export_bullets() {
        let ds = dataset(4);
        let cb = merge(&[inst("role identification", 0, 0, &[2])], Approach::Chunk, &ds);
        let table = export_table(&cb);
        assert!(table.contains("| role identification | ● 2-2: Designer: message 2 |"), "{table}");
        let empty = export_table(&Codebook::empty(Approach::Topic));
        assert_eq!(empty.lines().filter(|l| l.starts_with('|')).count(), 2);
    }

    #[test]
    fn structured_round_trip_and_validation() {
        let ds = dataset(5);
        let mut cb = merge(&[inst("a b", 0, 0, &[1]), inst("c", 1, 0, &[2, 3])], Approach::Item, &ds);
        cb.run = Some(RunMetadata { backend: "mock".into(), seed: Some(7), config_digest: "abc".into() });
        let text = cb.to_json();
        assert_eq!(Codebook::from_json(&text).unwrap(), cb);

        let broken = text.replace("\"schema_version\": 1", "\"schema_version\": 9");
        assert!(matches!(Codebook::from_json(&broken), Err(CodebookError::Schema(9))));
        let miscounted = text.replace("\"code_count\": 2", "\"code_count\": 3");
        assert!(Codebook::from_json(&miscounted).is_err());
        let unnormalized = text.replace("\"normalized_label\": \"c\"", "\"normalized_label\": \"C\"");
        assert!(Codebook::from_json(&unnormalized).is_err());
    }

    #[test]
    fn approach_parsing() {
        assert_eq!("Verb".parse::<Approach>().unwrap(), Approach::Verb);
        assert!("all".parse::<Approach>().is_err());
    }
}
