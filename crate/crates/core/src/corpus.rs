//! Conversation corpus: messages, the dataset container, and ingestion from
//! delimited (`id, speaker, time, content`) or line-delimited JSON records.
//!
//! A [`Dataset`] is immutable once built. Every constructor path runs the same
//! validation, so a dataset read back from a dataset document carries the same
//! guarantees as one produced by [`ingest_dataset`].

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Version of the dataset document layout written by [`Dataset::to_document_json`].
pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: invalid message id {value:?} (expected <session>-<index>)")]
    InvalidId { line: usize, value: String },
    #[error("line {line}: malformed timestamp {value:?}")]
    MalformedTimestamp { line: usize, value: String },
    #[error("line {line}: timestamp {value:?} has no year and no base year was supplied")]
    MissingBaseYear { line: usize, value: String },
    #[error("duplicate message id {id} (lines {first} and {second})")]
    DuplicateId { id: MessageId, first: usize, second: usize },
    #[error("messages out of order: {previous} ({previous_time}) is followed by {next} ({next_time})")]
    OutOfOrder {
        previous: MessageId,
        previous_time: NaiveDateTime,
        next: MessageId,
        next_time: NaiveDateTime,
    },
    #[error("line {line}: message {id} has empty content and no media placeholder")]
    EmptyContent { line: usize, id: MessageId },
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("input is not valid UTF-8")]
    Encoding,
    #[error("dataset has no research question")]
    MissingResearchQuestion,
    #[error("dataset document: {0}")]
    Document(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Message identifier in `<session>-<index>` form, e.g. `2-55`.
///
/// Ordering is numeric on (session, index), so `2-9` sorts before `2-10`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MessageId {
    pub session: u32,
    pub index: u32,
}

impl MessageId {
    pub fn new(session: u32, index: u32) -> Self {
        Self { session, index }
    }
}

impl fmt::Display for MessageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.session, self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid message id {0:?}")]
pub struct ParseMessageIdError(pub String);

impl FromStr for MessageId {
    type Err = ParseMessageIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseMessageIdError(s.to_string());
        let (session, index) = s.trim().split_once('-').ok_or_else(err)?;
        Ok(Self {
            session: session.parse().map_err(|_| err())?,
            index: index.parse().map_err(|_| err())?,
        })
    }
}

impl Serialize for MessageId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MessageId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpeakerRole {
    Designer,
    User,
}

impl SpeakerRole {
    pub fn as_str(self) -> &'static str {
        match self {
            SpeakerRole::Designer => "Designer",
            SpeakerRole::User => "User",
        }
    }
}

impl fmt::Display for SpeakerRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Bracketed media placeholder found in message content.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MediaMarker {
    Image,
    Emoji,
    Figure,
}

impl MediaMarker {
    const TOKENS: [(&'static str, MediaMarker); 3] = [
        ("[Image]", MediaMarker::Image),
        ("[Emoji]", MediaMarker::Emoji),
        ("[Figure]", MediaMarker::Figure),
    ];

    /// All exact placeholder tokens in `content`, in order of appearance.
    pub fn extract(content: &str) -> Vec<MediaMarker> {
        let mut markers = Vec::new();
        let mut rest = content;
        while let Some(pos) = rest.find('[') {
            rest = &rest[pos..];
            match Self::TOKENS.iter().find(|(tok, _)| rest.starts_with(tok)) {
                Some((tok, marker)) => {
                    markers.push(*marker);
                    rest = &rest[tok.len()..];
                }
                None => rest = &rest[1..],
            }
        }
        markers
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub id: MessageId,
    pub speaker_role: SpeakerRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker_alias: Option<String>,
    /// Minute precision.
    pub timestamp: NaiveDateTime,
    /// Verbatim text, media placeholders included.
    pub content: String,
    #[serde(default)]
    pub media_markers: Vec<MediaMarker>,
}

impl Message {
    /// `id: role: content`, the layout used for codebook examples.
    pub fn render_line(&self) -> String {
        format!("{}: {}: {}", self.id, self.speaker_role, self.content)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    #[serde(default)]
    pub research_question: String,
    #[serde(default)]
    pub coding_notes: String,
    #[serde(default)]
    pub language_note: String,
    /// Overrides the date range derived from message timestamps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date_range: Option<(NaiveDate, NaiveDate)>,
}

/// The ordered conversation plus research metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(into = "DatasetDocument")]
pub struct Dataset {
    messages: Vec<Message>,
    research_question: String,
    coding_notes: String,
    date_range: Option<(NaiveDate, NaiveDate)>,
    language_note: String,
    #[serde(skip)]
    positions: HashMap<MessageId, usize>,
}

impl Dataset {
    /// Validates ordering, id uniqueness and content rules.
    pub fn new(messages: Vec<Message>, metadata: DatasetMetadata) -> Result<Self, CorpusError> {
        let mut positions = HashMap::with_capacity(messages.len());
        for (pos, msg) in messages.iter().enumerate() {
            if let Some(first) = positions.insert(msg.id, pos) {
                return Err(CorpusError::DuplicateId {
                    id: msg.id,
                    first: first + 1,
                    second: pos + 1,
                });
            }
            if msg.content.is_empty() && msg.media_markers.is_empty() {
                return Err(CorpusError::EmptyContent { line: pos + 1, id: msg.id });
            }
        }
        for pair in messages.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if (b.timestamp, b.id) <= (a.timestamp, a.id) {
                return Err(CorpusError::OutOfOrder {
                    previous: a.id,
                    previous_time: a.timestamp,
                    next: b.id,
                    next_time: b.timestamp,
                });
            }
        }
        let date_range = metadata.date_range.or_else(|| {
            let first = messages.first()?.timestamp.date();
            let last = messages.last()?.timestamp.date();
            Some((first, last))
        });
        Ok(Self {
            messages,
            research_question: metadata.research_question,
            coding_notes: metadata.coding_notes,
            date_range,
            language_note: metadata.language_note,
            positions,
        })
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn research_question(&self) -> &str {
        &self.research_question
    }

    pub fn coding_notes(&self) -> &str {
        &self.coding_notes
    }

    pub fn language_note(&self) -> &str {
        &self.language_note
    }

    pub fn date_range(&self) -> Option<(NaiveDate, NaiveDate)> {
        self.date_range
    }

    pub fn get(&self, id: MessageId) -> Option<&Message> {
        self.positions.get(&id).map(|&pos| &self.messages[pos])
    }

    /// Position of `id` in dataset order.
    pub fn position(&self, id: MessageId) -> Option<usize> {
        self.positions.get(&id).copied()
    }

    pub fn contains(&self, id: MessageId) -> bool {
        self.positions.contains_key(&id)
    }

    pub fn metadata(&self) -> DatasetMetadata {
        DatasetMetadata {
            research_question: self.research_question.clone(),
            coding_notes: self.coding_notes.clone(),
            language_note: self.language_note.clone(),
            date_range: self.date_range,
        }
    }

    /// Same messages, replaced metadata.
    pub fn with_metadata(self, metadata: DatasetMetadata) -> Result<Self, CorpusError> {
        Dataset::new(self.messages, metadata)
    }

    /// Pipelines refuse to run without a research question.
    pub fn require_research_question(&self) -> Result<(), CorpusError> {
        if self.research_question.trim().is_empty() {
            Err(CorpusError::MissingResearchQuestion)
        } else {
            Ok(())
        }
    }

    pub fn to_document_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dataset serializes")
    }

    pub fn from_document_json(text: &str) -> Result<Self, CorpusError> {
        let doc: DatasetDocument =
            serde_json::from_str(text).map_err(|e| CorpusError::Document(e.to_string()))?;
        Dataset::try_from(doc)
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_document_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        std::fs::write(path, self.to_document_json())?;
        Ok(())
    }
}

/// Self-describing on-disk form of a [`Dataset`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetDocument {
    pub schema_version: u32,
    pub message_count: usize,
    pub metadata: DatasetMetadata,
    pub messages: Vec<Message>,
}

impl From<Dataset> for DatasetDocument {
    fn from(ds: Dataset) -> Self {
        DatasetDocument {
            schema_version: DATASET_SCHEMA_VERSION,
            message_count: ds.messages.len(),
            metadata: DatasetMetadata {
                research_question: ds.research_question,
                coding_notes: ds.coding_notes,
                language_note: ds.language_note,
                date_range: ds.date_range,
            },
            messages: ds.messages,
        }
    }
}

impl TryFrom<DatasetDocument> for Dataset {
    type Error = CorpusError;

    fn try_from(doc: DatasetDocument) -> Result<Self, Self::Error> {
        if doc.schema_version != DATASET_SCHEMA_VERSION {
            return Err(CorpusError::Document(format!(
                "unsupported schema version {}",
                doc.schema_version
            )));
        }
        if doc.message_count != doc.messages.len() {
            return Err(CorpusError::Document(format!(
                "message_count {} does not match {} messages",
                doc.message_count,
                doc.messages.len()
            )));
        }
        Dataset::new(doc.messages, doc.metadata)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    Csv,
    Tsv,
    JsonLines,
}

impl InputFormat {
    fn sniff(path: Option<&Path>, text: &str) -> InputFormat {
        let ext = path
            .and_then(|p| p.extension())
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        match ext.as_deref() {
            Some("jsonl") | Some("ndjson") => return InputFormat::JsonLines,
            Some("tsv") | Some("tab") => return InputFormat::Tsv,
            Some("csv") => return InputFormat::Csv,
            _ => {}
        }
        let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
        if first.trim_start().starts_with('{') {
            InputFormat::JsonLines
        } else if first.contains('\t') {
            InputFormat::Tsv
        } else {
            InputFormat::Csv
        }
    }
}

/// Result of ingestion: the dataset and any non-fatal warnings.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub dataset: Dataset,
    pub warnings: Vec<String>,
}

/// Reads a record file from disk. Input must be UTF-8.
pub fn ingest_dataset(
    path: &Path,
    base_year: Option<i32>,
    metadata: DatasetMetadata,
) -> Result<Ingested, CorpusError> {
    let bytes = std::fs::read(path)?;
    let text = String::from_utf8(bytes).map_err(|_| CorpusError::Encoding)?;
    let format = InputFormat::sniff(Some(path), &text);
    ingest_str(&text, format, base_year, metadata)
}

/// One raw record before timestamp resolution.
struct RawRecord {
    line: usize,
    id: String,
    speaker: String,
    time: String,
    content: String,
}

#[derive(Deserialize)]
struct JsonRecord {
    id: Option<serde_json::Value>,
    speaker: Option<String>,
    time: Option<String>,
    content: Option<String>,
}

pub fn ingest_str(
    text: &str,
    format: InputFormat,
    base_year: Option<i32>,
    metadata: DatasetMetadata,
) -> Result<Ingested, CorpusError> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let records = match format {
        InputFormat::JsonLines => read_json_lines(text)?,
        InputFormat::Csv => read_delimited(text, b',', true)?,
        InputFormat::Tsv => read_delimited(text, b'\t', false)?,
    };

    let mut clock = YearClock::new(base_year);
    let mut messages = Vec::with_capacity(records.len());
    let mut seen: HashMap<MessageId, usize> = HashMap::new();
    for rec in records {
        let id: MessageId = rec.id.parse().map_err(|_| CorpusError::InvalidId {
            line: rec.line,
            value: rec.id.clone(),
        })?;
        if let Some(&first) = seen.get(&id) {
            return Err(CorpusError::DuplicateId { id, first, second: rec.line });
        }
        seen.insert(id, rec.line);
        let timestamp = clock.resolve(&rec.time, rec.line)?;
        let (speaker_role, speaker_alias) = parse_speaker(&rec.speaker);
        let media_markers = MediaMarker::extract(&rec.content);
        if rec.content.is_empty() && media_markers.is_empty() {
            return Err(CorpusError::EmptyContent { line: rec.line, id });
        }
        messages.push(Message {
            id,
            speaker_role,
            speaker_alias,
            timestamp,
            content: rec.content,
            media_markers,
        });
    }

    let mut warnings = Vec::new();
    if messages.is_empty() {
        tracing::warn!("0 messages");
        warnings.push("0 messages".to_string());
    } else {
        tracing::info!(count = messages.len(), "ingested messages");
    }
    let dataset = Dataset::new(messages, metadata)?;
    Ok(Ingested { dataset, warnings })
}

fn read_json_lines(text: &str) -> Result<Vec<RawRecord>, CorpusError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(raw).map_err(|e| CorpusError::Record {
            line,
            message: e.to_string(),
        })?;
        let id = match rec.id {
            Some(serde_json::Value::String(s)) => s,
            Some(other) => other.to_string(),
            None => return Err(CorpusError::MissingField { line, field: "id" }),
        };
        out.push(RawRecord {
            line,
            id,
            speaker: rec.speaker.ok_or(CorpusError::MissingField { line, field: "speaker" })?,
            time: rec.time.ok_or(CorpusError::MissingField { line, field: "time" })?,
            content: rec.content.ok_or(CorpusError::MissingField { line, field: "content" })?,
        });
    }
    Ok(out)
}

fn read_delimited(text: &str, delimiter: u8, quoting: bool) -> Result<Vec<RawRecord>, CorpusError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .quoting(quoting)
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| CorpusError::Record { line: 1, message: e.to_string() })?
        .clone();
    let column = |name: &'static str| {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
            .ok_or(CorpusError::MissingField { line: 1, field: name })
    };
    if headers.is_empty() || headers.iter().all(|h| h.trim().is_empty()) {
        return Ok(Vec::new());
    }
    let (id_col, speaker_col, time_col, content_col) =
        (column("id")?, column("speaker")?, column("time")?, column("content")?);

    let mut out = Vec::new();
    for result in reader.records() {
        let record = result.map_err(|e| CorpusError::Record {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        let field = |col: usize, name: &'static str| {
            record
                .get(col)
                .map(str::to_string)
                .ok_or(CorpusError::MissingField { line, field: name })
        };
        out.push(RawRecord {
            line,
            id: field(id_col, "id")?,
            speaker: field(speaker_col, "speaker")?,
            time: field(time_col, "time")?,
            content: field(content_col, "content")?,
        });
    }
    Ok(out)
}

fn parse_speaker(raw: &str) -> (SpeakerRole, Option<String>) {
    let name = raw.trim();
    if name.eq_ignore_ascii_case("designer") {
        (SpeakerRole::Designer, None)
    } else if name.eq_ignore_ascii_case("user") || name.is_empty() {
        (SpeakerRole::User, None)
    } else {
        (SpeakerRole::User, Some(name.to_string()))
    }
}

/// Resolves year-less `MM/DD HH:MM` stamps against a base year, moving to the
/// next year whenever the month goes backwards.
struct YearClock {
    year: Option<i32>,
    last_month: Option<u32>,
}

impl YearClock {
    fn new(base_year: Option<i32>) -> Self {
        Self { year: base_year, last_month: None }
    }

    fn resolve(&mut self, raw: &str, line: usize) -> Result<NaiveDateTime, CorpusError> {
        let value = raw.trim();
        let malformed = || CorpusError::MalformedTimestamp { line, value: value.to_string() };

        for fmt in ["%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M", "%Y/%m/%d %H:%M"] {
            if let Ok(ts) = NaiveDateTime::parse_from_str(value, fmt) {
                self.last_month = Some(ts.month());
                self.year = Some(ts.year());
                return Ok(ts);
            }
        }
        for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S"] {
            if let Ok(ts) = NaiveDateTime::parse_from_str(value, fmt) {
                self.last_month = Some(ts.month());
                self.year = Some(ts.year());
                return Ok(ts.with_second(0).expect("zero seconds is valid"));
            }
        }

        let (date, time) = value.split_once(char::is_whitespace).ok_or_else(malformed)?;
        let (month, day) = date.split_once('/').ok_or_else(malformed)?;
        let month: u32 = month.parse().map_err(|_| malformed())?;
        let day: u32 = day.parse().map_err(|_| malformed())?;
        let time = chrono::NaiveTime::parse_from_str(time.trim(), "%H:%M").map_err(|_| malformed())?;
        let mut year = self.year.ok_or_else(|| CorpusError::MissingBaseYear {
            line,
            value: value.to_string(),
        })?;
        if matches!(self.last_month, Some(prev) if month < prev) {
            year += 1;
        }
        let date = NaiveDate::from_ymd_opt(year, month, day).ok_or_else(malformed)?;
        self.year = Some(year);
        self.last_month = Some(month);
        Ok(date.and_time(time))
    }
}
