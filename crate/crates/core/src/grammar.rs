//! The three structured response formats the coders ask for, each with a
//! renderer (used by the mock backend) and a parser.
//!
//! Parsers are strict about labels and tag counts and lenient about
//! everything else: missing quotes, stray `===` fences, blank lines.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("response has no \"Label:\" line (raw: {raw:?})")]
    MissingLabel { raw: String },
    #[error("response has an empty label (raw: {raw:?})")]
    EmptyLabel { raw: String },
    #[error("response has no \"{section}\" section")]
    MissingSection { section: &'static str },
    #[error("tag-count mismatch (got {got}, expected {expected})")]
    TagCountMismatch { got: usize, expected: usize },
    #[error("line {position} is numbered {found}")]
    OutOfSequence { position: usize, found: usize },
    #[error("message {message} has no tags")]
    EmptyTags { message: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicLabelResponse {
    pub thought: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkCodeEntry {
    pub label: String,
    pub definition: String,
    pub quotes: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkCodebookResponse {
    pub entries: Vec<ChunkCodeEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemTagResponse {
    pub thoughts: String,
    pub tags_per_message: Vec<Vec<String>>,
    pub summary: String,
    pub notes: String,
}

const FENCE: &str = "===";

fn strip_fences(text: &str) -> &str {
    let mut t = text.trim();
    while let Some(rest) = t.strip_prefix(FENCE) {
        t = rest.trim_start();
    }
    while let Some(rest) = t.strip_suffix(FENCE) {
        t = rest.trim_end();
    }
    t
}

pub fn render_topic_response(r: &TopicLabelResponse) -> String {
    format!("{FENCE}\nThought: {}\nLabel: {}\n{FENCE}", r.thought, r.label)
}

/// Accepts both the one-line form `=== Thought: … Label: … ===` and the
/// multi-line form.
pub fn parse_topic_response(raw: &str) -> Result<TopicLabelResponse, ParseError> {
    let body = strip_fences(raw);
    let Some(at) = body.find("Label:") else {
        return Err(ParseError::MissingLabel { raw: raw.to_string() });
    };
    let before = &body[..at];
    let after = &body[at + "Label:".len()..];
    let label = after
        .lines()
        .next()
        .unwrap_or("")
        .split(FENCE)
        .next()
        .unwrap_or("")
        .trim()
        .to_string();
    if label.is_empty() {
        return Err(ParseError::EmptyLabel { raw: raw.to_string() });
    }
    let thought = match before.find("Thought:") {
        Some(t) => before[t + "Thought:".len()..].trim().to_string(),
        None => before.trim().to_string(),
    };
    Ok(TopicLabelResponse { thought, label })
}

pub fn render_chunk_response(r: &ChunkCodebookResponse) -> String {
    let mut out = String::from(FENCE);
    out.push('\n');
    for e in &r.entries {
        out.push_str(&format!("## Label: {}\nDefinition: {}\n", e.label, e.definition));
        for q in &e.quotes {
            out.push_str(&format!("- \"{q}\"\n"));
        }
    }
    out
}

fn unquote(text: &str) -> String {
    let t = text.trim();
    let pairs = [('"', '"'), ('\u{201c}', '\u{201d}'), ('\'', '\'')];
    for (open, close) in pairs {
        if t.len() >= open.len_utf8() + close.len_utf8() && t.starts_with(open) && t.ends_with(close) {
            return t[open.len_utf8()..t.len() - close.len_utf8()].to_string();
        }
    }
    t.to_string()
}

/// Returns the parsed codebook and any warnings. A non-empty response with
/// no `## Label:` blocks yields an empty codebook and a warning.
pub fn parse_chunk_response(raw: &str) -> Result<(ChunkCodebookResponse, Vec<String>), ParseError> {
    let mut entries: Vec<ChunkCodeEntry> = Vec::new();
    let mut open = false;
    for line in raw.lines() {
        let line = line.trim();
        if line == FENCE || line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("##") {
            let rest = rest.trim_start();
            match rest.strip_prefix("Label:") {
                Some(label) => {
                    let (label, definition) = match label.split_once("Definition:") {
                        Some((l, d)) => (l.trim(), d.trim()),
                        None => (label.trim(), ""),
                    };
                    if label.is_empty() {
                        return Err(ParseError::EmptyLabel { raw: raw.to_string() });
                    }
                    entries.push(ChunkCodeEntry {
                        label: label.to_string(),
                        definition: definition.to_string(),
                        quotes: Vec::new(),
                    });
                    open = true;
                }
                None => open = false,
            }
            continue;
        }
        let Some(entry) = entries.last_mut().filter(|_| open) else { continue };
        if let Some(def) = line.strip_prefix("Definition:") {
            entry.definition = def.trim().to_string();
        } else if let Some(q) = line.strip_prefix("- ").or_else(|| line.strip_prefix('-')) {
            let q = unquote(q);
            if !q.is_empty() {
                entry.quotes.push(q);
            }
        } else if entry.quotes.is_empty() && !entry.definition.is_empty() {
            entry.definition.push(' ');
            entry.definition.push_str(line);
        }
    }
    let mut warnings = Vec::new();
    if entries.is_empty() && !raw.trim().is_empty() {
        warnings.push("response contained no \"## Label:\" entries".to_string());
    }
    Ok((ChunkCodebookResponse { entries }, warnings))
}

/// The header word differs between the plain and verb-phrase templates.
pub fn render_item_response(r: &ItemTagResponse, verb_phrases: bool) -> String {
    let header = if verb_phrases { "Interpretations" } else { "Tags" };
    let mut out = format!("{FENCE}\nThoughts: {}\n", r.thoughts);
    out.push_str(&format!("{header} for each message ({} in total):\n", r.tags_per_message.len()));
    for (i, tags) in r.tags_per_message.iter().enumerate() {
        out.push_str(&format!("{}. {}\n", i + 1, tags.join("; ")));
    }
    out.push_str(&format!("Summary: {}\nNotes: {}\n", r.summary, r.notes));
    out
}

fn header_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?mi)^[ \t]*(?:tags|interpretations|phrases)[ \t]+for[ \t]+each[ \t]+message\b[^\n]*$")
            .unwrap()
    })
}

fn numbered_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(\d+)[.)]\s*(.*)$").unwrap())
}

#[derive(Clone, Copy)]
enum Section {
    Thoughts,
    Summary,
    Notes,
}

fn section_re(section: Section) -> &'static Regex {
    static RES: OnceLock<[Regex; 3]> = OnceLock::new();
    let res = RES.get_or_init(|| {
        ["Thoughts", "Summary", "Notes"].map(|name| Regex::new(&format!(r"(?m)^[ \t]*{name}:")).unwrap())
    });
    &res[section as usize]
}

pub fn split_tags(line: &str) -> Vec<String> {
    line.split(';').map(str::trim).filter(|t| !t.is_empty()).map(str::to_string).collect()
}

/// `expected` is the number of presented messages.
pub fn parse_item_response(raw: &str, expected: usize) -> Result<ItemTagResponse, ParseError> {
    let body = strip_fences(raw);
    let header = header_re()
        .find(body)
        .ok_or(ParseError::MissingSection { section: "Tags for each message" })?;

    let head = &body[..header.start()];
    let thoughts = match section_re(Section::Thoughts).find(head) {
        Some(m) => head[m.end()..].trim(),
        None => head.trim(),
    };

    let rest = &body[header.end()..];
    let summary_at = section_re(Section::Summary).find(rest);
    let notes_at = section_re(Section::Notes).find(rest);
    let list_end = [summary_at.map(|m| m.start()), notes_at.map(|m| m.start())]
        .into_iter()
        .flatten()
        .min()
        .unwrap_or(rest.len());

    let mut lines: Vec<(usize, String)> = Vec::new();
    for line in rest[..list_end].lines() {
        let line = line.trim();
        if line.is_empty() || line.chars().all(|c| c == '.' || c == '\u{2026}') {
            continue;
        }
        match numbered_re().captures(line) {
            Some(cap) => {
                let n = cap[1].parse().unwrap_or(usize::MAX);
                lines.push((n, cap[2].to_string()));
            }
            None => {
                if let Some(last) = lines.last_mut() {
                    last.1.push(' ');
                    last.1.push_str(line);
                }
            }
        }
    }
    if lines.len() != expected {
        return Err(ParseError::TagCountMismatch { got: lines.len(), expected });
    }
    let mut tags_per_message = Vec::with_capacity(lines.len());
    for (i, (n, text)) in lines.iter().enumerate() {
        if *n != i + 1 {
            return Err(ParseError::OutOfSequence { position: i + 1, found: *n });
        }
        let tags = split_tags(text);
        if tags.is_empty() {
            return Err(ParseError::EmptyTags { message: i + 1 });
        }
        tags_per_message.push(tags);
    }

    let summary = match (summary_at, notes_at) {
        (Some(s), Some(n)) if n.start() > s.end() => rest[s.end()..n.start()].trim(),
        (Some(s), _) => rest[s.end()..].trim(),
        _ => "",
    };
    let notes = match notes_at {
        Some(n) if summary_at.is_none_or(|s| n.start() > s.start()) => rest[n.end()..].trim(),
        _ => "",
    };
    Ok(ItemTagResponse {
        thoughts: thoughts.to_string(),
        tags_per_message,
        summary: summary.to_string(),
        notes: notes.to_string(),
    })
}
