//! Chunk-level and item-level coders.
//!
//! Both present a chunk's messages one per line as `id: role: content`.
//! Context messages carry a `[context] ` prefix; item-level lines are also
//! numbered so the response's numbered tag lines can be matched back.

use std::collections::HashSet;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::{NormalizedLabel, RawCodeInstance};
use crate::corpus::{Dataset, Message, MessageId};
use crate::gateway::template::{
    chunk_template, item_template, verb_template, CODING_NOTES, CONVERSATION, MESSAGES_LENGTH,
    RESEARCH_QUESTION,
};
use crate::gateway::{render_prompt, Bindings, Gateway, GatewayError, TemplateError};
use crate::grammar::{parse_chunk_response, parse_item_response, ChunkCodebookResponse, ItemTagResponse, ParseError};
use crate::segmenter::Chunk;

pub const CONTEXT_MARK: &str = "[context]";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("chunk {chunk} references unknown message {id}")]
    UnknownMessage { chunk: usize, id: MessageId },
    #[error("research question is empty")]
    MissingResearchQuestion,
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("unit {unit}: {source}")]
    Parse {
        unit: usize,
        #[source]
        source: ParseError,
        raw: String,
    },
}

/// Research-question and coding-notes bindings shared by every template.
pub fn base_bindings(dataset: &Dataset) -> Result<Bindings, PipelineError> {
    let rq = dataset.research_question().trim();
    if rq.is_empty() {
        return Err(PipelineError::MissingResearchQuestion);
    }
    let notes = dataset.coding_notes().trim();
    let notes = if notes.is_empty() { String::new() } else { format!("Coding notes: {notes}") };
    Ok(Bindings::new()
        .with(RESEARCH_QUESTION, format!("Research question: {rq}"))
        .with(CODING_NOTES, notes))
}

fn single_line(text: &str) -> String {
    text.split(['\n', '\r']).filter(|s| !s.is_empty()).collect::<Vec<_>>().join(" ")
}

pub fn present_line(message: &Message, context: bool, number: Option<usize>) -> String {
    let mut line = String::new();
    if let Some(n) = number {
        line.push_str(&format!("{n}. "));
    }
    if context {
        line.push_str(CONTEXT_MARK);
        line.push(' ');
    }
    line.push_str(&format!("{}: {}: {}", message.id, message.speaker_role, single_line(&message.content)));
    line
}

/// Messages in presentation order with their context flag.
pub fn presented_messages<'a>(chunk: &Chunk, dataset: &'a Dataset) -> Result<Vec<(&'a Message, bool)>, PipelineError> {
    chunk
        .presented_ids()
        .map(|(id, ctx)| {
            dataset
                .get(id)
                .map(|m| (m, ctx))
                .ok_or(PipelineError::UnknownMessage { chunk: chunk.index, id })
        })
        .collect()
}

pub fn render_conversation(presented: &[(&Message, bool)], numbered: bool) -> String {
    presented
        .iter()
        .enumerate()
        .map(|(i, (m, ctx))| present_line(m, *ctx, numbered.then_some(i + 1)))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkLevelResult {
    pub chunk: usize,
    pub fixture_key: String,
    pub raw_response: String,
    pub parsed: ChunkCodebookResponse,
    pub warnings: Vec<String>,
    pub instances: Vec<RawCodeInstance>,
}

fn squash(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Core message a quote came from: exact match, then containment either way.
pub fn match_quote(quote: &str, core: &[&Message]) -> Option<MessageId> {
    let q = squash(quote.trim_end_matches("...").trim_end_matches('\u{2026}'));
    if q.is_empty() {
        return None;
    }
    let contents: Vec<(MessageId, String)> = core.iter().map(|m| (m.id, squash(&m.content))).collect();
    contents
        .iter()
        .find(|(_, c)| *c == q)
        .or_else(|| contents.iter().find(|(_, c)| c.contains(&q)))
        .or_else(|| contents.iter().find(|(_, c)| c.chars().count() >= 8 && q.contains(c.as_str())))
        .map(|(id, _)| *id)
}

pub fn run_chunk_level(chunk: &Chunk, dataset: &Dataset, gateway: &Gateway) -> Result<ChunkLevelResult, PipelineError> {
    let presented = presented_messages(chunk, dataset)?;
    let bindings = base_bindings(dataset)?.with(CONVERSATION, render_conversation(&presented, false));
    let (prompt, _) = render_prompt(&chunk_template(), &bindings)?;
    let exchange = gateway.complete(&prompt)?;
    let (parsed, mut warnings) = parse_chunk_response(&exchange.response).map_err(|source| PipelineError::Parse {
        unit: chunk.index,
        source,
        raw: exchange.response.clone(),
    })?;

    let core: Vec<&Message> = presented.iter().filter(|(_, ctx)| !ctx).map(|(m, _)| *m).collect();
    let mut instances = Vec::with_capacity(parsed.entries.len());
    for (ordinal, entry) in parsed.entries.iter().enumerate() {
        let mut ids = Vec::new();
        for quote in &entry.quotes {
            match match_quote(quote, &core) {
                Some(id) => ids.push(id),
                None => warnings.push(format!("quote for {:?} matches no core message: {quote:?}", entry.label)),
            }
        }
        instances.push(RawCodeInstance {
            raw_label: entry.label.clone(),
            chunk: chunk.index,
            ordinal,
            message_ids: ids,
            definition: Some(entry.definition.clone()).filter(|d| !d.is_empty()),
        });
    }
    for w in &warnings {
        tracing::warn!(chunk = chunk.index, "{w}");
    }
    Ok(ChunkLevelResult {
        chunk: chunk.index,
        fixture_key: exchange.fixture_key,
        raw_response: exchange.response,
        parsed,
        warnings,
        instances,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CarryState {
    pub summary: String,
    pub notes: String,
}

impl CarryState {
    pub fn is_empty(&self) -> bool {
        self.summary.trim().is_empty() && self.notes.trim().is_empty()
    }

    pub fn preamble(&self) -> String {
        if self.is_empty() {
            String::new()
        } else {
            format!("Previous summary: {}\nPrevious notes: {}\n\n", self.summary.trim(), self.notes.trim())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemLevelResult {
    pub chunk: usize,
    pub fixture_key: String,
    pub raw_response: String,
    pub parsed: ItemTagResponse,
    /// Ids aligned with `parsed.tags_per_message`.
    pub presented_ids: Vec<MessageId>,
    pub context: Vec<bool>,
    pub instances: Vec<RawCodeInstance>,
}

pub fn item_bindings(chunk: &Chunk, dataset: &Dataset, carry: &CarryState) -> Result<Bindings, PipelineError> {
    let presented = presented_messages(chunk, dataset)?;
    let conversation = format!("{}{}", carry.preamble(), render_conversation(&presented, true));
    Ok(base_bindings(dataset)?
        .with(MESSAGES_LENGTH, presented.len().to_string())
        .with(CONVERSATION, conversation))
}

pub fn run_item_level(
    chunk: &Chunk,
    dataset: &Dataset,
    gateway: &Gateway,
    carry: &CarryState,
    use_verb_phrases: bool,
) -> Result<(ItemLevelResult, CarryState), PipelineError> {
    let presented = presented_messages(chunk, dataset)?;
    let template = if use_verb_phrases { verb_template() } else { item_template() };
    let (prompt, _) = render_prompt(&template, &item_bindings(chunk, dataset, carry)?)?;
    let exchange = gateway.complete(&prompt)?;
    let parsed = parse_item_response(&exchange.response, presented.len()).map_err(|source| PipelineError::Parse {
        unit: chunk.index,
        source,
        raw: exchange.response.clone(),
    })?;

    let mut instances = Vec::new();
    for ((message, ctx), tags) in presented.iter().zip(&parsed.tags_per_message) {
        if *ctx {
            continue;
        }
        for tag in tags {
            instances.push(RawCodeInstance {
                raw_label: tag.clone(),
                chunk: chunk.index,
                ordinal: instances.len(),
                message_ids: vec![message.id],
                definition: None,
            });
        }
    }
    let next = CarryState { summary: parsed.summary.clone(), notes: parsed.notes.clone() };
    Ok((
        ItemLevelResult {
            chunk: chunk.index,
            fixture_key: exchange.fixture_key,
            raw_response: exchange.response,
            parsed,
            presented_ids: presented.iter().map(|(m, _)| m.id).collect(),
            context: presented.iter().map(|(_, c)| *c).collect(),
            instances,
        },
        next,
    ))
}

fn verb_lexicon() -> &'static HashSet<&'static str> {
    static LEXICON: OnceLock<HashSet<&'static str>> = OnceLock::new();
    LEXICON.get_or_init(|| {
        include_str!("../data/verbs.txt").lines().map(str::trim).filter(|l| !l.is_empty()).collect()
    })
}

pub fn verb_lexicon_size() -> usize {
    verb_lexicon().len()
}

/// True when the label's first token is a known verb base form.
pub fn check_verb_phrase(label: &NormalizedLabel) -> bool {
    label.tokens().next().is_some_and(|t| verb_lexicon().contains(t))
}
