//! Prompt templates and placeholder substitution.
//!
//! Placeholders look like `{Name}`, `#{Name}` or `${Name}`; the sigil is part
//! of the token and disappears on substitution. Braced text containing spaces
//! (the output-format hints) is not a placeholder.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const RESEARCH_QUESTION: &str = "ResearchQuestion";
pub const CODING_NOTES: &str = "CodingNotes";
pub const MESSAGES_LENGTH: &str = "Messages.length";
pub const DOCUMENTS: &str = "Documents";
pub const KEYWORDS: &str = "Keywords";
pub const CONVERSATION: &str = "Conversation";

pub const KNOWN_PLACEHOLDERS: [&str; 6] =
    [RESEARCH_QUESTION, CODING_NOTES, MESSAGES_LENGTH, DOCUMENTS, KEYWORDS, CONVERSATION];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("unbound placeholder: {0}")]
    Unbound(String),
    #[error("template {template} uses undeclared placeholder {placeholder}")]
    Undeclared { template: String, placeholder: String },
    #[error("placeholder {0} is not a recognised name")]
    Unknown(String),
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[#$]?\{([A-Za-z][A-Za-z0-9_.]*)\}").unwrap())
}

/// Placeholder names occurring in `text`, in order of first appearance.
pub fn placeholders_in(text: &str) -> Vec<String> {
    let mut seen = Vec::new();
    for cap in placeholder_re().captures_iter(text) {
        let name = cap[1].to_string();
        if !seen.contains(&name) {
            seen.push(name);
        }
    }
    seen
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub system_text: String,
    pub user_text: String,
    pub placeholders: BTreeSet<String>,
}

impl PromptTemplate {
    /// Builds a template whose declared set is exactly the placeholders found
    /// in its texts.
    pub fn new(
        name: impl Into<String>,
        system_text: impl Into<String>,
        user_text: impl Into<String>,
    ) -> Result<Self, TemplateError> {
        let system_text = system_text.into();
        let user_text = user_text.into();
        let mut placeholders = BTreeSet::new();
        for p in placeholders_in(&system_text).into_iter().chain(placeholders_in(&user_text)) {
            placeholders.insert(p);
        }
        let template = Self { name: name.into(), system_text, user_text, placeholders };
        template.validate()?;
        Ok(template)
    }

    pub fn validate(&self) -> Result<(), TemplateError> {
        for p in &self.placeholders {
            if !KNOWN_PLACEHOLDERS.contains(&p.as_str()) {
                return Err(TemplateError::Unknown(p.clone()));
            }
        }
        for text in [&self.system_text, &self.user_text] {
            for p in placeholders_in(text) {
                if !self.placeholders.contains(&p) {
                    return Err(TemplateError::Undeclared {
                        template: self.name.clone(),
                        placeholder: p,
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub template: String,
    pub system: String,
    pub user: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Bindings(BTreeMap<String, String>);

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, value: impl Into<String>) -> Self {
        self.0.insert(name.to_string(), value.into());
        self
    }

    pub fn set(&mut self, name: &str, value: impl Into<String>) {
        self.0.insert(name.to_string(), value.into());
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0.get(name).map(String::as_str)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }
}

/// Substitutes every placeholder. Returns the names of bindings the template
/// never used alongside the rendered pair.
pub fn render_prompt(
    template: &PromptTemplate,
    bindings: &Bindings,
) -> Result<(RenderedPrompt, Vec<String>), TemplateError> {
    for name in &template.placeholders {
        if bindings.get(name).is_none() {
            return Err(TemplateError::Unbound(name.clone()));
        }
    }
    let substitute = |text: &str| -> String {
        placeholder_re()
            .replace_all(text, |cap: &regex::Captures| {
                bindings.get(&cap[1]).unwrap_or_default().to_string()
            })
            .into_owned()
    };
    let unused: Vec<String> = bindings
        .names()
        .filter(|n| !template.placeholders.contains(*n))
        .map(str::to_string)
        .collect();
    for name in &unused {
        tracing::warn!(template = %template.name, binding = %name, "binding not used by template");
    }
    Ok((
        RenderedPrompt {
            template: template.name.clone(),
            system: substitute(&template.system_text),
            user: substitute(&template.user_text),
        },
        unused,
    ))
}

pub const TOPIC_TEMPLATE: &str = "topic_modeling";
pub const CHUNK_TEMPLATE: &str = "chunk_level";
pub const ITEM_TEMPLATE: &str = "item_level";
pub const VERB_TEMPLATE: &str = "item_level_verb";

const TOPIC_SYSTEM: &str = "You are an expert in thematic analysis with grounded theory, working on open coding. You identified a topic from the input quotes. Each quote is independent from another. #{ResearchQuestion} #{CodingNotes}

Always follow the output format:
===
Thought: {What is the most common theme among the input quotes? Do not over-interpret the data.}
Label: {A single label that faithfully describes the topic}
===";

const TOPIC_USER: &str = "Quotes: {Documents}
Keywords: {Keywords}";

const CHUNK_SYSTEM: &str = "Hi ChatGPT, I want to analyze the following interaction in one of Physics Lab's online message groups. Please give me a codebook to analyze factors within this interaction that could contribute to the research. #{ResearchQuestion} #{CodingNotes}

For each code, try to find 3 quotes. Always follow the output format:
===
## Label: A label of code 1
Definition: A definition of code 1
- \"Example quote 1\"
- \"Example quote 2\"
## ...";

const CHUNK_USER: &str = "{Conversation}";

const ITEM_SYSTEM: &str = "You are an expert in thematic analysis with grounded theory, working on open coding. Your goal is to identify multiple low-level tags for each message. When writing tags, balance between specifics and generalizability across messages. ${ResearchQuestion} ${CodingNotes}

Always follow the output format:
===
Thoughts: {A paragraph of plans and guiding questions about analyzing the conversation from multiple theoretical angles}
Tags for each message (${Messages.length} in total):
1. tag 1; tag 2; tag 3...
...
${Messages.length}. tag 4; tag 5; tag 6...
Summary: {A somehow detailed summary of the conversation, including previous ones}
Notes: {Notes and hypotheses about the conversation until now}";

const ITEM_USER: &str = "{Conversation}";

/// Where the verb instruction goes, and the two output-template rewrites.
const OUTPUT_FORMAT_MARKER: &str = "Always follow the output format:";
pub const VERB_INSTRUCTION: &str = "Always use verb phrases.";
pub const VERB_REWRITES: [(&str, &str); 2] = [("Tags", "Interpretations"), ("tag", "phrase")];

pub fn topic_template() -> PromptTemplate {
    PromptTemplate::new(TOPIC_TEMPLATE, TOPIC_SYSTEM, TOPIC_USER).expect("builtin template")
}

pub fn chunk_template() -> PromptTemplate {
    PromptTemplate::new(CHUNK_TEMPLATE, CHUNK_SYSTEM, CHUNK_USER).expect("builtin template")
}

pub fn item_template() -> PromptTemplate {
    PromptTemplate::new(ITEM_TEMPLATE, ITEM_SYSTEM, ITEM_USER).expect("builtin template")
}

/// The item-level template with the verb instruction inserted and, inside the
/// output template only, whole-word "Tags" and "tag" rewritten.
pub fn verb_template() -> PromptTemplate {
    let (role, format) = ITEM_SYSTEM
        .split_once(OUTPUT_FORMAT_MARKER)
        .expect("item template has an output format");
    let mut format = format.to_string();
    for (from, to) in VERB_REWRITES {
        format = replace_word(&format, from, to);
    }
    let system = format!("{role}{VERB_INSTRUCTION} {OUTPUT_FORMAT_MARKER}{format}");
    PromptTemplate::new(VERB_TEMPLATE, system, ITEM_USER).expect("builtin template")
}

fn replace_word(text: &str, from: &str, to: &str) -> String {
    let re = Regex::new(&format!(r"\b{}\b", regex::escape(from))).unwrap();
    re.replace_all(text, to).into_owned()
}

pub fn template_by_name(name: &str) -> Option<PromptTemplate> {
    match name {
        TOPIC_TEMPLATE => Some(topic_template()),
        CHUNK_TEMPLATE => Some(chunk_template()),
        ITEM_TEMPLATE => Some(item_template()),
        VERB_TEMPLATE => Some(verb_template()),
        _ => None,
    }
}
