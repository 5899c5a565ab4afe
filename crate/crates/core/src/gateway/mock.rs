//! Deterministic offline backend.
//!
//! The response is a function of the run seed and the rendered prompts only.
//! It reads what it needs from the prompt (message count, presented ids and
//! contents) and emits text in the grammar the template asks for.

use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use sha2::{Digest, Sha256};

use super::template::{CHUNK_TEMPLATE, ITEM_TEMPLATE, TOPIC_TEMPLATE, VERB_TEMPLATE};
use super::{ChatBackend, ChatRequest, GatewayError};
use crate::grammar::{
    render_chunk_response, render_item_response, render_topic_response, ChunkCodeEntry,
    ChunkCodebookResponse, ItemTagResponse, TopicLabelResponse,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockPayload {
    Topic(TopicLabelResponse),
    Chunk(ChunkCodebookResponse),
    Item { response: ItemTagResponse, verb_phrases: bool },
    Free(String),
}

impl MockPayload {
    pub fn render(&self) -> String {
        match self {
            MockPayload::Topic(r) => render_topic_response(r),
            MockPayload::Chunk(r) => render_chunk_response(r),
            MockPayload::Item { response, verb_phrases } => render_item_response(response, *verb_phrases),
            MockPayload::Free(text) => text.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    seed: u64,
}

/// A presented message as the mock sees it in the user prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
struct PresentedLine {
    index: u32,
    context: bool,
    content: String,
}

fn presented_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^(?:\d+\.\s+)?(\[context\]\s+)?\d+-(\d+): (?:Designer|User): (.*)$").unwrap()
    })
}

fn count_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"for each message \((\d+) in total\)").unwrap())
}

fn presented_lines(user: &str) -> Vec<PresentedLine> {
    user.lines()
        .filter_map(|line| presented_re().captures(line))
        .map(|cap| PresentedLine {
            index: cap[2].parse().unwrap_or(0),
            context: cap.get(1).is_some(),
            content: cap[3].to_string(),
        })
        .collect()
}

const WORDS: &[&str] = &[
    "the", "group", "users", "designer", "asks", "about", "features,", "(maybe)", "\"quoted\"",
    "ideas;", "100%", "naive", "physics", "lab", "update", "feedback.", "community", "why?",
    "teachers", "students", "share", "links", "-", "a/b", "it's", "emoji", "#tag", "[note]",
    "rapport", "questions", "version", "bug", "thanks!", "plans", "Z", "etc.", "...", "x2",
];

const LABELS: &[&str] = &[
    "feature request", "user feedback", "gratitude", "role identification", "bug report",
    "community engagement", "update announcement", "resource sharing", "greeting",
    "technical support", "participatory design", "humor", "platform comparison",
    "educational use", "feature explanation", "user onboarding",
];

const LETTERS: [char; 3] = ['a', 'b', 'c'];

fn sentence(rng: &mut ChaCha8Rng, min: usize, max: usize) -> String {
    let n = rng.gen_range(min..=max);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn digest(&self, request: &ChatRequest) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((request.system.len() as u64).to_le_bytes());
        h.update(request.system.as_bytes());
        h.update(request.user.as_bytes());
        h.finalize().into()
    }

    /// The structured value behind the response text.
    pub fn payload(&self, request: &ChatRequest) -> MockPayload {
        let digest = self.digest(request);
        let tag = hex::encode(&digest[..4]);
        let mut rng = ChaCha8Rng::from_seed(digest);
        match request.template.as_str() {
            TOPIC_TEMPLATE => MockPayload::Topic(TopicLabelResponse {
                thought: sentence(&mut rng, 3, 14),
                label: format!("{} topic {tag}", LABELS.choose(&mut rng).unwrap()),
            }),
            CHUNK_TEMPLATE => MockPayload::Chunk(self.chunk_payload(&mut rng, &request.user)),
            ITEM_TEMPLATE | VERB_TEMPLATE => {
                let verb_phrases = request.template == VERB_TEMPLATE;
                MockPayload::Item {
                    response: self.item_payload(&mut rng, request, verb_phrases),
                    verb_phrases,
                }
            }
            _ => MockPayload::Free(format!("mock response {tag}")),
        }
    }

    fn chunk_payload(&self, rng: &mut ChaCha8Rng, user: &str) -> ChunkCodebookResponse {
        let core: Vec<String> = presented_lines(user)
            .into_iter()
            .filter(|l| !l.context && !l.content.trim().is_empty())
            .map(|l| l.content.trim().to_string())
            .collect();
        let n = rng.gen_range(1..=4);
        let labels: Vec<&str> = LABELS.choose_multiple(rng, n).cloned().collect();
        let entries = labels
            .into_iter()
            .map(|label| {
                let k = rng.gen_range(0..=3.min(core.len()));
                let mut quotes: Vec<String> = core.choose_multiple(rng, k).cloned().collect();
                quotes.dedup();
                ChunkCodeEntry { label: label.to_string(), definition: sentence(rng, 2, 10), quotes }
            })
            .collect();
        ChunkCodebookResponse { entries }
    }

    fn item_payload(&self, rng: &mut ChaCha8Rng, request: &ChatRequest, verb: bool) -> ItemTagResponse {
        let lines = presented_lines(&request.user);
        let n = count_re()
            .captures(&request.system)
            .and_then(|c| c[1].parse::<usize>().ok())
            .unwrap_or(lines.len());
        let tags_per_message = (0..n)
            .map(|k| {
                let m = lines.get(k).map(|l| l.index as usize).unwrap_or(k + 1);
                let count = rng.gen_range(1..=LETTERS.len());
                LETTERS[..count]
                    .iter()
                    .enumerate()
                    .map(|(j, letter)| match (verb, j) {
                        (false, _) => format!("t{m}{letter}"),
                        (true, 0) => format!("verb{m} phrase{m}"),
                        (true, _) => format!("verb{m} phrase{m}{letter}"),
                    })
                    .collect()
            })
            .collect();
        let span = match (lines.first(), lines.last()) {
            (Some(a), Some(b)) => format!("messages {} to {}", a.index, b.index),
            _ => "the conversation".to_string(),
        };
        ItemTagResponse {
            thoughts: sentence(rng, 4, 20),
            tags_per_message,
            summary: format!("Covers {span}: {}", sentence(rng, 2, 12)),
            notes: sentence(rng, 1, 12),
        }
    }
}

impl ChatBackend for MockBackend {
    fn id(&self) -> &str {
        "mock"
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        Ok(self.payload(request).render())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::Sampling;
    use crate::grammar::parse_item_response;

    fn request(template: &str, system: &str, user: &str) -> ChatRequest {
        ChatRequest {
            template: template.into(),
            system: system.into(),
            user: user.into(),
            sampling: Sampling::default(),
        }
    }

    const FIVE: &str = "1. 2-10: User: hi\n2. 2-11: Designer: hello\n3. 2-12: User: [Emoji]\n4. 2-13: User: ok\n5. 2-14: User: bye";

    #[test]
    fn item_mock_has_one_line_per_message() {
        let req = request(ITEM_TEMPLATE, "Tags for each message (5 in total):", FIVE);
        let text = MockBackend::new(9).complete(&req).unwrap();
        let parsed = parse_item_response(&text, 5).unwrap();
        assert_eq!(parsed.tags_per_message.len(), 5);
        assert!(parsed.tags_per_message[0].iter().all(|t| t.starts_with("t10")));
        assert!(parsed.tags_per_message[4].iter().all(|t| t.starts_with("t14")));
    }

    #[test]
    fn verb_mock_uses_verb_tokens() {
        let req = request(VERB_TEMPLATE, "Interpretations for each message (5 in total):", FIVE);
        let MockPayload::Item { response, verb_phrases } = MockBackend::new(1).payload(&req) else {
            panic!("wrong payload kind");
        };
        assert!(verb_phrases);
        assert_eq!(response.tags_per_message[1][0], "verb11 phrase11");
    }

    #[test]
    fn same_seed_same_prompt_same_text() {
        let req = request(CHUNK_TEMPLATE, "s", FIVE);
        let a = MockBackend::new(7).complete(&req).unwrap();
        assert_eq!(a, MockBackend::new(7).complete(&req).unwrap());
        let other: Vec<String> = (0..20).map(|s| MockBackend::new(s).complete(&req).unwrap()).collect();
        assert!(other.iter().any(|o| *o != a));
    }

    #[test]
    fn chunk_quotes_come_from_core_messages() {
        let user = "[context] 2-1: User: old\n2-10: User: hi there\n2-11: Designer: hello all";
        for seed in 0..50 {
            let MockPayload::Chunk(r) = MockBackend::new(seed).payload(&request(CHUNK_TEMPLATE, "s", user)) else {
                panic!()
            };
            for e in r.entries {
                for q in e.quotes {
                    assert!(q == "hi there" || q == "hello all", "{q}");
                }
            }
        }
    }

    #[test]
    fn unknown_template_never_errors() {
        let req = request("other", "s", "u");
        assert!(MockBackend::new(0).complete(&req).unwrap().starts_with("mock response "));
    }
}
