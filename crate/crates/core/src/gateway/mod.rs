//! Chat-completion gateway with interchangeable backends.
//!
//! Every call goes through [`Gateway::complete`], which asks the backend for a
//! response, appends the exchange to the transcript and, when recording is
//! on, writes a fixture that the replay backend can serve later.

mod live;
mod mock;
mod store;
pub mod template;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use live::{LiveBackend, LiveConfig, RemoteEmbedder, TokenBucket};
pub use mock::{MockBackend, MockPayload};
pub use store::{FixtureStore, ReplayBackend, Transcript, TranscriptEntry};
pub use template::{render_prompt, Bindings, PromptTemplate, RenderedPrompt, TemplateError};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("gateway configuration: {0}")]
    Config(String),
    #[error("transport failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed endpoint response: {0}")]
    Malformed(String),
    #[error("no recorded fixture for key {key}")]
    ReplayMiss { key: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub model: String,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for Sampling {
    fn default() -> Self {
        Self { model: "gpt-4o".to_string(), temperature: 0.0, seed: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub template: String,
    pub system: String,
    pub user: String,
    pub sampling: Sampling,
}

impl ChatRequest {
    pub fn from_prompt(prompt: &RenderedPrompt, sampling: &Sampling) -> Self {
        Self {
            template: prompt.template.clone(),
            system: prompt.system.clone(),
            user: prompt.user.clone(),
            sampling: sampling.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub template: String,
    pub system: String,
    pub user: String,
    pub backend: String,
    pub sampling: Sampling,
    pub response: String,
    pub fixture_key: String,
}

/// Hex SHA-256 over a canonical JSON encoding of the request fields.
pub fn fixture_key(system: &str, user: &str, backend: &str, sampling: &Sampling) -> String {
    #[derive(Serialize)]
    struct KeyFields<'a> {
        backend: &'a str,
        sampling: &'a Sampling,
        system: &'a str,
        user: &'a str,
    }
    let bytes = serde_json::to_vec(&KeyFields { backend, sampling, system, user })
        .expect("key fields serialize");
    hex::encode(Sha256::digest(&bytes))
}

pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;

    /// Backend id that goes into the fixture key. Replay answers under the id
    /// of the backend that produced the recording.
    fn key_id(&self) -> &str {
        self.id()
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError>;
}

#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    sampling: Sampling,
    transcript: Arc<Transcript>,
    recorder: Option<Arc<FixtureStore>>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, sampling: Sampling) -> Self {
        Self { backend, sampling, transcript: Arc::new(Transcript::in_memory()), recorder: None }
    }

    pub fn with_transcript(mut self, transcript: Arc<Transcript>) -> Self {
        self.transcript = transcript;
        self
    }

    pub fn with_recorder(mut self, store: FixtureStore) -> Self {
        self.recorder = Some(Arc::new(store));
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn sampling(&self) -> &Sampling {
        &self.sampling
    }

    pub fn transcript(&self) -> &Arc<Transcript> {
        &self.transcript
    }

    pub fn complete(&self, prompt: &RenderedPrompt) -> Result<ChatExchange, GatewayError> {
        let request = ChatRequest::from_prompt(prompt, &self.sampling);
        let key = fixture_key(&request.system, &request.user, self.backend.key_id(), &request.sampling);
        let result = self.backend.complete(&request);
        let exchange = ChatExchange {
            template: request.template,
            system: request.system,
            user: request.user,
            backend: self.backend.id().to_string(),
            sampling: request.sampling,
            response: result.as_ref().cloned().unwrap_or_default(),
            fixture_key: key,
        };
        let error = result.as_ref().err().map(|e| e.to_string());
        self.transcript.append(exchange.clone(), error)?;
        let response = result?;
        debug_assert_eq!(response, exchange.response);
        if let Some(store) = &self.recorder {
            store.write(&exchange)?;
        }
        Ok(exchange)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Echo;
    impl ChatBackend for Echo {
        fn id(&self) -> &str {
            "echo"
        }
        fn complete(&self, r: &ChatRequest) -> Result<String, GatewayError> {
            if r.user == "fail" {
                return Err(GatewayError::Malformed("nope".into()));
            }
            Ok(format!("{}|{}", r.system, r.user))
        }
    }

    fn prompt(user: &str) -> RenderedPrompt {
        RenderedPrompt { template: "t".into(), system: "s".into(), user: user.into() }
    }

    #[test]
    fn key_depends_on_every_field() {
        let s = Sampling::default();
        let base = fixture_key("a", "b", "mock", &s);
        assert_eq!(base, fixture_key("a", "b", "mock", &s));
        assert_ne!(base, fixture_key("a", "c", "mock", &s));
        assert_ne!(base, fixture_key("x", "b", "mock", &s));
        assert_ne!(base, fixture_key("a", "b", "live", &s));
        assert_ne!(base, fixture_key("a", "b", "mock", &Sampling { seed: Some(1), ..s.clone() }));
        assert_ne!(base, fixture_key("a", "b", "mock", &Sampling { temperature: 0.5, ..s }));
        assert_eq!(base.len(), 64);
    }

    #[test]
    fn every_call_lands_in_transcript_once() {
        let gw = Gateway::new(Arc::new(Echo), Sampling::default());
        gw.complete(&prompt("u1")).unwrap();
        assert!(gw.complete(&prompt("fail")).is_err());
        gw.complete(&prompt("u2")).unwrap();
        let entries = gw.transcript().entries();
        assert_eq!(entries.len(), 3);
        assert_eq!(entries[0].exchange.response, "s|u1");
        assert!(entries[1].error.is_some());
        assert_eq!(entries.iter().map(|e| e.sequence).collect::<Vec<_>>(), vec![0, 1, 2]);
    }
}
