//! OpenAI-compatible HTTP backend and embedder.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::{json, Value};

use super::{ChatBackend, ChatRequest, GatewayError};

pub const URL_VAR: &str = "GATEWAY_URL";
pub const KEY_VAR: &str = "GATEWAY_KEY";

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default)]
pub struct LiveConfig {
    /// Base URL such as `https://api.openai.com/v1`.
    pub url: String,
    pub key: String,
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub requests_per_minute: u32,
    pub timeout_secs: u64,
    pub embedding_model: String,
}

impl Default for LiveConfig {
    fn default() -> Self {
        Self {
            url: String::new(),
            key: String::new(),
            max_retries: 4,
            base_delay_ms: 500,
            max_delay_ms: 16_000,
            requests_per_minute: 60,
            timeout_secs: 120,
            embedding_model: "text-embedding-3-small".to_string(),
        }
    }
}

impl LiveConfig {
    pub fn from_env() -> Result<Self, GatewayError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    /// Fills url/key from `lookup` when the config does not already set them.
    pub fn from_lookup(lookup: impl Fn(&str) -> Option<String>) -> Result<Self, GatewayError> {
        Self::default().with_env(lookup)
    }

    pub fn with_env(mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<Self, GatewayError> {
        if self.url.is_empty() {
            self.url = lookup(URL_VAR).unwrap_or_default();
        }
        if self.key.is_empty() {
            self.key = lookup(KEY_VAR).unwrap_or_default();
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.url.trim().is_empty() {
            return Err(GatewayError::Config(format!("{URL_VAR} is not set")));
        }
        if self.key.trim().is_empty() {
            return Err(GatewayError::Config(format!("{KEY_VAR} is not set")));
        }
        if self.requests_per_minute == 0 {
            return Err(GatewayError::Config("requests_per_minute must be positive".into()));
        }
        Ok(())
    }

    fn endpoint(&self, path: &str) -> String {
        let base = self.url.trim_end_matches('/');
        if base.ends_with(path) {
            base.to_string()
        } else {
            format!("{base}{path}")
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        let ms = self.base_delay_ms.saturating_mul(1u64 << attempt.min(20));
        Duration::from_millis(ms.min(self.max_delay_ms))
    }
}

/// Classic token bucket; `acquire` blocks until a token is available.
pub struct TokenBucket {
    state: Mutex<(f64, Instant)>,
    capacity: f64,
    per_sec: f64,
}

impl TokenBucket {
    pub fn per_minute(rpm: u32) -> Self {
        let capacity = f64::from(rpm.max(1));
        Self { state: Mutex::new((capacity, Instant::now())), capacity, per_sec: capacity / 60.0 }
    }

    /// Time to wait before a token is free, taking it if none is needed.
    pub fn try_acquire(&self) -> Option<Duration> {
        let mut state = self.state.lock().unwrap_or_else(|p| p.into_inner());
        let now = Instant::now();
        let elapsed = now.duration_since(state.1).as_secs_f64();
        state.0 = (state.0 + elapsed * self.per_sec).min(self.capacity);
        state.1 = now;
        if state.0 >= 1.0 {
            state.0 -= 1.0;
            None
        } else {
            Some(Duration::from_secs_f64((1.0 - state.0) / self.per_sec))
        }
    }

    pub fn acquire(&self) {
        while let Some(wait) = self.try_acquire() {
            std::thread::sleep(wait);
        }
    }
}

pub struct LiveBackend {
    config: LiveConfig,
    agent: ureq::Agent,
    limiter: TokenBucket,
}

enum Attempt {
    Done(Value),
    Retry(String),
    Fatal(GatewayError),
}

fn post(agent: &ureq::Agent, url: &str, key: &str, body: &Value) -> Attempt {
    let response = agent
        .post(url)
        .header("Authorization", &format!("Bearer {key}"))
        .send_json(body);
    match response {
        Err(e) => Attempt::Retry(e.to_string()),
        Ok(mut resp) => {
            let status = resp.status().as_u16();
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            if status == 429 || status >= 500 {
                Attempt::Retry(format!("HTTP {status}: {text}"))
            } else if status >= 400 {
                Attempt::Fatal(GatewayError::Http { status, body: text })
            } else {
                match serde_json::from_str(&text) {
                    Ok(v) => Attempt::Done(v),
                    Err(e) => Attempt::Fatal(GatewayError::Malformed(e.to_string())),
                }
            }
        }
    }
}

impl LiveBackend {
    /// Fails on missing credentials before any network activity.
    pub fn new(config: LiveConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        let limiter = TokenBucket::per_minute(config.requests_per_minute);
        Ok(Self { config, agent, limiter })
    }

    fn call(&self, path: &str, body: &Value) -> Result<Value, GatewayError> {
        let url = self.config.endpoint(path);
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let wait = self.config.delay(attempt - 1);
                tracing::warn!(attempt, ?wait, error = %last, "retrying gateway call");
                std::thread::sleep(wait);
            }
            self.limiter.acquire();
            match post(&self.agent, &url, &self.config.key, body) {
                Attempt::Done(v) => return Ok(v),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(msg) => last = msg,
            }
        }
        Err(GatewayError::Transport { attempts, message: last })
    }
}

impl ChatBackend for LiveBackend {
    fn id(&self) -> &str {
        "live"
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let mut body = json!({
            "model": request.sampling.model,
            "temperature": request.sampling.temperature,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
        });
        if let Some(seed) = request.sampling.seed {
            body["seed"] = json!(seed);
        }
        let v = self.call("/chat/completions", &body)?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| GatewayError::Malformed("no choices[0].message.content".into()))
    }
}

/// Embeddings through the same endpoint family.
pub struct RemoteEmbedder {
    backend: LiveBackend,
}

impl RemoteEmbedder {
    pub fn new(config: LiveConfig) -> Result<Self, GatewayError> {
        Ok(Self { backend: LiveBackend::new(config)? })
    }

    pub fn model(&self) -> &str {
        &self.backend.config.embedding_model
    }

    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        let body = json!({ "model": self.backend.config.embedding_model, "input": texts });
        let v = self.backend.call("/embeddings", &body)?;
        let data = v
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| GatewayError::Malformed("no data array".into()))?;
        if data.len() != texts.len() {
            return Err(GatewayError::Malformed(format!(
                "{} embeddings for {} inputs",
                data.len(),
                texts.len()
            )));
        }
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(data.len());
        for (i, item) in data.iter().enumerate() {
            let index = item.get("index").and_then(Value::as_u64).map(|x| x as usize).unwrap_or(i);
            let vector: Vec<f64> = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| GatewayError::Malformed("embedding missing".into()))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| GatewayError::Malformed("non-numeric embedding".into())))
                .collect::<Result<_, _>>()?;
            rows.push((index, vector));
        }
        rows.sort_by_key(|r| r.0);
        Ok(rows.into_iter().map(|r| r.1).collect())
    }
}
