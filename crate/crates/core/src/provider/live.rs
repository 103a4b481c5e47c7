//! OpenAI-compatible HTTP backend.

use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    CompletionProvider, CompletionRequest, CompletionResponse, Embedder, EmbeddingVector,
    ProviderError,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiveConfig {
    /// Base URL, e.g. `https://api.openai.com/v1`. `/chat/completions` and
    /// `/embeddings` are appended.
    pub endpoint: String,
    pub model: String,
    pub embedding_model: String,
    /// Dimension of vectors returned by `embedding_model`.
    pub embedding_dimension: usize,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    /// Token-bucket rate limit; `None` disables limiting.
    pub requests_per_minute: Option<u32>,
}

impl Default for LiveConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1".into(),
            model: "gpt-4o-mini".into(),
            embedding_model: "text-embedding-3-small".into(),
            embedding_dimension: 1536,
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 60,
            max_retries: 3,
            requests_per_minute: None,
        }
    }
}

struct TokenBucket {
    capacity: f64,
    refill_per_sec: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    fn per_minute(rpm: u32) -> Self {
        let capacity = f64::from(rpm.max(1));
        Self { capacity, refill_per_sec: capacity / 60.0, state: Mutex::new((capacity, Instant::now())) }
    }

    fn acquire(&self) {
        loop {
            let wait = {
                let mut state = self.state.lock().expect("rate limiter lock poisoned");
                let now = Instant::now();
                let elapsed = now.duration_since(state.1).as_secs_f64();
                state.0 = (state.0 + elapsed * self.refill_per_sec).min(self.capacity);
                state.1 = now;
                if state.0 >= 1.0 {
                    state.0 -= 1.0;
                    return;
                }
                (1.0 - state.0) / self.refill_per_sec
            };
            thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

pub struct LiveProvider {
    config: LiveConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    limiter: Option<TokenBucket>,
}

impl LiveProvider {
    /// Builds a client; the API key is read from `config.api_key_env` when
    /// set (a missing variable means unauthenticated requests).
    pub fn new(config: LiveConfig) -> Result<Self, ProviderError> {
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        Self::with_api_key(config, api_key)
    }

    pub fn with_api_key(config: LiveConfig, api_key: Option<String>) -> Result<Self, ProviderError> {
        if config.endpoint.trim().is_empty() {
            return Err(ProviderError::Config("endpoint is empty".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build()
            .map_err(|e| ProviderError::Config(e.to_string()))?;
        let limiter = config.requests_per_minute.map(TokenBucket::per_minute);
        Ok(Self { config, api_key, client, limiter })
    }

    pub fn config(&self) -> &LiveConfig {
        &self.config
    }

    fn url(&self, suffix: &str) -> String {
        format!("{}/{}", self.config.endpoint.trim_end_matches('/'), suffix)
    }

    fn post(&self, url: &str, body: &serde_json::Value) -> Result<serde_json::Value, ProviderError> {
        let mut attempt = 0;
        loop {
            if let Some(limiter) = &self.limiter {
                limiter.acquire();
            }
            match self.post_once(url, body) {
                Ok(value) => return Ok(value),
                Err(ProviderError::Transport { message, retryable: true })
                    if attempt < self.config.max_retries =>
                {
                    attempt += 1;
                    log::warn!("retrying {url} after transport error ({attempt}): {message}");
                    thread::sleep(Duration::from_millis(250 * (1 << attempt.min(6))));
                }
                Err(err) => return Err(err),
            }
        }
    }

    fn post_once(&self, url: &str, body: &serde_json::Value) -> Result<serde_json::Value, ProviderError> {
        let mut builder = self.client.post(url).json(body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| ProviderError::Transport {
            message: e.to_string(),
            retryable: true,
        })?;
        let status = response.status();
        let text = response.text().map_err(|e| ProviderError::Transport {
            message: e.to_string(),
            retryable: true,
        })?;
        if !status.is_success() {
            return Err(ProviderError::Transport {
                message: format!("HTTP {status}: {}", truncate(&text, 400)),
                retryable: status.is_server_error() || status.as_u16() == 429,
            });
        }
        serde_json::from_str(&text).map_err(|e| ProviderError::Transport {
            message: format!("invalid JSON body: {e}"),
            retryable: false,
        })
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl CompletionProvider for LiveProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
        if request.messages.is_empty() {
            return Err(ProviderError::EmptyRequest);
        }
        let messages: Vec<_> = request
            .messages
            .iter()
            .map(|m| json!({ "role": m.role.as_str(), "content": m.content }))
            .collect();
        let body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": request.temperature,
        });
        let value = self.post(&self.url("chat/completions"), &body)?;
        let parsed: ChatResponse = serde_json::from_value(value).map_err(|e| ProviderError::Transport {
            message: format!("unexpected chat response shape: {e}"),
            retryable: false,
        })?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        let usage = parsed.usage.unwrap_or(ChatUsage { prompt_tokens: 0, completion_tokens: 0 });
        Ok(CompletionResponse {
            content,
            input_tokens: usage.prompt_tokens,
            output_tokens: usage.completion_tokens,
        })
    }
}

impl Embedder for LiveProvider {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        if text.trim().is_empty() {
            return Err(ProviderError::EmptyInput);
        }
        let body = json!({ "model": self.config.embedding_model, "input": text });
        let value = self.post(&self.url("embeddings"), &body)?;
        let parsed: EmbeddingResponse = serde_json::from_value(value).map_err(|e| ProviderError::Transport {
            message: format!("unexpected embedding response shape: {e}"),
            retryable: false,
        })?;
        let values = parsed.data.into_iter().next().map(|d| d.embedding).unwrap_or_default();
        if values.len() != self.config.embedding_dimension {
            return Err(ProviderError::DimensionMismatch {
                expected: self.config.embedding_dimension,
                actual: values.len(),
            });
        }
        EmbeddingVector::normalized(values)
    }

    fn dimension(&self) -> usize {
        self.config.embedding_dimension
    }

    fn identity(&self) -> String {
        format!("live:{}@{}", self.config.embedding_model, self.config.endpoint)
    }
}

fn truncate(text: &str, max: usize) -> &str {
    match text.char_indices().nth(max) {
        Some((idx, _)) => &text[..idx],
        None => text,
    }
}
