//! Model access: chat completions and text embeddings.
//!
//! Everything that talks to a generative model goes through
//! [`CompletionProvider`]; everything that encodes text goes through
//! [`Embedder`]. Two backends exist for each:
//!
//! - [`scripted::ScriptedProvider`] answers from a fixed table keyed by
//!   `(node path, phase, round)` and [`embed::HashedBagEmbedder`] hashes tokens
//!   into buckets. Both are pure functions of their input.
//! - [`live::LiveProvider`] speaks the OpenAI-compatible chat-completions and
//!   embeddings wire shapes over HTTP.

use std::fmt;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::NodePath;

pub mod embed;
pub mod live;
pub mod scripted;

pub use embed::{EmbeddingVector, HashedBagEmbedder};
pub use live::{LiveConfig, LiveProvider};
pub use scripted::{ScriptEntry, ScriptTable, ScriptedProvider};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

/// Structured shape the caller will parse out of a completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResponseKind {
    FreeText,
    PlanSteps,
    SubtaskList,
    CodeBlock,
    TestSuite,
    VerdictWithQuestion,
}

/// The agent activity a completion call belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Plan,
    Clarify,
    Decompose,
    Review,
    Implement,
    GenerateTests,
    Fix,
    Consolidate,
}

impl Phase {
    pub const ALL: [Phase; 8] = [
        Phase::Plan,
        Phase::Clarify,
        Phase::Decompose,
        Phase::Review,
        Phase::Implement,
        Phase::GenerateTests,
        Phase::Fix,
        Phase::Consolidate,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Plan => "plan",
            Phase::Clarify => "clarify",
            Phase::Decompose => "decompose",
            Phase::Review => "review",
            Phase::Implement => "implement",
            Phase::GenerateTests => "generate_tests",
            Phase::Fix => "fix",
            Phase::Consolidate => "consolidate",
        }
    }

    pub fn response_kind(&self) -> ResponseKind {
        match self {
            Phase::Plan => ResponseKind::PlanSteps,
            Phase::Clarify | Phase::Consolidate => ResponseKind::FreeText,
            Phase::Decompose => ResponseKind::SubtaskList,
            Phase::Review => ResponseKind::VerdictWithQuestion,
            Phase::Implement | Phase::Fix => ResponseKind::CodeBlock,
            Phase::GenerateTests => ResponseKind::TestSuite,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Phase {
    type Err = ProviderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Phase::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| ProviderError::Script(format!("unknown phase `{s}`")))
    }
}

/// Who is calling: the node, the phase, and how many earlier calls that node
/// made in the same phase during this run.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CallMeta {
    pub path: NodePath,
    pub phase: Phase,
    pub round: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub meta: CallMeta,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub response_kind: ResponseKind,
}

impl CompletionRequest {
    pub fn new(meta: CallMeta, messages: Vec<Message>) -> Self {
        let response_kind = meta.phase.response_kind();
        Self { meta, messages, temperature: 0.0, response_kind }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub content: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("transport failure: {message}")]
    Transport { message: String, retryable: bool },
    #[error("no script entry for path={path} phase={phase} round={round}")]
    MissingScriptEntry { path: String, phase: Phase, round: u32 },
    #[error("{phase} response could not be parsed: {reason}")]
    MalformedStructure { phase: Phase, reason: String },
    #[error("request has no messages")]
    EmptyRequest,
    #[error("cannot embed empty text")]
    EmptyInput,
    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("script error: {0}")]
    Script(String),
    #[error("provider configuration error: {0}")]
    Config(String),
}

/// Chat-completion backend. Implementations must be callable from several
/// workers at once.
pub trait CompletionProvider: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError>;
}

/// Text encoder. Output vectors are L2-normalized and deterministic for a
/// fixed backend and input.
pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, ProviderError>;
    fn dimension(&self) -> usize;
    /// Stable name recorded in memory snapshots; vectors from embedders with
    /// different identities are not comparable.
    fn identity(&self) -> String;
}

impl<T: CompletionProvider + ?Sized> CompletionProvider for std::sync::Arc<T> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
        (**self).complete(request)
    }
}

impl<T: Embedder + ?Sized> Embedder for std::sync::Arc<T> {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        (**self).embed(text)
    }
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn identity(&self) -> String {
        (**self).identity()
    }
}

/// Deterministic token estimate used when a backend does not report counts:
/// one token per four characters, rounded up.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

/// Wraps a provider and keeps every request/response pair, in call order.
pub struct RecordingProvider<P> {
    inner: P,
    calls: Mutex<Vec<(CompletionRequest, CompletionResponse)>>,
}

impl<P: CompletionProvider> RecordingProvider<P> {
    pub fn new(inner: P) -> Self {
        Self { inner, calls: Mutex::new(Vec::new()) }
    }

    pub fn calls(&self) -> Vec<(CompletionRequest, CompletionResponse)> {
        self.calls.lock().expect("recording lock poisoned").clone()
    }

    pub fn clear(&self) {
        self.calls.lock().expect("recording lock poisoned").clear();
    }
}

impl<P: CompletionProvider> CompletionProvider for RecordingProvider<P> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
        let response = self.inner.complete(request)?;
        self.calls
            .lock()
            .expect("recording lock poisoned")
            .push((request.clone(), response.clone()));
        Ok(response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_round_trips_through_name() {
        for phase in Phase::ALL {
            assert_eq!(phase.as_str().parse::<Phase>().unwrap(), phase);
        }
        assert!("bogus".parse::<Phase>().is_err());
    }

    #[test]
    fn token_estimate_rounds_up() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens("abc"), 1);
        assert_eq!(estimate_tokens("abcd"), 1);
        assert_eq!(estimate_tokens("abcde"), 2);
    }

    #[test]
    fn requests_default_to_zero_temperature() {
        let meta = CallMeta { path: NodePath::root(), phase: Phase::Plan, round: 0 };
        let req = CompletionRequest::new(meta, vec![Message::user("x")]);
        assert_eq!(req.temperature, 0.0);
        assert_eq!(req.response_kind, ResponseKind::PlanSteps);
    }
}
