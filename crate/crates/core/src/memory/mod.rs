//! Long-term memory of verified experiences.
//!
//! Records are embedded by their description. Retrieval ranks records whose
//! tree depth lies within a window around the querying agent's height.
//! Updates either insert a new record or, when an existing record is similar
//! enough, consolidate into the single best match.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calls::{call_structured, PhaseCaller, Structured};
use crate::model::TokenUsage;
use crate::parse;
use crate::prompts;
use crate::provider::{Embedder, EmbeddingVector, Message, Phase, ProviderError};

pub mod index;
pub mod snapshot;

pub use index::{ExactIndex, SimilarityIndex};

/// Separator between descriptions joined by [`MergeStrategy::NewestWins`].
pub const DESCRIPTION_SEPARATOR: &str = "\n---\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MergeStrategy {
    /// One completion call writes a unified description and reasoning trace.
    Consolidate,
    /// Keep the incoming record; union the descriptions. No model calls.
    NewestWins,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryConfig {
    /// Minimum cosine similarity at which an update merges instead of inserting.
    pub similarity_threshold: f64,
    pub retrieval_limit: usize,
    /// Records with `|depth - query_depth| <= depth_window` are eligible.
    pub depth_window: u32,
    pub merge_strategy: MergeStrategy,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            similarity_threshold: 0.75,
            retrieval_limit: 3,
            depth_window: 1,
            merge_strategy: MergeStrategy::NewestWins,
        }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<(), MemoryError> {
        if !(0.0..=1.0).contains(&self.similarity_threshold) {
            return Err(MemoryError::InvalidConfig(format!(
                "similarity_threshold {} outside [0, 1]",
                self.similarity_threshold
            )));
        }
        if self.retrieval_limit == 0 {
            return Err(MemoryError::InvalidConfig("retrieval_limit must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRecord {
    pub record_id: u64,
    pub description: String,
    pub reasoning_trace: String,
    pub code: String,
    pub depth: u32,
    pub embedding: EmbeddingVector,
    pub created_at: u64,
    pub merge_count: u32,
}

/// A verified experience offered to the store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryCandidate {
    pub description: String,
    pub reasoning_trace: String,
    pub code: String,
    pub depth: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub record: MemoryRecord,
    pub similarity: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Retrieval {
    pub hits: Vec<ScoredRecord>,
    pub usage: TokenUsage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UpdateOutcome {
    Inserted(u64),
    Merged(u64),
}

impl UpdateOutcome {
    pub fn record_id(&self) -> u64 {
        match self {
            UpdateOutcome::Inserted(id) | UpdateOutcome::Merged(id) => *id,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateReport {
    pub outcome: UpdateOutcome,
    /// Best similarity against the store before the update, if it was non-empty.
    pub best_similarity: Option<f64>,
    /// Embedding calls made by the store. Completion calls go through the
    /// caller passed to [`MemoryStore::update`] and are accounted there.
    pub usage: TokenUsage,
    /// True when a `Consolidate` merge fell back to `NewestWins`.
    pub consolidation_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryStats {
    pub size: usize,
    pub total_merges: u64,
    pub depth_histogram: BTreeMap<u32, usize>,
}

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("embedding failed: {0}")]
    Embedding(#[from] ProviderError),
    #[error("embedding dimension mismatch: store uses {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("snapshot embedder `{found}` does not match store embedder `{expected}`")]
    EmbedderMismatch { expected: String, found: String },
    #[error("invalid memory configuration: {0}")]
    InvalidConfig(String),
    #[error("snapshot error: {0}")]
    Snapshot(String),
}

#[derive(Debug, Clone, Default)]
struct State {
    records: Vec<MemoryRecord>,
    next_id: u64,
    next_seq: u64,
    total_merges: u64,
}

/// Vector store with concurrent reads and a single writer.
pub struct MemoryStore {
    config: MemoryConfig,
    embedder: Arc<dyn Embedder>,
    index: Box<dyn SimilarityIndex>,
    state: RwLock<State>,
    writer: Mutex<()>,
}

impl std::fmt::Debug for MemoryStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MemoryStore")
            .field("config", &self.config)
            .field("embedder", &self.embedder.identity())
            .field("index", &self.index.name())
            .field("size", &self.len())
            .finish()
    }
}

impl MemoryStore {
    pub fn new(config: MemoryConfig, embedder: Arc<dyn Embedder>) -> Result<Self, MemoryError> {
        Self::with_index(config, embedder, Box::new(ExactIndex::default()))
    }

    pub fn with_index(
        config: MemoryConfig,
        embedder: Arc<dyn Embedder>,
        index: Box<dyn SimilarityIndex>,
    ) -> Result<Self, MemoryError> {
        config.validate()?;
        Ok(Self { config, embedder, index, state: RwLock::new(State::default()), writer: Mutex::new(()) })
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    pub fn len(&self) -> usize {
        self.read().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy of every record in insertion order.
    pub fn records(&self) -> Vec<MemoryRecord> {
        self.read().records.clone()
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, State> {
        self.state.read().expect("memory lock poisoned")
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, MemoryError> {
        let v = self.embedder.embed(text)?;
        let expected = self.embedder.dimension();
        if v.dimension() != expected {
            return Err(MemoryError::DimensionMismatch { expected, actual: v.dimension() });
        }
        Ok(v)
    }

    /// Encodes `query_description` and returns up to `retrieval_limit` records
    /// within the depth window, most similar first.
    pub fn retrieve(&self, query_description: &str, query_depth: u32) -> Result<Retrieval, MemoryError> {
        if self.is_empty() {
            return Ok(Retrieval::default());
        }
        let query = self.embed(query_description)?;
        let hits = self.retrieve_by_vector(&query, query_depth);
        Ok(Retrieval { hits, usage: TokenUsage::embedding() })
    }

    pub fn retrieve_by_vector(&self, query: &EmbeddingVector, query_depth: u32) -> Vec<ScoredRecord> {
        let state = self.read();
        let window = self.config.depth_window;
        let eligible = move |r: &MemoryRecord| r.depth.abs_diff(query_depth) <= window;
        self.index
            .top_k(&state.records, query, &eligible, self.config.retrieval_limit)
            .into_iter()
            .map(|(i, similarity)| ScoredRecord { record: state.records[i].clone(), similarity })
            .collect()
    }

    /// Inserts `candidate` or merges it into the most similar record when that
    /// similarity reaches the threshold. Only verified solutions belong here.
    ///
    /// `caller` is used for the `Consolidate` strategy's completion; without
    /// one, or when that call fails, the merge falls back to `NewestWins`.
    pub fn update(
        &self,
        candidate: MemoryCandidate,
        caller: Option<&mut dyn PhaseCaller>,
    ) -> Result<UpdateReport, MemoryError> {
        let _writer = self.writer.lock().expect("memory writer lock poisoned");
        let embedding = self.embed(&candidate.description)?;
        let mut usage = TokenUsage::embedding();

        let best = {
            let state = self.read();
            let all = |_: &MemoryRecord| true;
            self.index
                .top_k(&state.records, &embedding, &all, 1)
                .first()
                .map(|&(i, sim)| (state.records[i].clone(), sim))
        };
        let best_similarity = best.as_ref().map(|(_, s)| *s);

        match best {
            Some((existing, similarity)) if similarity >= self.config.similarity_threshold => {
                let (merged, fallback) = self.consolidate(&existing, &candidate, caller)?;
                usage.absorb(TokenUsage::embedding()).expect("small counters");
                let id = existing.record_id;
                let mut state = self.state.write().expect("memory lock poisoned");
                let slot = state
                    .records
                    .iter_mut()
                    .find(|r| r.record_id == id)
                    .expect("single writer: record still present");
                *slot = merged;
                state.total_merges += 1;
                Ok(UpdateReport {
                    outcome: UpdateOutcome::Merged(id),
                    best_similarity,
                    usage,
                    consolidation_fallback: fallback,
                })
            }
            _ => {
                let mut state = self.state.write().expect("memory lock poisoned");
                let id = state.next_id;
                let created_at = state.next_seq;
                state.next_id += 1;
                state.next_seq += 1;
                state.records.push(MemoryRecord {
                    record_id: id,
                    description: candidate.description,
                    reasoning_trace: candidate.reasoning_trace,
                    code: candidate.code,
                    depth: candidate.depth.max(1),
                    embedding,
                    created_at,
                    merge_count: 0,
                });
                Ok(UpdateReport {
                    outcome: UpdateOutcome::Inserted(id),
                    best_similarity,
                    usage,
                    consolidation_fallback: false,
                })
            }
        }
    }

    /// Builds the merged record. The result keeps the existing record's id and
    /// creation sequence, bumps `merge_count`, and is re-embedded from the
    /// merged description. Returns whether a fallback to `NewestWins` happened.
    pub fn consolidate(
        &self,
        existing: &MemoryRecord,
        incoming: &MemoryCandidate,
        caller: Option<&mut dyn PhaseCaller>,
    ) -> Result<(MemoryRecord, bool), MemoryError> {
        let (description, reasoning_trace, fallback) = match (self.config.merge_strategy, caller) {
            (MergeStrategy::NewestWins, _) => {
                let (d, t) = newest_wins(existing, incoming);
                (d, t, false)
            }
            (MergeStrategy::Consolidate, Some(caller)) => match unify_with_model(caller, existing, incoming) {
                Ok((d, t)) => (d, t, false),
                Err(reason) => {
                    log::warn!("memory consolidation failed ({reason}); falling back to newest-wins");
                    let (d, t) = newest_wins(existing, incoming);
                    (d, t, true)
                }
            },
            (MergeStrategy::Consolidate, None) => {
                log::warn!("no model available for consolidation; falling back to newest-wins");
                let (d, t) = newest_wins(existing, incoming);
                (d, t, true)
            }
        };
        let embedding = self.embed(&description)?;
        Ok((
            MemoryRecord {
                record_id: existing.record_id,
                description,
                reasoning_trace,
                code: incoming.code.clone(),
                depth: incoming.depth.max(1),
                embedding,
                created_at: existing.created_at,
                merge_count: existing.merge_count + 1,
            },
            fallback,
        ))
    }

    /// Removes every record. Ids and sequence numbers keep counting up.
    pub fn reset(&self) {
        let _writer = self.writer.lock().expect("memory writer lock poisoned");
        let mut state = self.state.write().expect("memory lock poisoned");
        state.records.clear();
        state.total_merges = 0;
    }

    pub fn stats(&self) -> MemoryStats {
        let state = self.read();
        let mut depth_histogram = BTreeMap::new();
        for r in &state.records {
            *depth_histogram.entry(r.depth).or_insert(0) += 1;
        }
        MemoryStats { size: state.records.len(), total_merges: state.total_merges, depth_histogram }
    }
}

/// Description union (existing parts first, incoming appended when new) and
/// the incoming reasoning trace.
fn newest_wins(existing: &MemoryRecord, incoming: &MemoryCandidate) -> (String, String) {
    let mut parts: Vec<&str> = existing.description.split(DESCRIPTION_SEPARATOR).collect();
    if !parts.iter().any(|p| p.trim() == incoming.description.trim()) {
        parts.push(&incoming.description);
    }
    (parts.join(DESCRIPTION_SEPARATOR), incoming.reasoning_trace.clone())
}

fn unify_with_model(
    caller: &mut dyn PhaseCaller,
    existing: &MemoryRecord,
    incoming: &MemoryCandidate,
) -> Result<(String, String), String> {
    let prompt = prompts::CONSOLIDATE.render(&[
        ("existing_description", &existing.description),
        ("existing_reasoning", &existing.reasoning_trace),
        ("incoming_description", &incoming.description),
        ("incoming_reasoning", &incoming.reasoning_trace),
    ]);
    let messages = vec![Message::system(prompts::SYSTEM.text), Message::user(prompt)];
    match call_structured(caller, Phase::Consolidate, messages, parse::parse_consolidation) {
        Ok(Structured::Parsed(pair)) => Ok(pair),
        Ok(Structured::Malformed { reason, .. }) => Err(reason),
        Err(e) => Err(e.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calls::DirectCaller;
    use crate::model::NodePath;
    use crate::provider::{HashedBagEmbedder, ScriptTable, ScriptedProvider};

    fn store(config: MemoryConfig) -> MemoryStore {
        MemoryStore::new(config, Arc::new(HashedBagEmbedder::default())).unwrap()
    }

    fn cand(description: &str, depth: u32) -> MemoryCandidate {
        MemoryCandidate {
            description: description.into(),
            reasoning_trace: format!("plan for {description}"),
            code: format!("# {description}"),
            depth,
        }
    }

    #[test]
    fn empty_store_retrieves_nothing() {
        let s = store(MemoryConfig::default());
        let r = s.retrieve("anything at all", 1).unwrap();
        assert!(r.hits.is_empty());
        assert_eq!(r.usage, TokenUsage::default());
    }

    #[test]
    fn insert_then_duplicate_merges() {
        let s = store(MemoryConfig::default());
        let first = s.update(cand("sort a list of integers", 1), None).unwrap();
        assert_eq!(first.outcome, UpdateOutcome::Inserted(0));
        assert_eq!(s.len(), 1);
        let second = s.update(cand("sort a list of integers", 1), None).unwrap();
        assert_eq!(second.outcome, UpdateOutcome::Merged(0));
        assert!((second.best_similarity.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(s.len(), 1);
        assert_eq!(second.usage.embedding_calls, 2);
        assert_eq!(second.usage.completion_calls, 0);
    }

    #[test]
    fn depth_window_filters() {
        let s = store(MemoryConfig { similarity_threshold: 1.0, ..MemoryConfig::default() });
        for (d, text) in [(1, "alpha beta"), (2, "alpha gamma"), (3, "alpha delta")] {
            s.update(cand(text, d), None).unwrap();
        }
        let hits = s.retrieve("alpha", 1).unwrap().hits;
        let mut depths: Vec<u32> = hits.iter().map(|h| h.record.depth).collect();
        depths.sort();
        assert_eq!(depths, [1, 2]);
        let hits = s.retrieve("alpha", 2).unwrap().hits;
        assert_eq!(hits.len(), 3);
    }

    #[test]
    fn newest_wins_keeps_incoming_and_unions_descriptions() {
        let s = store(MemoryConfig { similarity_threshold: 0.1, ..MemoryConfig::default() });
        s.update(cand("parse a csv file", 1), None).unwrap();
        let incoming = MemoryCandidate { code: "NEW CODE".into(), ..cand("parse a csv file quickly", 2) };
        let report = s.update(incoming, None).unwrap();
        assert_eq!(report.outcome, UpdateOutcome::Merged(0));
        let rec = &s.records()[0];
        assert_eq!(rec.code, "NEW CODE");
        assert_eq!(rec.description, format!("parse a csv file{DESCRIPTION_SEPARATOR}parse a csv file quickly"));
        assert_eq!(rec.embedding, s.embedder().embed(&rec.description).unwrap());
        assert_eq!(rec.merge_count, 1);
        assert_eq!(rec.depth, 2);
    }

    #[test]
    fn merge_count_after_n_identical_updates() {
        let s = store(MemoryConfig::default());
        let n = 7;
        for _ in 0..n {
            s.update(cand("reverse a string", 1), None).unwrap();
        }
        assert_eq!(s.len(), 1);
        assert_eq!(s.records()[0].merge_count, n - 1);
        assert_eq!(s.records()[0].description, "reverse a string");
        assert_eq!(s.stats().total_merges, u64::from(n - 1));
    }

    #[test]
    fn consolidate_strategy_uses_one_completion() {
        let mut table = ScriptTable::new();
        table.set_default(Phase::Consolidate, "DESCRIPTION:\nsort numbers\nTRACE:\nuse sorted()");
        let provider = ScriptedProvider::new(table);
        let mut caller = DirectCaller::new(&provider, NodePath::root());
        let s = store(MemoryConfig { merge_strategy: MergeStrategy::Consolidate, ..MemoryConfig::default() });
        s.update(cand("sort numbers", 1), Some(&mut caller)).unwrap();
        assert_eq!(caller.usage.completion_calls, 0);
        let r = s.update(cand("sort numbers", 1), Some(&mut caller)).unwrap();
        assert!(!r.consolidation_fallback);
        assert_eq!(caller.usage.completion_calls, 1);
        assert_eq!(s.records()[0].reasoning_trace, "use sorted()");
    }

    #[test]
    fn consolidate_failure_falls_back() {
        let provider = ScriptedProvider::new(ScriptTable::new());
        let mut caller = DirectCaller::new(&provider, NodePath::root());
        let s = store(MemoryConfig { merge_strategy: MergeStrategy::Consolidate, ..MemoryConfig::default() });
        s.update(cand("sort numbers", 1), Some(&mut caller)).unwrap();
        let r = s.update(cand("sort numbers", 1), Some(&mut caller)).unwrap();
        assert!(r.consolidation_fallback);
        assert_eq!(r.outcome, UpdateOutcome::Merged(0));
    }

    #[test]
    fn reset_is_idempotent() {
        let s = store(MemoryConfig { similarity_threshold: 1.0, ..MemoryConfig::default() });
        for i in 0..10 {
            s.update(cand(&format!("task number {i} word{i}"), 1), None).unwrap();
        }
        assert_eq!(s.len(), 10);
        s.reset();
        assert_eq!(s.len(), 0);
        s.reset();
        assert_eq!(s.len(), 0);
        assert!(s.retrieve("task number 3 word3", 1).unwrap().hits.is_empty());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        struct Wrong;
        impl Embedder for Wrong {
            fn embed(&self, _: &str) -> Result<EmbeddingVector, ProviderError> {
                EmbeddingVector::normalized(vec![1.0, 0.0])
            }
            fn dimension(&self) -> usize {
                3
            }
            fn identity(&self) -> String {
                "wrong".into()
            }
        }
        let s = MemoryStore::new(MemoryConfig::default(), Arc::new(Wrong)).unwrap();
        assert!(matches!(
            s.update(cand("x", 1), None),
            Err(MemoryError::DimensionMismatch { expected: 3, actual: 2 })
        ));
    }

    #[test]
    fn invalid_config_rejected() {
        let e = Arc::new(HashedBagEmbedder::default());
        assert!(MemoryStore::new(MemoryConfig { similarity_threshold: 1.5, ..MemoryConfig::default() }, e.clone()).is_err());
        assert!(MemoryStore::new(MemoryConfig { retrieval_limit: 0, ..MemoryConfig::default() }, e).is_err());
    }

    #[test]
    fn stats_histogram() {
        let s = store(MemoryConfig { similarity_threshold: 1.0, ..MemoryConfig::default() });
        s.update(cand("a b", 1), None).unwrap();
        s.update(cand("c d", 2), None).unwrap();
        s.update(cand("e f", 2), None).unwrap();
        let st = s.stats();
        assert_eq!(st.size, 3);
        assert_eq!(st.depth_histogram, BTreeMap::from([(1, 1), (2, 2)]));
    }
}
