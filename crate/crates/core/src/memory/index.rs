//! Nearest-neighbour ranking over stored records.

use std::cmp::Ordering;

use super::MemoryRecord;
use crate::parallel::{map_indexed, Execution};
use crate::provider::EmbeddingVector;

/// Ranks eligible records by similarity to a query vector.
///
/// Implementations may be approximate, but must agree with [`ExactIndex`] on
/// stores of up to 10,000 records.
pub trait SimilarityIndex: Send + Sync {
    fn name(&self) -> &str;

    /// Indices into `records` with their cosine similarity, best first, at
    /// most `limit` long.
    fn top_k(
        &self,
        records: &[MemoryRecord],
        query: &EmbeddingVector,
        eligible: &(dyn Fn(&MemoryRecord) -> bool + Sync),
        limit: usize,
    ) -> Vec<(usize, f64)>;
}

/// Exhaustive scan. Similarity ties go to the newer record, then the lower id.
#[derive(Debug, Clone, Copy)]
pub struct ExactIndex {
    pub execution: Execution,
    /// Below this many records the scan stays sequential.
    pub parallel_threshold: usize,
}

impl Default for ExactIndex {
    fn default() -> Self {
        Self { execution: Execution::best_available(), parallel_threshold: 2048 }
    }
}

impl ExactIndex {
    pub fn sequential() -> Self {
        Self { execution: Execution::Sequential, parallel_threshold: usize::MAX }
    }

    pub fn parallel() -> Self {
        Self { execution: Execution::Parallel, parallel_threshold: 0 }
    }
}

pub(crate) fn rank_order(records: &[MemoryRecord], a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| records[b.0].created_at.cmp(&records[a.0].created_at))
        .then_with(|| records[a.0].record_id.cmp(&records[b.0].record_id))
}

impl SimilarityIndex for ExactIndex {
    fn name(&self) -> &str {
        "exact"
    }

    fn top_k(
        &self,
        records: &[MemoryRecord],
        query: &EmbeddingVector,
        eligible: &(dyn Fn(&MemoryRecord) -> bool + Sync),
        limit: usize,
    ) -> Vec<(usize, f64)> {
        if limit == 0 || records.is_empty() {
            return Vec::new();
        }
        let mode = if records.len() >= self.parallel_threshold { self.execution } else { Execution::Sequential };
        let scored = map_indexed(mode, records, |i, r| eligible(r).then(|| (i, r.embedding.cosine(query))));
        let mut hits: Vec<(usize, f64)> = scored.into_iter().flatten().collect();
        if hits.len() > limit {
            hits.select_nth_unstable_by(limit - 1, |a, b| rank_order(records, a, b));
            hits.truncate(limit);
        }
        hits.sort_by(|a, b| rank_order(records, a, b));
        hits
    }
}
