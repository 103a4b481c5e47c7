use serde::{Deserialize, Serialize};

use super::{Embedder, ProviderError};

/// L2-normalized embedding. Cosine similarity between two vectors is their
/// dot product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    /// Normalizes `values`. Fails on an empty or all-zero vector.
    pub fn normalized(values: Vec<f64>) -> Result<Self, ProviderError> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if values.is_empty() || norm == 0.0 || !norm.is_finite() {
            return Err(ProviderError::EmptyInput);
        }
        Ok(Self { values: values.into_iter().map(|v| v / norm).collect() })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }
}

/// Deterministic offline embedder: lowercase, split on non-alphanumerics,
/// hash every token into one of `buckets` counters, L2-normalize.
#[derive(Debug, Clone, Copy)]
pub struct HashedBagEmbedder {
    buckets: usize,
}

impl Default for HashedBagEmbedder {
    fn default() -> Self {
        Self { buckets: Self::DEFAULT_BUCKETS }
    }
}

impl HashedBagEmbedder {
    pub const DEFAULT_BUCKETS: usize = 256;

    pub fn with_buckets(buckets: usize) -> Self {
        assert!(buckets > 0, "bucket count must be positive");
        Self { buckets }
    }

    pub fn bucket_of(&self, token: &str) -> usize {
        (fnv1a64(token.as_bytes()) % self.buckets as u64) as usize
    }

    pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
    }

    /// Raw bucket counts before normalization.
    pub fn counts(&self, text: &str) -> Vec<u32> {
        let mut counts = vec![0u32; self.buckets];
        for token in Self::tokens(text) {
            counts[self.bucket_of(&token)] += 1;
        }
        counts
    }
}

impl Embedder for HashedBagEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        let counts = self.counts(text);
        EmbeddingVector::normalized(counts.into_iter().map(f64::from).collect())
    }

    fn dimension(&self) -> usize {
        self.buckets
    }

    fn identity(&self) -> String {
        format!("hashed-bag-fnv1a/{}", self.buckets)
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |hash, &b| (hash ^ u64::from(b)).wrapping_mul(PRIME))
}
