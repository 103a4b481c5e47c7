//! Snapshot file: one JSON header line, then one JSON line per record.
//!
//! The header carries the format version, embedder identity, dimension and
//! the memory configuration. Identical stores serialize to identical bytes.

use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{MemoryConfig, MemoryError, MemoryRecord, MemoryStore, MergeStrategy, State};
use crate::provider::Embedder;

pub const SNAPSHOT_FORMAT: &str = "treecode-memory";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub format: String,
    pub version: u32,
    pub embedder: String,
    pub dimension: usize,
    pub similarity_threshold: f64,
    pub retrieval_limit: usize,
    pub depth_window: u32,
    pub merge_strategy: MergeStrategy,
    pub next_id: u64,
    pub next_seq: u64,
    pub total_merges: u64,
    pub records: usize,
}

fn io_err(e: impl std::fmt::Display) -> MemoryError {
    MemoryError::Snapshot(e.to_string())
}

impl MemoryStore {
    pub fn write_snapshot<W: Write>(&self, mut out: W) -> Result<(), MemoryError> {
        let state = self.read();
        let header = SnapshotHeader {
            format: SNAPSHOT_FORMAT.into(),
            version: SNAPSHOT_VERSION,
            embedder: self.embedder.identity(),
            dimension: self.embedder.dimension(),
            similarity_threshold: self.config.similarity_threshold,
            retrieval_limit: self.config.retrieval_limit,
            depth_window: self.config.depth_window,
            merge_strategy: self.config.merge_strategy,
            next_id: state.next_id,
            next_seq: state.next_seq,
            total_merges: state.total_merges,
            records: state.records.len(),
        };
        serde_json::to_writer(&mut out, &header).map_err(io_err)?;
        out.write_all(b"\n").map_err(io_err)?;
        for record in &state.records {
            serde_json::to_writer(&mut out, record).map_err(io_err)?;
            out.write_all(b"\n").map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MemoryError> {
        let file = std::fs::File::create(path).map_err(io_err)?;
        self.write_snapshot(std::io::BufWriter::new(file))
    }

    /// Restores a store. The embedder must have the identity and dimension
    /// recorded in the header.
    pub fn read_snapshot<R: BufRead>(reader: R, embedder: Arc<dyn Embedder>) -> Result<Self, MemoryError> {
        let mut lines = reader.lines();
        let header_line = lines.next().ok_or_else(|| io_err("empty snapshot"))?.map_err(io_err)?;
        let header: SnapshotHeader = serde_json::from_str(&header_line).map_err(io_err)?;
        if header.format != SNAPSHOT_FORMAT {
            return Err(io_err(format!("unknown snapshot format `{}`", header.format)));
        }
        if header.version != SNAPSHOT_VERSION {
            return Err(io_err(format!("unsupported snapshot version {}", header.version)));
        }
        if header.embedder != embedder.identity() {
            return Err(MemoryError::EmbedderMismatch { expected: embedder.identity(), found: header.embedder });
        }
        if header.dimension != embedder.dimension() {
            return Err(MemoryError::DimensionMismatch { expected: embedder.dimension(), actual: header.dimension });
        }
        let mut records = Vec::with_capacity(header.records);
        for line in lines {
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            let record: MemoryRecord = serde_json::from_str(&line).map_err(io_err)?;
            if record.embedding.dimension() != header.dimension {
                return Err(MemoryError::DimensionMismatch {
                    expected: header.dimension,
                    actual: record.embedding.dimension(),
                });
            }
            records.push(record);
        }
        if records.len() != header.records {
            return Err(io_err(format!("header declares {} records, found {}", header.records, records.len())));
        }
        let config = MemoryConfig {
            similarity_threshold: header.similarity_threshold,
            retrieval_limit: header.retrieval_limit,
            depth_window: header.depth_window,
            merge_strategy: header.merge_strategy,
        };
        let store = MemoryStore::new(config, embedder)?;
        *store.state.write().expect("fresh lock") = State {
            records,
            next_id: header.next_id,
            next_seq: header.next_seq,
            total_merges: header.total_merges,
        };
        Ok(store)
    }

    pub fn load(path: impl AsRef<Path>, embedder: Arc<dyn Embedder>) -> Result<Self, MemoryError> {
        let file = std::fs::File::open(path).map_err(io_err)?;
        Self::read_snapshot(std::io::BufReader::new(file), embedder)
    }
}
