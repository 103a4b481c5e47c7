//! Append-only run trace.
//!
//! Every phase transition, completion call, clarification, revision, sandbox
//! run and memory operation becomes one [`TraceEvent`]. Sequence numbers are
//! assigned at append time and give a total order even when sibling subtrees
//! run on different threads. The exported form is JSON lines.

use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::memory::UpdateOutcome;
use crate::model::{NodePath, NodeStatus, TokenUsage, TreeConfig};
use crate::provider::{Phase, ResponseKind};
use crate::validator::{SuiteSource, Verdict};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    /// Position in the run's total order. Doubles as the logical timestamp.
    pub seq: u64,
    pub path: NodePath,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingPurpose {
    Retrieve,
    Update,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    NodeStarted {
        height: u32,
        degree_budget: u32,
        description: String,
    },
    MemoryRetrieved {
        record_ids: Vec<u64>,
        similarities: Vec<f64>,
    },
    EmbeddingCall {
        purpose: EmbeddingPurpose,
        count: u64,
    },
    Call {
        phase: Phase,
        round: u32,
        response_kind: ResponseKind,
        input_tokens: u64,
        output_tokens: u64,
        /// Estimated tokens of the retrieved-memory message in this prompt.
        memory_context_tokens: u64,
    },
    Warning {
        message: String,
    },
    Clarification {
        question: String,
        refined_spec: String,
        round: u32,
        /// `parent` or `auto` (root-level questions).
        answered_by: String,
    },
    Delegated {
        subtasks: Vec<String>,
    },
    DegreeTruncation {
        proposed: u32,
        kept: u32,
    },
    DuplicateSubtasksDropped {
        dropped: u32,
    },
    SubtreeRevision {
        discarded_child_count: u32,
        new_subtasks: Vec<String>,
        revision_index: u32,
    },
    StructureCorrectionExhausted,
    TestsGenerated {
        source: SuiteSource,
        regenerated: bool,
        smoke_fallback: bool,
    },
    SandboxRun {
        attempt: u32,
        verdict: Verdict,
        failing_cases: Vec<String>,
        wall_time: f64,
        stdout_truncated: bool,
        stderr_truncated: bool,
    },
    MemoryUpdated {
        outcome: UpdateOutcome,
    },
    NodeFinished {
        status: NodeStatus,
        verified: bool,
        tests_run: u32,
        fix_iterations: u32,
        children: u32,
        usage: TokenUsage,
    },
}

/// Shared, append-only event sink for one run.
#[derive(Debug, Default)]
pub struct TraceLog {
    events: Mutex<Vec<TraceEvent>>,
}

impl TraceLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&self, path: &NodePath, kind: EventKind) -> u64 {
        let mut events = self.events.lock().expect("trace lock poisoned");
        let seq = events.len() as u64;
        events.push(TraceEvent { seq, path: path.clone(), kind });
        seq
    }

    pub fn snapshot(&self) -> RunTrace {
        RunTrace { events: self.events.lock().expect("trace lock poisoned").clone() }
    }

    pub fn into_trace(self) -> RunTrace {
        RunTrace { events: self.events.into_inner().expect("trace lock poisoned") }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub events: Vec<TraceEvent>,
}

/// A structural rule broken by a trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeViolation {
    pub path: NodePath,
    pub rule: String,
}

impl RunTrace {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("trace events serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let events = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { events })
    }

    pub fn events_for<'a>(&'a self, path: &'a NodePath) -> impl Iterator<Item = &'a TraceEvent> + 'a {
        self.events.iter().filter(move |e| &e.path == path)
    }

    /// How many times each node path was executed.
    pub fn executions(&self) -> BTreeMap<NodePath, u32> {
        let mut counts = BTreeMap::new();
        for e in &self.events {
            if matches!(e.kind, EventKind::NodeStarted { .. }) {
                *counts.entry(e.path.clone()).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Sum of per-call token counts over every `Call` event, with one
    /// completion call per event, plus the embedding calls logged.
    pub fn call_usage(&self) -> TokenUsage {
        let mut usage = TokenUsage::default();
        for e in &self.events {
            match e.kind {
                EventKind::Call { input_tokens, output_tokens, .. } => {
                    usage.input_tokens += input_tokens;
                    usage.output_tokens += output_tokens;
                    usage.completion_calls += 1;
                }
                EventKind::EmbeddingCall { count, .. } => usage.embedding_calls += count,
                _ => {}
            }
        }
        usage
    }

    pub fn completion_calls(&self) -> u64 {
        self.events.iter().filter(|e| matches!(e.kind, EventKind::Call { .. })).count() as u64
    }

    /// Checks every node against the tree bounds: height at most `m`, child
    /// indices and delegation batches within the node's degree, and no
    /// delegation at height `m`.
    pub fn shape_violations(&self, config: &TreeConfig) -> Vec<ShapeViolation> {
        let mut violations = Vec::new();
        let mut flag = |path: &NodePath, rule: String| violations.push(ShapeViolation { path: path.clone(), rule });
        for e in &self.events {
            let height = e.path.height();
            let allowed = config.degree_at(height);
            match &e.kind {
                EventKind::NodeStarted { height: logged, degree_budget, .. } => {
                    if height > config.max_height {
                        flag(&e.path, format!("height {height} exceeds {}", config.max_height));
                    }
                    if *logged != height {
                        flag(&e.path, format!("logged height {logged} != path height {height}"));
                    }
                    if *degree_budget != allowed {
                        flag(&e.path, format!("budget {degree_budget} != degree_at {allowed}"));
                    }
                    if let (Some(parent), Some(&index)) = (e.path.parent(), e.path.indices().last()) {
                        let parent_allowed = config.degree_at(parent.height());
                        if index >= parent_allowed {
                            flag(&e.path, format!("child index {index} >= parent degree {parent_allowed}"));
                        }
                    }
                }
                EventKind::Delegated { subtasks } => {
                    if subtasks.len() as u32 > allowed {
                        flag(&e.path, format!("{} subtasks > degree {allowed}", subtasks.len()));
                    }
                }
                EventKind::SubtreeRevision { new_subtasks, .. } => {
                    if new_subtasks.len() as u32 > allowed {
                        flag(&e.path, format!("{} revised subtasks > degree {allowed}", new_subtasks.len()));
                    }
                }
                EventKind::NodeFinished { children, .. } if *children > allowed => {
                    flag(&e.path, format!("{children} children > degree {allowed}"));
                }
                _ => {}
            }
        }
        violations
    }
}
