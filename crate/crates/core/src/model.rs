//! Shared domain types: tree bounds, node identity, task specs, node records,
//! solution artifacts and token accounting.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bounds on tree growth and on every retry loop in the engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeConfig {
    /// Maximum tree height `m`. Nodes at this height are leaves.
    pub max_height: u32,
    /// Child budget `n` of the root.
    pub initial_degree: u32,
    /// Per-level reduction `k` of the child budget.
    pub degree_decay: u32,
    /// Maximum fix iterations `r` of the verification loop.
    pub max_verify_retries: u32,
    pub max_clarification_rounds: u32,
    pub max_structure_corrections: u32,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            max_height: 3,
            initial_degree: 3,
            degree_decay: 1,
            max_verify_retries: 3,
            max_clarification_rounds: 1,
            max_structure_corrections: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("{field} must be a positive integer, got {value}")]
    NotPositive { field: &'static str, value: u32 },
}

impl TreeConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, value) in [
            ("max_height", self.max_height),
            ("initial_degree", self.initial_degree),
            ("degree_decay", self.degree_decay),
        ] {
            if value == 0 {
                return Err(ConfigError::NotPositive { field, value });
            }
        }
        Ok(())
    }

    /// Child budget of a node at `height`; see [`degree_at`].
    pub fn degree_at(&self, height: u32) -> u32 {
        degree_at(height, self)
    }

    /// Upper bound on the number of nodes a single execution of the tree can
    /// create: the sum over levels of the product of the budgets above it.
    pub fn max_tree_nodes(&self) -> u64 {
        let mut total = 0u64;
        let mut level_width = 1u64;
        for height in 1..=self.max_height {
            total = total.saturating_add(level_width);
            level_width = level_width.saturating_mul(u64::from(self.degree_at(height)));
            if level_width == 0 {
                break;
            }
        }
        total
    }
}

/// Number of children a node at `height` (1-based) may spawn.
///
/// Zero at or beyond `max_height`; otherwise `n - k * (height - 1)` clamped at
/// zero.
pub fn degree_at(height: u32, config: &TreeConfig) -> u32 {
    if height == 0 || height >= config.max_height {
        return 0;
    }
    let decay = u64::from(config.degree_decay) * u64::from(height - 1);
    u64::from(config.initial_degree).saturating_sub(decay) as u32
}

/// Root-relative list of child indices. The empty path is the root.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct NodePath(Vec<u32>);

impl NodePath {
    pub fn root() -> Self {
        Self(Vec::new())
    }

    pub fn from_indices(indices: Vec<u32>) -> Self {
        Self(indices)
    }

    pub fn indices(&self) -> &[u32] {
        &self.0
    }

    pub fn is_root(&self) -> bool {
        self.0.is_empty()
    }

    /// 1-based height: the root has height 1.
    pub fn height(&self) -> u32 {
        self.0.len() as u32 + 1
    }

    pub fn child(&self, index: u32) -> Self {
        let mut indices = self.0.clone();
        indices.push(index);
        Self(indices)
    }

    pub fn parent(&self) -> Option<Self> {
        if self.0.is_empty() {
            None
        } else {
            Some(Self(self.0[..self.0.len() - 1].to_vec()))
        }
    }

    /// True when `self` lies in the subtree rooted at `ancestor` (inclusive).
    pub fn is_within(&self, ancestor: &NodePath) -> bool {
        self.0.starts_with(&ancestor.0)
    }
}

impl fmt::Display for NodePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("root");
        }
        for (i, index) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(".")?;
            }
            write!(f, "{index}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid node path `{0}`")]
pub struct ParsePathError(String);

impl FromStr for NodePath {
    type Err = ParsePathError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() || s == "root" {
            return Ok(Self::root());
        }
        s.split('.')
            .map(|part| part.parse::<u32>())
            .collect::<Result<Vec<_>, _>>()
            .map(Self)
            .map_err(|_| ParsePathError(s.to_string()))
    }
}

impl From<NodePath> for String {
    fn from(path: NodePath) -> Self {
        path.to_string()
    }
}

impl TryFrom<String> for NodePath {
    type Error = ParsePathError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

/// A unit of work handed to one code agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub description: String,
    pub parent_context: String,
    pub path: NodePath,
    pub degree_budget: u32,
}

impl TaskSpec {
    pub fn root(description: impl Into<String>, config: &TreeConfig) -> Self {
        Self {
            description: description.into(),
            parent_context: String::new(),
            path: NodePath::root(),
            degree_budget: config.degree_at(1),
        }
    }

    pub fn height(&self) -> u32 {
        self.path.height()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeStatus {
    Planned,
    Delegating,
    Implemented,
    Verified,
    Failed,
}

/// Output of a code agent after validation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolutionArtifact {
    pub code: String,
    pub reasoning_trace: String,
    pub verified: bool,
    pub tests_run: u32,
    pub fix_iterations: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clarification {
    pub question: String,
    pub answer: String,
}

/// Lifecycle state of one code agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub path: NodePath,
    pub task: TaskSpec,
    pub plan: String,
    pub subtasks: Vec<TaskSpec>,
    pub child_results: Vec<SolutionArtifact>,
    pub solution: Option<SolutionArtifact>,
    pub clarifications: Vec<Clarification>,
    pub structure_corrections: u32,
    pub usage: TokenUsage,
    pub status: NodeStatus,
}

impl NodeRecord {
    pub fn new(task: TaskSpec) -> Self {
        Self {
            path: task.path.clone(),
            task,
            plan: String::new(),
            subtasks: Vec::new(),
            child_results: Vec::new(),
            solution: None,
            clarifications: Vec::new(),
            structure_corrections: 0,
            usage: TokenUsage::default(),
            status: NodeStatus::Planned,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("token accounting overflow in `{field}`")]
pub struct AccountingError {
    pub field: &'static str,
}

/// Token and call counters. Counters only ever grow.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub completion_calls: u64,
    pub embedding_calls: u64,
}

impl TokenUsage {
    pub fn new(input_tokens: u64, output_tokens: u64, completion_calls: u64, embedding_calls: u64) -> Self {
        Self { input_tokens, output_tokens, completion_calls, embedding_calls }
    }

    pub fn completion(input_tokens: u64, output_tokens: u64) -> Self {
        Self::new(input_tokens, output_tokens, 1, 0)
    }

    pub fn embedding() -> Self {
        Self::new(0, 0, 0, 1)
    }

    pub fn total_tokens(&self) -> u64 {
        self.input_tokens.saturating_add(self.output_tokens)
    }

    /// Adds `other` in place.
    pub fn absorb(&mut self, other: TokenUsage) -> Result<(), AccountingError> {
        *self = merge_usage(*self, other)?;
        Ok(())
    }
}

/// Field-wise sum; a counter overflow is a fatal accounting error.
pub fn merge_usage(a: TokenUsage, b: TokenUsage) -> Result<TokenUsage, AccountingError> {
    fn add(x: u64, y: u64, field: &'static str) -> Result<u64, AccountingError> {
        x.checked_add(y).ok_or(AccountingError { field })
    }
    Ok(TokenUsage {
        input_tokens: add(a.input_tokens, b.input_tokens, "input_tokens")?,
        output_tokens: add(a.output_tokens, b.output_tokens, "output_tokens")?,
        completion_calls: add(a.completion_calls, b.completion_calls, "completion_calls")?,
        embedding_calls: add(a.embedding_calls, b.embedding_calls, "embedding_calls")?,
    })
}
