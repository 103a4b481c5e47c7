//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::sync::Mutex;

use treecode::harness::BenchmarkTask;
use treecode::model::NodePath;
use treecode::provider::{
    CallMeta, CompletionProvider, CompletionRequest, CompletionResponse, Phase, ProviderError, ScriptTable,
};
use treecode::trace::{EventKind, RunTrace};

pub const PLAN: &str = "1. Read the task.\n2. Write the function.\nVERDICT: PROCEED";
pub const CODE: &str = "```python\ndef solve(x):\n    return x\n```";
pub const TESTS: &str = "```python\ndef test_solve():\n    assert solve(1) == 1\n```";

/// Five distinct proposals; the orchestrator keeps as many as a node's budget.
pub fn proposals(count: usize) -> String {
    let mut s = String::from("```subtasks\n");
    for i in 0..count {
        s.push_str(&format!("- helper number {i} with its own interface\n"));
    }
    s.push_str("```");
    s
}

/// A script where every node proceeds, delegates `proposal_count` subtasks
/// when allowed, accepts its children and passes its tests first time.
pub fn script_with(proposal_count: usize) -> ScriptTable {
    let mut t = ScriptTable::new();
    t.set_default(Phase::Plan, PLAN)
        .set_default(Phase::Decompose, proposals(proposal_count))
        .set_default(Phase::Review, "VERDICT: ACCEPT")
        .set_default(Phase::Implement, CODE)
        .set_default(Phase::GenerateTests, TESTS)
        .set_default(Phase::Fix, CODE)
        .set_default(Phase::Clarify, "Use ascending order.");
    t
}

/// Enough proposals to saturate any budget used in the tests.
pub fn maximal_script() -> ScriptTable {
    script_with(8)
}

/// Degree budget recomputed from the definition, independent of the library.
pub fn oracle_degree(height: u32, m: u32, n: u32, k: u32) -> u32 {
    if height >= m {
        0
    } else {
        n.saturating_sub(k * (height - 1))
    }
}

/// Node count of a fully delegating tree: sum over levels of the product of
/// budgets above.
pub fn oracle_node_count(m: u32, n: u32, k: u32) -> u64 {
    let mut level = 1u64;
    let mut total = 0u64;
    for h in 1..=m {
        total += level;
        level *= u64::from(oracle_degree(h, m, n, k));
    }
    total
}

/// Internal (delegating) node count of a fully delegating tree.
pub fn oracle_internal_count(m: u32, n: u32, k: u32) -> u64 {
    let mut level = 1u64;
    let mut total = 0u64;
    for h in 1..=m {
        if oracle_degree(h, m, n, k) > 0 {
            total += level;
        }
        level *= u64::from(oracle_degree(h, m, n, k));
    }
    total
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoggedCall {
    pub meta: CallMeta,
    pub prompt: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

/// Records every request and the token counts returned for it.
pub struct Recorder<P> {
    pub inner: P,
    pub log: Mutex<Vec<LoggedCall>>,
}

impl<P> Recorder<P> {
    pub fn new(inner: P) -> Self {
        Self { inner, log: Mutex::new(Vec::new()) }
    }

    pub fn calls(&self) -> Vec<LoggedCall> {
        self.log.lock().unwrap().clone()
    }
}

impl<P: CompletionProvider> CompletionProvider for Recorder<P> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
        let response = self.inner.complete(request)?;
        let prompt = request.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n");
        self.log.lock().unwrap().push(LoggedCall {
            meta: request.meta.clone(),
            prompt,
            input_tokens: response.input_tokens,
            output_tokens: response.output_tokens,
        });
        Ok(response)
    }
}

/// Final children per node, from `NodeFinished` events (last one wins).
pub fn final_children(trace: &RunTrace) -> Vec<(NodePath, u32)> {
    let mut out: Vec<(NodePath, u32)> = Vec::new();
    for e in &trace.events {
        if let EventKind::NodeFinished { children, .. } = e.kind {
            out.retain(|(p, _)| p != &e.path);
            out.push((e.path.clone(), children));
        }
    }
    out
}

pub fn toy_suite(count: usize) -> Vec<BenchmarkTask> {
    (0..count)
        .map(|i| BenchmarkTask {
            task_id: format!("toy/{i}"),
            prompt: format!("Write solve(x) for toy problem {i}."),
            entry_point: "solve".into(),
            hidden_tests: format!("REQUIRE: def solve\n# hidden case {i}: HIDDEN-SENTINEL-{i}"),
            tags: vec!["toy".into()],
        })
        .collect()
}

pub fn path(s: &str) -> NodePath {
    s.parse().unwrap()
}
