mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use common::*;
use proptest::prelude::*;
use treecode::memory::{MemoryConfig, MemoryStore};
use treecode::model::{NodeStatus, TreeConfig};
use treecode::orchestrator::{completion_call_bound, Orchestrator, OrchestratorOptions, RunError, Services};
use treecode::parallel::Execution;
use treecode::provider::{HashedBagEmbedder, Phase, ScriptTable, ScriptedProvider};
use treecode::trace::EventKind;
use treecode::validator::ScriptedRunner;

fn tree(m: u32, n: u32, k: u32) -> TreeConfig {
    TreeConfig { max_height: m, initial_degree: n, degree_decay: k, ..TreeConfig::default() }
}

fn options(config: TreeConfig) -> OrchestratorOptions {
    OrchestratorOptions { tree: config, ..OrchestratorOptions::default() }
}

const NO_DELEGATE: &str = "1. Write it directly.\nDELEGATE: NO\nVERDICT: PROCEED";

#[test]
fn single_node_run() {
    let provider = ScriptedProvider::new(maximal_script());
    let runner = ScriptedRunner::default();
    let orch = Orchestrator::new(options(tree(1, 3, 1)), Services { provider: &provider, memory: None, runner: &runner });
    let out = orch.run_workflow("return the input").unwrap();
    assert!(out.artifact.verified);
    assert_eq!(out.nodes.len(), 1);
    assert_eq!(out.stats.final_nodes, 1);
    assert_eq!(out.artifact.code, "def solve(x):\n    return x");
    assert!(out.trace.events_for(&path("root")).all(|e| !matches!(e.kind, EventKind::Call { phase: Phase::Decompose, .. })));
}

#[test]
fn one_plus_three_fan_out() {
    let mut script = maximal_script();
    for p in ["0", "1", "2"] {
        script.set_any_round(&path(p), Phase::Plan, NO_DELEGATE);
    }
    let provider = ScriptedProvider::new(script);
    let runner = ScriptedRunner::default();
    let orch = Orchestrator::new(options(tree(3, 3, 1)), Services { provider: &provider, memory: None, runner: &runner });
    let out = orch.run_workflow("build a small library").unwrap();
    let heights: std::collections::BTreeSet<u32> = out.nodes.iter().map(|n| n.path.height()).collect();
    assert_eq!(heights.into_iter().collect::<Vec<_>>(), vec![1, 2]);
    let mut children: Vec<u32> = final_children(&out.trace).iter().map(|(_, c)| *c).collect();
    children.sort_unstable_by(|a, b| b.cmp(a));
    assert_eq!(children, vec![3, 0, 0, 0]);
}

#[test]
fn spawn_counts_match_recomputed_degrees() {
    let provider = ScriptedProvider::new(maximal_script());
    let runner = ScriptedRunner::default();
    let (m, n, k) = (3, 3, 1);
    let orch = Orchestrator::new(options(tree(m, n, k)), Services { provider: &provider, memory: None, runner: &runner });
    let out = orch.run_workflow("build").unwrap();
    for (p, children) in final_children(&out.trace) {
        assert_eq!(children, oracle_degree(p.height(), m, n, k), "at {p}");
    }
    // height-2 nodes delegate two children each; their children never delegate
    assert!(out.nodes.iter().filter(|r| r.path.height() == 3).all(|r| r.subtasks.is_empty()));
    assert_eq!(out.nodes.len() as u64, oracle_node_count(m, n, k));
}

#[test]
fn implement_prompt_contains_child_code_verbatim_and_child_code_comes_first() {
    let mut script = maximal_script();
    script.set_any_round(&path("root"), Phase::Decompose, proposals(2));
    script.set_any_round(&path("root"), Phase::Implement, "```python\ndef main():\n    return helper_a() + helper_b()\n```");
    for (p, body) in [("0", "def helper_a():\n    return 1"), ("1", "def helper_b():\n    return 2")] {
        script.set_any_round(&path(p), Phase::Plan, NO_DELEGATE);
        script.set_any_round(&path(p), Phase::Implement, format!("```py\n{body}\n```"));
    }
    let provider = Recorder::new(ScriptedProvider::new(script));
    let runner = ScriptedRunner::default();
    let orch = Orchestrator::new(options(tree(2, 3, 1)), Services { provider: &provider, memory: None, runner: &runner });
    let out = orch.run_workflow("sum two helpers").unwrap();

    let root_implement = provider
        .calls()
        .into_iter()
        .find(|c| c.meta.path.is_root() && c.meta.phase == Phase::Implement)
        .unwrap();
    for child in out.nodes.iter().filter(|r| !r.path.is_root()) {
        let code = &child.solution.as_ref().unwrap().code;
        assert!(root_implement.prompt.contains(code.as_str()), "missing {code}");
    }
    let code = &out.artifact.code;
    let a = code.find("def helper_a").unwrap();
    let b = code.find("def helper_b").unwrap();
    let main = code.find("def main").unwrap();
    assert!(a < b && b < main, "{code}");
}

#[test]
fn fenced_code_with_language_tag_is_taken_byte_exactly() {
    let body = "def solve(x):\n\treturn  x  # spacing kept \n\n# trailing comment";
    let mut script = maximal_script();
    script.set_default(Phase::Implement, format!("Here you go:\n```python\n{body}\n```\nDone."));
    let provider = ScriptedProvider::new(script);
    let runner = ScriptedRunner::default();
    let orch = Orchestrator::new(options(tree(1, 1, 1)), Services { provider: &provider, memory: None, runner: &runner });
    assert_eq!(orch.run_workflow("t").unwrap().artifact.code, body);
}

#[test]
fn excess_and_duplicate_proposals_are_normalized() {
    let mut script = maximal_script();
    script.set_any_round(
        &path("root"),
        Phase::Decompose,
        "```subtasks\n- parse input\n- parse input\n- validate\n- compute\n- format\n- report\n```",
    );
    let provider = ScriptedProvider::new(script);
    let runner = ScriptedRunner::default();
    let orch = Orchestrator::new(options(tree(2, 3, 1)), Services { provider: &provider, memory: None, runner: &runner });
    let out = orch.run_workflow("t").unwrap();
    let root = &out.root;
    let descriptions: Vec<&str> = root.subtasks.iter().map(|t| t.description.as_str()).collect();
    assert_eq!(descriptions, ["parse input", "validate", "compute"]);
    let root_path = path("root");
    let kinds: Vec<&EventKind> = out.trace.events_for(&root_path).map(|e| &e.kind).collect();
    assert!(kinds.contains(&&EventKind::DuplicateSubtasksDropped { dropped: 1 }));
    assert!(kinds.contains(&&EventKind::DegreeTruncation { proposed: 5, kept: 3 }));
}

#[test]
fn root_clarification_is_auto_answered() {
    let mut script = maximal_script();
    script.set(&path("root"), Phase::Plan, 0, "1. ?\nVERDICT: CLARIFY: which sort order?");
    let provider = Recorder::new(ScriptedProvider::new(script));
    let runner = ScriptedRunner::default();
    let orch = Orchestrator::new(options(tree(1, 1, 1)), Services { provider: &provider, memory: None, runner: &runner });
    let out = orch.run_workflow("sort things").unwrap();
    assert_eq!(out.root.clarifications.len(), 1);
    assert!(provider.calls().iter().all(|c| c.meta.phase != Phase::Clarify));
    let replan = provider.calls().into_iter().filter(|c| c.meta.phase == Phase::Plan).nth(1).unwrap();
    assert!(replan.prompt.contains("most standard interpretation"));
}

#[test]
fn malformed_plan_proceeds_with_raw_text() {
    let mut script = maximal_script();
    script.set_default(Phase::Plan, "just some musings without a verdict");
    let provider = Recorder::new(ScriptedProvider::new(script));
    let runner = ScriptedRunner::default();
    let orch = Orchestrator::new(options(tree(1, 1, 1)), Services { provider: &provider, memory: None, runner: &runner });
    let out = orch.run_workflow("t").unwrap();
    assert_eq!(out.root.plan, "just some musings without a verdict");
    let plan_calls = provider.calls().iter().filter(|c| c.meta.phase == Phase::Plan).count();
    assert_eq!(plan_calls, 2, "one reformat retry");
    assert!(out.trace.events.iter().any(|e| matches!(&e.kind, EventKind::Warning { message } if message.contains("plan reply malformed"))));
}

#[test]
fn empty_implementation_retries_once_then_fails() {
    let mut script = maximal_script();
    script.set_default(Phase::Implement, "   ");
    let provider = Recorder::new(ScriptedProvider::new(script));
    let runner = ScriptedRunner::default();
    let orch = Orchestrator::new(options(tree(1, 1, 1)), Services { provider: &provider, memory: None, runner: &runner });
    let out = orch.run_workflow("t").unwrap();
    assert_eq!(out.root.status, NodeStatus::Failed);
    assert!(!out.artifact.verified);
    assert_eq!(provider.calls().iter().filter(|c| c.meta.phase == Phase::Implement).count(), 2);
    assert!(provider.calls().iter().all(|c| c.meta.phase != Phase::GenerateTests));
}

#[test]
fn invalid_config_rejected_before_any_call() {
    let provider = Recorder::new(ScriptedProvider::new(maximal_script()));
    let runner = ScriptedRunner::default();
    let orch = Orchestrator::new(options(tree(0, 1, 1)), Services { provider: &provider, memory: None, runner: &runner });
    assert!(matches!(orch.run_workflow("t"), Err(RunError::Config(_))));
    let orch = Orchestrator::new(options(tree(1, 1, 1)), Services { provider: &provider, memory: None, runner: &runner });
    assert!(matches!(orch.run_workflow("  "), Err(RunError::EmptyInstruction)));
    assert!(provider.calls().is_empty());
}

#[test]
fn provider_failure_aborts_with_partial_trace() {
    let mut script = ScriptTable::new();
    script.set_default(Phase::Plan, PLAN);
    let provider = ScriptedProvider::new(script);
    let runner = ScriptedRunner::default();
    let orch = Orchestrator::new(options(tree(2, 2, 1)), Services { provider: &provider, memory: None, runner: &runner });
    match orch.run_workflow("t") {
        Err(RunError::Aborted { trace, usage, .. }) => {
            assert!(!trace.events.is_empty());
            assert!(usage.completion_calls >= 1);
        }
        other => panic!("expected abort, got {other:?}"),
    }
}

#[test]
fn only_verified_nodes_reach_memory() {
    let mut script = maximal_script();
    script.set_any_round(&path("root"), Phase::Decompose, proposals(2));
    script.set_any_round(&path("1"), Phase::Implement, "```python\ndef BUG():\n    pass\n```");
    script.set_any_round(&path("1"), Phase::Fix, "```python\ndef BUG():\n    pass\n```");
    let provider = ScriptedProvider::new(script);
    let runner = ScriptedRunner::default();
    let store = MemoryStore::new(MemoryConfig::default(), Arc::new(HashedBagEmbedder::default())).unwrap();
    let orch = Orchestrator::new(
        options(tree(2, 2, 1)),
        Services { provider: &provider, memory: Some(&store), runner: &runner },
    );
    let out = orch.run_workflow("compose two helpers into a final answer").unwrap();
    let failed = out.nodes.iter().find(|n| n.path == path("1")).unwrap();
    assert_eq!(failed.status, NodeStatus::Failed);
    assert!(out.trace.events_for(&path("1")).all(|e| !matches!(e.kind, EventKind::MemoryUpdated { .. })));
    // the failed child's code reaches the parent, whose first test run fails on it
    let root_path = path("root");
    let first_run = out
        .trace
        .events_for(&root_path)
        .find_map(|e| match &e.kind {
            EventKind::SandboxRun { verdict, .. } => Some(*verdict),
            _ => None,
        })
        .unwrap();
    assert_eq!(first_run, treecode::validator::Verdict::Fail);
    let updates = out.trace.events.iter().filter(|e| matches!(e.kind, EventKind::MemoryUpdated { .. })).count();
    let verified = out.nodes.iter().filter(|n| n.status == NodeStatus::Verified).count();
    assert_eq!(updates, verified);
}

#[test]
fn unverified_child_is_marked_in_implement_prompt() {
    let mut script = maximal_script();
    script.set_any_round(&path("root"), Phase::Decompose, proposals(1));
    script.set_any_round(&path("0"), Phase::Implement, "```python\ndef BUG():\n    pass\n```");
    script.set_any_round(&path("0"), Phase::Fix, "```python\ndef BUG():\n    pass\n```");
    let provider = Recorder::new(ScriptedProvider::new(script));
    let runner = ScriptedRunner::default();
    let orch = Orchestrator::new(options(tree(2, 2, 1)), Services { provider: &provider, memory: None, runner: &runner });
    orch.run_workflow("t").unwrap();
    let implement = provider.calls().into_iter().find(|c| c.meta.path.is_root() && c.meta.phase == Phase::Implement).unwrap();
    assert!(implement.prompt.contains("unverified"));
    assert!(implement.prompt.contains("def BUG"));
}

#[test]
fn revision_budget_exhaustion_is_flagged() {
    let mut script = maximal_script();
    script.set_default(Phase::Review, format!("VERDICT: REVISE\n{}", proposals(1)));
    let provider = ScriptedProvider::new(script);
    let runner = ScriptedRunner::default();
    let orch = Orchestrator::new(options(tree(2, 2, 1)), Services { provider: &provider, memory: None, runner: &runner });
    let out = orch.run_workflow("t").unwrap();
    assert_eq!(out.root.structure_corrections, 1);
    assert_eq!(out.stats.revisions, 1);
    assert!(out.trace.events.iter().any(|e| e.kind == EventKind::StructureCorrectionExhausted));
    // first batch of 2 children, then 1 revised child
    assert_eq!(out.stats.executed_nodes, 1 + 2 + 1);
    assert_eq!(out.stats.final_nodes, 2);
}

#[test]
fn memory_section_only_when_something_was_retrieved() {
    let provider = Recorder::new(ScriptedProvider::new(maximal_script()));
    let runner = ScriptedRunner::default();
    let store = MemoryStore::new(MemoryConfig::default(), Arc::new(HashedBagEmbedder::default())).unwrap();
    let orch = Orchestrator::new(
        options(tree(1, 1, 1)),
        Services { provider: &provider, memory: Some(&store), runner: &runner },
    );
    let first = orch.run_workflow("reverse a string").unwrap();
    let second = orch.run_workflow("reverse a string").unwrap();
    let plans: Vec<_> = provider.calls().into_iter().filter(|c| c.meta.phase == Phase::Plan).collect();
    assert!(!plans[0].prompt.contains("Relevant past experience"));
    assert!(plans[1].prompt.contains("Relevant past experience"));
    assert!(first.trace.events.iter().all(|e| !matches!(e.kind, EventKind::MemoryRetrieved { .. })));
    assert!(second.trace.events.iter().any(|e| matches!(e.kind, EventKind::MemoryRetrieved { .. })));
    assert_eq!(store.len(), 1, "second run merged into the first record");
}

#[test]
fn parallel_siblings_build_the_same_tree() {
    let run = |mode| {
        let provider = ScriptedProvider::new(maximal_script());
        let runner = ScriptedRunner::default();
        let opts = OrchestratorOptions { sibling_execution: mode, ..options(tree(3, 3, 1)) };
        let out = Orchestrator::new(opts, Services { provider: &provider, memory: None, runner: &runner })
            .run_workflow("t")
            .unwrap();
        let executions: BTreeMap<_, _> = out.trace.executions();
        (out.artifact, executions, out.usage)
    };
    assert_eq!(run(Execution::Sequential), run(Execution::Parallel));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// A worst-case script (always clarify, always revise, never pass) stays
    /// within the closed-form call bound.
    #[test]
    fn completion_calls_within_bound(m in 1u32..=3, n in 1u32..=3, k in 1u32..=2, r in 0u32..=2, c in 0u32..=2, s in 0u32..=1) {
        let config = TreeConfig {
            max_height: m, initial_degree: n, degree_decay: k,
            max_verify_retries: r, max_clarification_rounds: c, max_structure_corrections: s,
        };
        let mut script = maximal_script();
        script.set_default(Phase::Plan, "1. hmm\nVERDICT: CLARIFY: what exactly?");
        script.set_default(Phase::Review, format!("VERDICT: REVISE\n{}", proposals(8)));
        script.set_default(Phase::Implement, "```python\nBUG = 1\n```");
        script.set_default(Phase::Fix, "```python\nBUG = 2\n```");
        script.set_default(Phase::GenerateTests, "```python\nSYNTAX_ERROR\n```");
        let provider = Recorder::new(ScriptedProvider::new(script));
        let runner = ScriptedRunner::default();
        let orch = Orchestrator::new(options(config), Services { provider: &provider, memory: None, runner: &runner });
        let out = orch.run_workflow("t").unwrap();
        let calls = provider.calls().len() as u64;
        prop_assert_eq!(calls, out.usage.completion_calls);
        prop_assert!(calls <= completion_call_bound(&config), "{} > {}", calls, completion_call_bound(&config));
    }
}
