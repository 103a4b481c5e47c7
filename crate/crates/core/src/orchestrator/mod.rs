//! The recursive code-agent workflow.
//!
//! Each agent runs Plan → (Delegate → children → Review) → Implement →
//! Validate → Return. Two localized recovery paths exist:
//!
//! - clarification (bottom-up): a child whose plan carries a
//!   `NeedsClarification` verdict asks its parent, which answers with a
//!   refined specification; the child then plans again.
//! - structure correction (top-down): after its children finish, a parent
//!   reviews their results and may discard them all and re-run a new set of
//!   subtasks. Nothing outside that parent's subtree re-executes.
//!
//! Every budget is finite, so a run always terminates; see
//! [`completion_call_bound`].

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calls::{call_structured, PhaseCaller, Structured};
use crate::memory::{MemoryCandidate, MemoryError, MemoryStore, ScoredRecord};
use crate::model::{
    AccountingError, Clarification, ConfigError, NodePath, NodeRecord, NodeStatus, SolutionArtifact, TaskSpec,
    TokenUsage, TreeConfig,
};
use crate::parallel::{map_indexed, Execution};
use crate::parse::{self, PlanReply, PlanVerdict, ReviewReply};
use crate::prompts;
use crate::provider::{
    estimate_tokens, CallMeta, CompletionProvider, CompletionRequest, CompletionResponse, Message, Phase,
    ProviderError,
};
use crate::trace::{EmbeddingPurpose, EventKind, RunTrace, TraceLog};
use crate::validator::{self, Repairer, SandboxError, SandboxResult, TestRunner, VerifyError};

/// Answer given to a root-level clarification request.
pub const STANDARD_INTERPRETATION: &str =
    "No further detail is available. Proceed with the most standard interpretation of the task.";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrchestratorOptions {
    pub tree: TreeConfig,
    /// How sibling subtrees run. Parallel mode needs concurrent-safe
    /// providers and memory, which all bundled backends are.
    pub sibling_execution: Execution,
    pub stderr_budget_bytes: usize,
    /// Characters of the parent plan handed to each child as context.
    pub plan_excerpt_chars: usize,
    /// Lines of each child's code shown to the parent's review.
    pub review_header_lines: usize,
}

impl Default for OrchestratorOptions {
    fn default() -> Self {
        Self {
            tree: TreeConfig::default(),
            sibling_execution: Execution::Sequential,
            stderr_budget_bytes: 4096,
            plan_excerpt_chars: 2000,
            review_header_lines: 40,
        }
    }
}

/// Handles to the model, memory and test runner used by a run.
#[derive(Clone, Copy)]
pub struct Services<'a> {
    pub provider: &'a dyn CompletionProvider,
    pub memory: Option<&'a MemoryStore>,
    pub runner: &'a dyn TestRunner,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeStats {
    /// Node executions, including subtrees later discarded by a revision.
    pub executed_nodes: u32,
    /// Nodes in the final tree.
    pub final_nodes: u32,
    pub max_height: u32,
    pub revisions: u32,
    pub clarifications: u32,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub artifact: SolutionArtifact,
    /// Final state of the root agent.
    pub root: NodeRecord,
    /// Every node execution in completion order.
    pub nodes: Vec<NodeRecord>,
    pub trace: RunTrace,
    /// Sum of every executed node's usage.
    pub usage: TokenUsage,
    pub stats: TreeStats,
}

#[derive(Debug, Error)]
pub enum NodeError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Accounting(#[from] AccountingError),
}

impl From<VerifyError> for NodeError {
    fn from(e: VerifyError) -> Self {
        match e {
            VerifyError::Sandbox(s) => NodeError::Sandbox(s),
            VerifyError::Provider(p) => NodeError::Provider(p),
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("run aborted: {source}")]
    Aborted {
        #[source]
        source: NodeError,
        trace: RunTrace,
        usage: TokenUsage,
    },
}

/// Upper bound on completion calls in one run under `config`.
///
/// A node makes at most: `2(1+c)` plan calls (each with one reformat), `c`
/// clarification answers, 2 decompose, `2(1+s)` review, 2 implement, 4 test
/// generation, `r` fix and 2 consolidation calls. Executions at height `h+1`
/// are at most executions at `h` times `(1+s)` batches of `degree_at(h)`.
pub fn completion_call_bound(config: &TreeConfig) -> u64 {
    let c = u64::from(config.max_clarification_rounds);
    let s = u64::from(config.max_structure_corrections);
    let r = u64::from(config.max_verify_retries);
    let per_node = 2 * (1 + c) + c + 2 + 2 * (1 + s) + 2 + 4 + r + 2;
    let mut executions = 1u64;
    let mut total = 0u64;
    for height in 1..=config.max_height {
        total = total.saturating_add(executions);
        executions = executions.saturating_mul((1 + s) * u64::from(config.degree_at(height)));
        if executions == 0 {
            break;
        }
    }
    total.saturating_mul(per_node)
}

struct RunContext<'a> {
    services: Services<'a>,
    options: OrchestratorOptions,
    trace: TraceLog,
    rounds: Mutex<HashMap<(NodePath, Phase), u32>>,
    executed: Mutex<Vec<NodeRecord>>,
}

impl RunContext<'_> {
    fn next_round(&self, path: &NodePath, phase: Phase) -> u32 {
        let mut rounds = self.rounds.lock().expect("round lock poisoned");
        let slot = rounds.entry((path.clone(), phase)).or_insert(0);
        let round = *slot;
        *slot += 1;
        round
    }

    fn log(&self, path: &NodePath, kind: EventKind) -> u64 {
        self.trace.append(path, kind)
    }
}

/// Calls made on behalf of one node: assigns rounds, logs a `Call` event
/// and charges the node's usage.
struct NodeCaller<'c, 'a> {
    ctx: &'c RunContext<'a>,
    path: NodePath,
    usage: TokenUsage,
    memory_context_tokens: u64,
}

impl<'c, 'a> NodeCaller<'c, 'a> {
    fn new(ctx: &'c RunContext<'a>, path: NodePath) -> Self {
        Self { ctx, path, usage: TokenUsage::default(), memory_context_tokens: 0 }
    }

    fn charge(&mut self, usage: TokenUsage) -> Result<(), NodeError> {
        self.usage.absorb(usage)?;
        Ok(())
    }
}

impl PhaseCaller for NodeCaller<'_, '_> {
    fn call(&mut self, phase: Phase, messages: Vec<Message>) -> Result<CompletionResponse, ProviderError> {
        let round = self.ctx.next_round(&self.path, phase);
        let request = CompletionRequest::new(CallMeta { path: self.path.clone(), phase, round }, messages);
        let response = self.ctx.services.provider.complete(&request)?;
        self.usage
            .absorb(TokenUsage::completion(response.input_tokens, response.output_tokens))
            .map_err(|e| ProviderError::Config(e.to_string()))?;
        self.ctx.log(
            &self.path,
            EventKind::Call {
                phase,
                round,
                response_kind: request.response_kind,
                input_tokens: response.input_tokens,
                output_tokens: response.output_tokens,
                memory_context_tokens: if phase == Phase::Plan { self.memory_context_tokens } else { 0 },
            },
        );
        Ok(response)
    }
}

struct ModelRepairer<'n, 'c, 'a> {
    caller: &'n mut NodeCaller<'c, 'a>,
    task: &'n str,
    stderr_budget: usize,
}

impl Repairer for ModelRepairer<'_, '_, '_> {
    fn repair(&mut self, code: &str, result: &SandboxResult, _iteration: u32) -> Result<String, ProviderError> {
        validator::fix_errors(self.caller, self.task, code, result, self.stderr_budget)
    }

    fn observe(&mut self, attempt: u32, result: &SandboxResult) {
        self.caller.ctx.log(
            &self.caller.path,
            EventKind::SandboxRun {
                attempt,
                verdict: result.verdict,
                failing_cases: result.failing_cases.clone(),
                wall_time: result.wall_time,
                stdout_truncated: result.stdout_truncated,
                stderr_truncated: result.stderr_truncated,
            },
        );
    }
}

/// What a child sees of its parent when asking for clarification.
struct ParentView<'p> {
    description: &'p str,
    plan: &'p str,
}

struct NodeResult {
    artifact: SolutionArtifact,
    final_nodes: u32,
}

/// Subtask list after de-duplication and truncation to the node's budget.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizedSubtasks {
    pub subtasks: Vec<String>,
    pub duplicates_dropped: u32,
    pub proposed: u32,
    pub truncated: bool,
}

/// Drops repeated descriptions (first occurrence wins) and keeps at most
/// `budget` entries.
pub fn normalize_subtasks(proposals: Vec<String>, budget: u32) -> NormalizedSubtasks {
    let mut seen = Vec::<String>::new();
    let mut duplicates = 0;
    for p in proposals {
        let p = p.trim().to_string();
        if p.is_empty() {
            continue;
        }
        if seen.iter().any(|s| s.eq_ignore_ascii_case(&p)) {
            duplicates += 1;
        } else {
            seen.push(p);
        }
    }
    let proposed = seen.len() as u32;
    let truncated = proposed > budget;
    seen.truncate(budget as usize);
    NormalizedSubtasks { subtasks: seen, duplicates_dropped: duplicates, proposed, truncated }
}

/// Runs code agents over a tree rooted at one user instruction.
pub struct Orchestrator<'a> {
    options: OrchestratorOptions,
    services: Services<'a>,
}

impl<'a> Orchestrator<'a> {
    pub fn new(options: OrchestratorOptions, services: Services<'a>) -> Self {
        Self { options, services }
    }

    pub fn options(&self) -> &OrchestratorOptions {
        &self.options
    }

    /// Solves `instruction` with a fresh tree. Configuration is validated
    /// before any model call.
    pub fn run_workflow(&self, instruction: &str) -> Result<RunOutcome, RunError> {
        self.options.tree.validate()?;
        if instruction.trim().is_empty() {
            return Err(RunError::EmptyInstruction);
        }
        let ctx = RunContext {
            services: self.services,
            options: self.options,
            trace: TraceLog::new(),
            rounds: Mutex::new(HashMap::new()),
            executed: Mutex::new(Vec::new()),
        };
        let root_task = TaskSpec::root(instruction, &self.options.tree);
        let result = execute_code_agent(&ctx, root_task, None);
        let nodes = ctx.executed.into_inner().expect("executed lock poisoned");
        let trace = ctx.trace.into_trace();
        let mut usage = TokenUsage::default();
        for node in &nodes {
            if let Err(e) = usage.absorb(node.usage) {
                return Err(RunError::Aborted { source: e.into(), trace, usage });
            }
        }
        match result {
            Ok(result) => {
                let root = nodes.iter().rev().find(|n| n.path.is_root()).cloned().expect("root recorded last");
                let stats = TreeStats {
                    executed_nodes: nodes.len() as u32,
                    final_nodes: result.final_nodes,
                    max_height: nodes.iter().map(|n| n.path.height()).max().unwrap_or(1),
                    revisions: trace
                        .events
                        .iter()
                        .filter(|e| matches!(e.kind, EventKind::SubtreeRevision { .. }))
                        .count() as u32,
                    clarifications: nodes.iter().map(|n| n.clarifications.len() as u32).sum(),
                };
                Ok(RunOutcome { artifact: result.artifact, root, nodes, trace, usage, stats })
            }
            Err(source) => {
                // Nodes cut short never reach the executed list; the trace
                // still has every call they made.
                let usage = trace.call_usage();
                Err(RunError::Aborted { source, trace, usage })
            }
        }
    }
}

/// Runs one agent and its subtree. The node's record is pushed to the run's
/// executed list when it finishes, whether verified or failed.
fn execute_code_agent(ctx: &RunContext<'_>, task: TaskSpec, parent: Option<&ParentView<'_>>) -> Result<NodeResult, NodeError> {
    let path = task.path.clone();
    let height = task.height();
    let config = ctx.options.tree;
    ctx.log(
        &path,
        EventKind::NodeStarted { height, degree_budget: task.degree_budget, description: task.description.clone() },
    );
    let mut record = NodeRecord::new(task.clone());
    let mut caller = NodeCaller::new(ctx, path.clone());

    // Plan, with retrieval and bounded clarification.
    let retrieved = retrieve_memory(ctx, &mut caller, &task)?;
    let mut plan = plan_phase(&mut caller, &task, &retrieved, &record.clarifications, &config)?;
    let mut clarification_round = 0;
    while let PlanVerdict::NeedsClarification(question) = plan.verdict.clone() {
        if clarification_round >= config.max_clarification_rounds {
            ctx.log(&path, EventKind::Warning { message: format!("clarification budget exhausted: {question}") });
            break;
        }
        clarification_round += 1;
        let (answer, answered_by) = match parent {
            Some(parent) => (clarify(&mut caller, parent, &task, &question)?, "parent"),
            None => (STANDARD_INTERPRETATION.to_string(), "auto"),
        };
        ctx.log(
            &path,
            EventKind::Clarification {
                question: question.clone(),
                refined_spec: answer.clone(),
                round: clarification_round,
                answered_by: answered_by.into(),
            },
        );
        record.clarifications.push(Clarification { question, answer });
        plan = plan_phase(&mut caller, &task, &retrieved, &record.clarifications, &config)?;
    }
    record.plan = plan.plan.clone();
    record.status = NodeStatus::Planned;

    // Delegate, run children, review.
    let mut child_results = Vec::new();
    let mut final_nodes = 1;
    if height < config.max_height && task.degree_budget >= 1 && plan.delegate != Some(false) {
        let subtasks = delegate_phase(&mut caller, &record.plan, &task)?;
        if !subtasks.is_empty() {
            record.status = NodeStatus::Delegating;
            ctx.log(&path, EventKind::Delegated { subtasks: subtasks.iter().map(|t| t.description.clone()).collect() });
            record.subtasks = subtasks;
            let view = ParentView { description: &task.description, plan: &record.plan };
            let mut batch = run_children(ctx, &record.subtasks, &view)?;
            loop {
                match review_and_correct(&mut caller, &record, &batch)? {
                    ReviewDecision::Accept => break,
                    ReviewDecision::Revise(proposals) => {
                        if record.structure_corrections >= config.max_structure_corrections {
                            ctx.log(&path, EventKind::StructureCorrectionExhausted);
                            break;
                        }
                        record.structure_corrections += 1;
                        let normalized = normalize_subtasks(proposals, task.degree_budget);
                        log_normalization(ctx, &path, &normalized);
                        ctx.log(
                            &path,
                            EventKind::SubtreeRevision {
                                discarded_child_count: batch.len() as u32,
                                new_subtasks: normalized.subtasks.clone(),
                                revision_index: record.structure_corrections,
                            },
                        );
                        record.subtasks = child_tasks(&normalized.subtasks, &task, &record.plan, &ctx.options);
                        batch = run_children(ctx, &record.subtasks, &view)?;
                        if record.subtasks.is_empty() {
                            break;
                        }
                    }
                }
            }
            final_nodes += batch.iter().map(|r| r.final_nodes).sum::<u32>();
            child_results = batch.into_iter().map(|r| r.artifact).collect();
        }
    }
    record.child_results = child_results;

    // Implement.
    let Some(candidate) = implement_phase(&mut caller, &record.plan, &record.child_results, &record.subtasks, &task)? else {
        ctx.log(&path, EventKind::Warning { message: "implementation produced no code".into() });
        let code = join_code(record.child_results.iter().map(|c| c.code.as_str()), None);
        let artifact = SolutionArtifact { code, reasoning_trace: reasoning_trace(&record), ..SolutionArtifact::default() };
        return finish(ctx, record, caller, artifact, NodeStatus::Failed, final_nodes);
    };
    record.status = NodeStatus::Implemented;

    // Validate.
    let runner = ctx.services.runner;
    let generated = validator::generate_tests(&mut caller, runner, &task.description, &candidate)?;
    ctx.log(
        &path,
        EventKind::TestsGenerated {
            source: generated.suite.source,
            regenerated: generated.regenerated,
            smoke_fallback: generated.smoke_fallback,
        },
    );
    let verification = {
        let mut repairer = ModelRepairer {
            caller: &mut caller,
            task: &task.description,
            stderr_budget: ctx.options.stderr_budget_bytes,
        };
        validator::verify(&candidate, &generated.suite, config.max_verify_retries, runner, &mut repairer)?
    };
    let mut artifact = verification.artifact;
    artifact.reasoning_trace = reasoning_trace(&record);
    let status = if artifact.verified { NodeStatus::Verified } else { NodeStatus::Failed };

    // Return: store verified experience.
    if artifact.verified {
        if let Some(memory) = ctx.services.memory {
            let candidate = MemoryCandidate {
                description: task.description.clone(),
                reasoning_trace: artifact.reasoning_trace.clone(),
                code: artifact.code.clone(),
                depth: height,
            };
            let report = memory.update(candidate, Some(&mut caller))?;
            caller.charge(report.usage)?;
            ctx.log(&path, EventKind::EmbeddingCall { purpose: EmbeddingPurpose::Update, count: report.usage.embedding_calls });
            if report.consolidation_fallback {
                ctx.log(&path, EventKind::Warning { message: "memory consolidation fell back to newest-wins".into() });
            }
            ctx.log(&path, EventKind::MemoryUpdated { outcome: report.outcome });
        }
    }
    finish(ctx, record, caller, artifact, status, final_nodes)
}

fn finish(
    ctx: &RunContext<'_>,
    mut record: NodeRecord,
    caller: NodeCaller<'_, '_>,
    artifact: SolutionArtifact,
    status: NodeStatus,
    final_nodes: u32,
) -> Result<NodeResult, NodeError> {
    record.usage = caller.usage;
    record.status = status;
    record.solution = Some(artifact.clone());
    ctx.log(
        &record.path,
        EventKind::NodeFinished {
            status,
            verified: artifact.verified,
            tests_run: artifact.tests_run,
            fix_iterations: artifact.fix_iterations,
            children: record.child_results.len() as u32,
            usage: record.usage,
        },
    );
    ctx.executed.lock().expect("executed lock poisoned").push(record);
    Ok(NodeResult { artifact, final_nodes })
}

fn reasoning_trace(record: &NodeRecord) -> String {
    let mut trace = record.plan.clone();
    for c in &record.clarifications {
        trace.push_str(&format!("\n\nClarification: {}\nAnswer: {}", c.question, c.answer));
    }
    trace
}

fn retrieve_memory(
    ctx: &RunContext<'_>,
    caller: &mut NodeCaller<'_, '_>,
    task: &TaskSpec,
) -> Result<Vec<ScoredRecord>, NodeError> {
    let Some(memory) = ctx.services.memory else {
        return Ok(Vec::new());
    };
    let retrieval = memory.retrieve(&task.description, task.height())?;
    caller.charge(retrieval.usage)?;
    if retrieval.usage.embedding_calls > 0 {
        ctx.log(
            &task.path,
            EventKind::EmbeddingCall { purpose: EmbeddingPurpose::Retrieve, count: retrieval.usage.embedding_calls },
        );
    }
    if !retrieval.hits.is_empty() {
        ctx.log(
            &task.path,
            EventKind::MemoryRetrieved {
                record_ids: retrieval.hits.iter().map(|h| h.record.record_id).collect(),
                similarities: retrieval.hits.iter().map(|h| h.similarity).collect(),
            },
        );
    }
    Ok(retrieval.hits)
}

/// Renders the retrieved-memory message, or `None` when nothing was retrieved.
pub fn memory_message(retrieved: &[ScoredRecord]) -> Option<String> {
    if retrieved.is_empty() {
        return None;
    }
    let records: Vec<String> = retrieved
        .iter()
        .map(|hit| {
            prompts::MEMORY_RECORD.render(&[
                ("similarity", &format!("{:.3}", hit.similarity)),
                ("description", &hit.record.description),
                ("reasoning", &hit.record.reasoning_trace),
                ("code", &hit.record.code),
            ])
        })
        .collect();
    Some(prompts::MEMORY.render(&[("records", &records.join("\n"))]))
}

fn plan_phase(
    caller: &mut NodeCaller<'_, '_>,
    task: &TaskSpec,
    retrieved: &[ScoredRecord],
    clarifications: &[Clarification],
    config: &TreeConfig,
) -> Result<PlanReply, NodeError> {
    let mut refinements = String::new();
    if !clarifications.is_empty() {
        refinements.push_str("\n## Clarifications\n");
        for c in clarifications {
            refinements.push_str(&format!("Q: {}\nA: {}\n", c.question, c.answer));
        }
    }
    let parent_context = if task.parent_context.is_empty() { "(none)" } else { task.parent_context.as_str() };
    let prompt = prompts::PLAN.render(&[
        ("task", &task.description),
        ("parent_context", parent_context),
        ("height", &task.height().to_string()),
        ("max_height", &config.max_height.to_string()),
        ("degree_budget", &task.degree_budget.to_string()),
        ("refinements", &refinements),
    ]);
    let mut messages = vec![Message::system(prompts::SYSTEM.text)];
    caller.memory_context_tokens = 0;
    if let Some(memory) = memory_message(retrieved) {
        caller.memory_context_tokens = estimate_tokens(&memory);
        messages.push(Message::user(memory));
    }
    messages.push(Message::user(prompt));
    let reply = call_structured(caller, Phase::Plan, messages, parse::parse_plan);
    caller.memory_context_tokens = 0;
    Ok(match reply? {
        Structured::Parsed(plan) => plan,
        Structured::Malformed { raw, reason } => {
            caller.ctx.log(
                &task.path,
                EventKind::Warning { message: format!("plan reply malformed ({reason}); proceeding with raw text") },
            );
            PlanReply { plan: raw.trim().to_string(), verdict: PlanVerdict::Proceed, delegate: None }
        }
    })
}

fn clarify(
    caller: &mut NodeCaller<'_, '_>,
    parent: &ParentView<'_>,
    task: &TaskSpec,
    question: &str,
) -> Result<String, NodeError> {
    let prompt = prompts::CLARIFY.render(&[
        ("task", parent.description),
        ("plan", parent.plan),
        ("child_path", &task.path.to_string()),
        ("child_task", &task.description),
        ("question", question),
    ]);
    let reply = caller.call(Phase::Clarify, vec![Message::system(prompts::SYSTEM.text), Message::user(prompt)])?;
    let answer = reply.content.trim();
    Ok(if answer.is_empty() { STANDARD_INTERPRETATION.to_string() } else { answer.to_string() })
}

fn excerpt(text: &str, max_chars: usize) -> &str {
    match text.char_indices().nth(max_chars) {
        Some((i, _)) => &text[..i],
        None => text,
    }
}

fn child_tasks(descriptions: &[String], parent: &TaskSpec, plan: &str, options: &OrchestratorOptions) -> Vec<TaskSpec> {
    let child_height = parent.height() + 1;
    let context = format!(
        "Parent task: {}\nParent plan (excerpt):\n{}",
        parent.description,
        excerpt(plan, options.plan_excerpt_chars)
    );
    descriptions
        .iter()
        .enumerate()
        .map(|(i, d)| TaskSpec {
            description: d.clone(),
            parent_context: context.clone(),
            path: parent.path.child(i as u32),
            degree_budget: options.tree.degree_at(child_height),
        })
        .collect()
}

fn log_normalization(ctx: &RunContext<'_>, path: &NodePath, n: &NormalizedSubtasks) {
    if n.duplicates_dropped > 0 {
        ctx.log(path, EventKind::DuplicateSubtasksDropped { dropped: n.duplicates_dropped });
    }
    if n.truncated {
        ctx.log(path, EventKind::DegreeTruncation { proposed: n.proposed, kept: n.subtasks.len() as u32 });
    }
}

fn delegate_phase(caller: &mut NodeCaller<'_, '_>, plan: &str, task: &TaskSpec) -> Result<Vec<TaskSpec>, NodeError> {
    let prompt = prompts::DECOMPOSE.render(&[
        ("task", &task.description),
        ("plan", plan),
        ("degree_budget", &task.degree_budget.to_string()),
    ]);
    let messages = vec![Message::system(prompts::SYSTEM.text), Message::user(prompt)];
    let proposals = match call_structured(caller, Phase::Decompose, messages, parse::parse_subtasks)? {
        Structured::Parsed(list) => list,
        Structured::Malformed { reason, .. } => {
            caller.ctx.log(
                &task.path,
                EventKind::Warning { message: format!("decomposition malformed ({reason}); not delegating") },
            );
            Vec::new()
        }
    };
    let normalized = normalize_subtasks(proposals, task.degree_budget);
    log_normalization(caller.ctx, &task.path, &normalized);
    Ok(child_tasks(&normalized.subtasks, task, plan, &caller.ctx.options))
}

fn run_children(ctx: &RunContext<'_>, subtasks: &[TaskSpec], parent: &ParentView<'_>) -> Result<Vec<NodeResult>, NodeError> {
    map_indexed(ctx.options.sibling_execution, subtasks, |_, t| execute_code_agent(ctx, t.clone(), Some(parent)))
        .into_iter()
        .collect()
}

enum ReviewDecision {
    Accept,
    Revise(Vec<String>),
}

fn review_and_correct(
    caller: &mut NodeCaller<'_, '_>,
    parent: &NodeRecord,
    children: &[NodeResult],
) -> Result<ReviewDecision, NodeError> {
    let lines = caller.ctx.options.review_header_lines;
    let sections: Vec<String> = parent
        .subtasks
        .iter()
        .zip(children)
        .enumerate()
        .map(|(i, (t, r))| {
            prompts::REVIEW_CHILD.render(&[
                ("index", &(i + 1).to_string()),
                ("description", &t.description),
                ("status", if r.artifact.verified { "verified" } else { "unverified" }),
                ("header", &parse::head_lines(&r.artifact.code, lines)),
            ])
        })
        .collect();
    let prompt = prompts::REVIEW.render(&[
        ("task", &parent.task.description),
        ("plan", &parent.plan),
        ("children", &sections.join("\n")),
        ("degree_budget", &parent.task.degree_budget.to_string()),
    ]);
    let messages = vec![Message::system(prompts::SYSTEM.text), Message::user(prompt)];
    Ok(match call_structured(caller, Phase::Review, messages, parse::parse_review)? {
        Structured::Parsed(ReviewReply::Accept) => ReviewDecision::Accept,
        Structured::Parsed(ReviewReply::Revise(list)) => ReviewDecision::Revise(list),
        Structured::Malformed { reason, .. } => {
            caller.ctx.log(
                &parent.path,
                EventKind::Warning { message: format!("review reply malformed ({reason}); accepting") },
            );
            ReviewDecision::Accept
        }
    })
}

/// Child code first (in subtask order), then the parent's code.
pub fn join_code<'s>(children: impl Iterator<Item = &'s str>, own: Option<&'s str>) -> String {
    children
        .chain(own)
        .map(|c| c.trim_end_matches('\n'))
        .filter(|c| !c.trim().is_empty())
        .collect::<Vec<_>>()
        .join("\n\n\n")
}

fn implement_phase(
    caller: &mut NodeCaller<'_, '_>,
    plan: &str,
    child_results: &[SolutionArtifact],
    subtasks: &[TaskSpec],
    task: &TaskSpec,
) -> Result<Option<String>, NodeError> {
    let children = if child_results.is_empty() {
        "(none)".to_string()
    } else {
        child_results
            .iter()
            .zip(subtasks)
            .enumerate()
            .map(|(i, (r, t))| {
                prompts::IMPLEMENT_CHILD.render(&[
                    ("index", &(i + 1).to_string()),
                    ("description", &t.description),
                    ("status", if r.verified { "verified" } else { "unverified: failed its tests" }),
                    ("code", &r.code),
                ])
            })
            .collect::<Vec<_>>()
            .join("\n")
    };
    let prompt =
        prompts::IMPLEMENT.render(&[("task", &task.description), ("plan", plan), ("children", &children)]);
    let messages = vec![Message::system(prompts::SYSTEM.text), Message::user(prompt)];
    for _ in 0..2 {
        let reply = caller.call(Phase::Implement, messages.clone())?;
        let code = parse::extract_code(&reply.content);
        if !code.trim().is_empty() {
            if child_results.is_empty() {
                return Ok(Some(code));
            }
            return Ok(Some(join_code(child_results.iter().map(|c| c.code.as_str()), Some(&code))));
        }
        caller.ctx.log(&task.path, EventKind::Warning { message: "empty implementation reply".into() });
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_dedupes_then_truncates() {
        let n = normalize_subtasks(
            ["a", "b", "A", "c", "d", "e"].iter().map(|s| s.to_string()).collect(),
            3,
        );
        assert_eq!(n.subtasks, ["a", "b", "c"]);
        assert_eq!(n.duplicates_dropped, 1);
        assert_eq!(n.proposed, 5);
        assert!(n.truncated);
    }

    #[test]
    fn join_code_orders_children_first() {
        let joined = join_code(["def a(): pass\n", "def b(): pass"].into_iter(), Some("def main(): pass"));
        assert_eq!(joined, "def a(): pass\n\n\ndef b(): pass\n\n\ndef main(): pass");
    }

    #[test]
    fn call_bound_grows_with_height() {
        let mut c = TreeConfig::default();
        let mut last = 0;
        for m in 1..=5 {
            c.max_height = m;
            let b = completion_call_bound(&c);
            assert!(b >= last);
            last = b;
        }
        c.max_height = 1;
        // single node: 4 plan + 1 clarify + 2 decompose + 4 review + 2 implement + 4 tests + 3 fix + 2 consolidate
        assert_eq!(completion_call_bound(&c), 22);
    }
}
