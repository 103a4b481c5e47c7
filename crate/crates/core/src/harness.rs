//! Benchmark harness: task suites, rounds, Pass@1 scoring, sweeps and token
//! comparisons.
//!
//! Each round clears memory, shuffles the task order with a generator seeded
//! from `(seed, round_index)`, runs every task through the orchestrator and
//! scores the root artifact against the task's hidden tests. Hidden tests are
//! only ever handed to the scoring runner, never to a prompt.

use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{MemoryConfig, MemoryError, MemoryStore};
use crate::model::{SolutionArtifact, TokenUsage};
use crate::orchestrator::{Orchestrator, OrchestratorOptions, RunError, Services, TreeStats};
use crate::parallel::{map_collect, Execution};
use crate::provider::{CompletionProvider, Embedder};
use crate::trace::RunTrace;
use crate::validator::{TestRunner, TestSuite, Verdict};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkTask {
    pub task_id: String,
    pub prompt: String,
    pub entry_point: String,
    pub hidden_tests: String,
    #[serde(default)]
    pub tags: Vec<String>,
}

impl BenchmarkTask {
    /// The instruction handed to the root agent. Hidden tests are excluded.
    pub fn instruction(&self) -> String {
        if self.entry_point.is_empty() {
            self.prompt.clone()
        } else {
            format!("{}\n\nThe solution must define `{}`.", self.prompt.trim_end(), self.entry_point)
        }
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("suite is empty")]
    EmptySuite,
    #[error("duplicate task id `{0}`")]
    DuplicateTask(String),
    #[error("suite line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("cannot read suite: {0}")]
    Io(#[from] std::io::Error),
    #[error("rounds must be at least 1")]
    NoRounds,
    #[error("sweep needs at least one value")]
    EmptySweep,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("report sets are not comparable: {0}")]
    Mismatch(String),
}

/// Parses a line-delimited suite: one JSON object per non-blank line.
pub fn parse_suite(text: &str) -> Result<Vec<BenchmarkTask>, HarnessError> {
    let mut tasks = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let task: BenchmarkTask =
            serde_json::from_str(line).map_err(|e| HarnessError::Parse { line: i + 1, message: e.to_string() })?;
        if !seen.insert(task.task_id.clone()) {
            return Err(HarnessError::DuplicateTask(task.task_id));
        }
        tasks.push(task);
    }
    if tasks.is_empty() {
        return Err(HarnessError::EmptySuite);
    }
    Ok(tasks)
}

pub fn load_suite(path: impl AsRef<Path>) -> Result<Vec<BenchmarkTask>, HarnessError> {
    parse_suite(&std::fs::read_to_string(path)?)
}

/// How a task's hidden-test outcome becomes a score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    /// Passed only if every hidden test passes (HumanEval, ClassEval class level).
    #[default]
    AllTestsPass,
    /// Score is the fraction of hidden test cases passed (ClassEval test-case
    /// level). `passed` still means all of them passed.
    PerTestFraction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFlag {
    /// The engine run aborted; the task scores as not passed.
    Aborted,
    /// The scoring sandbox could not run; the task scores as not passed.
    InfraError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub passed: bool,
    pub score: f64,
    pub verdict: Option<Verdict>,
    pub flag: Option<TaskFlag>,
}

/// Runs `artifact.code` against the hidden tests. Only a `Pass` verdict
/// counts as passed.
pub fn score_task(runner: &dyn TestRunner, artifact: &SolutionArtifact, task: &BenchmarkTask, mode: ScoringMode) -> Score {
    let suite = TestSuite::harness(task.hidden_tests.clone(), task.entry_point.clone());
    match runner.run(&artifact.code, &suite) {
        Ok(result) => {
            let passed = result.verdict == Verdict::Pass;
            let score = match (mode, result.case_counts) {
                (ScoringMode::PerTestFraction, Some((ok, total))) if total > 0 => f64::from(ok) / f64::from(total),
                _ => {
                    if passed {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            Score { passed, score, verdict: Some(result.verdict), flag: None }
        }
        Err(e) => {
            log::error!("scoring sandbox failed for {}: {e}", task.task_id);
            Score { passed: false, score: 0.0, verdict: None, flag: Some(TaskFlag::InfraError) }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task_id: String,
    pub passed: bool,
    pub score: f64,
    pub usage: TokenUsage,
    pub tree_stats: TreeStats,
    pub flags: Vec<TaskFlag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub round_index: u32,
    pub task_order_seed: u64,
    /// Task ids in execution order.
    pub task_order: Vec<String>,
    pub per_task: Vec<TaskReport>,
    pub pass_at_1: f64,
    /// Mean of per-task scores; equals `pass_at_1` under `AllTestsPass`.
    pub mean_score: f64,
    pub totals: TokenUsage,
}

impl RunReport {
    pub fn aborted_tasks(&self) -> usize {
        self.per_task.iter().filter(|t| t.flags.contains(&TaskFlag::Aborted)).count()
    }

    pub fn infra_errors(&self) -> usize {
        self.per_task.iter().filter(|t| t.flags.contains(&TaskFlag::InfraError)).count()
    }
}

/// Pass@1 as an exact ratio of counts.
pub fn pass_at_1(per_task: &[TaskReport]) -> f64 {
    if per_task.is_empty() {
        return 0.0;
    }
    per_task.iter().filter(|t| t.passed).count() as f64 / per_task.len() as f64
}

#[derive(Debug, Clone)]
pub struct TaskTrace {
    pub round_index: u32,
    pub task_id: String,
    pub trace: RunTrace,
}

#[derive(Debug, Clone)]
pub struct SuiteRun {
    pub reports: Vec<RunReport>,
    pub traces: Vec<TaskTrace>,
}

/// Task order for one round: a pure function of `(seed, round_index)`.
pub fn task_order(len: usize, seed: u64, round_index: u32) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(round_index));
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessOptions {
    pub orchestrator: OrchestratorOptions,
    pub scoring: ScoringMode,
    /// Runs the tasks of a round concurrently. Only allowed with memory off,
    /// since memory contents depend on task order.
    pub task_execution: Execution,
    /// Runs sweep values concurrently.
    pub sweep_execution: Execution,
}

impl Default for HarnessOptions {
    fn default() -> Self {
        Self {
            orchestrator: OrchestratorOptions::default(),
            scoring: ScoringMode::AllTestsPass,
            task_execution: Execution::Sequential,
            sweep_execution: Execution::Sequential,
        }
    }
}

/// Engine services for a suite run. `runner` checks the engine's own tests;
/// `scorer` runs hidden tests.
#[derive(Clone, Copy)]
pub struct HarnessServices<'a> {
    pub provider: &'a dyn CompletionProvider,
    pub memory: Option<&'a MemoryStore>,
    pub runner: &'a dyn TestRunner,
    pub scorer: &'a dyn TestRunner,
}

struct TaskRun {
    report: TaskReport,
    trace: RunTrace,
}

fn run_task(options: &HarnessOptions, services: HarnessServices<'_>, task: &BenchmarkTask) -> TaskRun {
    let orchestrator = Orchestrator::new(
        options.orchestrator,
        Services { provider: services.provider, memory: services.memory, runner: services.runner },
    );
    match orchestrator.run_workflow(&task.instruction()) {
        Ok(outcome) => {
            let score = score_task(services.scorer, &outcome.artifact, task, options.scoring);
            TaskRun {
                report: TaskReport {
                    task_id: task.task_id.clone(),
                    passed: score.passed,
                    score: score.score,
                    usage: outcome.usage,
                    tree_stats: outcome.stats,
                    flags: score.flag.into_iter().collect(),
                    error: None,
                },
                trace: outcome.trace,
            }
        }
        Err(RunError::Aborted { source, trace, usage }) => {
            log::error!("task {} aborted: {source}", task.task_id);
            let executed = trace.executions().values().sum();
            TaskRun {
                report: TaskReport {
                    task_id: task.task_id.clone(),
                    passed: false,
                    score: 0.0,
                    usage,
                    tree_stats: TreeStats { executed_nodes: executed, ..TreeStats::default() },
                    flags: vec![TaskFlag::Aborted],
                    error: Some(source.to_string()),
                },
                trace,
            }
        }
        Err(e) => TaskRun {
            report: TaskReport {
                task_id: task.task_id.clone(),
                passed: false,
                score: 0.0,
                usage: TokenUsage::default(),
                tree_stats: TreeStats::default(),
                flags: vec![TaskFlag::Aborted],
                error: Some(e.to_string()),
            },
            trace: RunTrace::default(),
        },
    }
}

/// Runs `rounds` rounds of the suite and reports each.
pub fn run_suite(
    suite: &[BenchmarkTask],
    options: &HarnessOptions,
    services: HarnessServices<'_>,
    rounds: u32,
    seed: u64,
) -> Result<SuiteRun, HarnessError> {
    if suite.is_empty() {
        return Err(HarnessError::EmptySuite);
    }
    if rounds == 0 {
        return Err(HarnessError::NoRounds);
    }
    options.orchestrator.tree.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
    if options.task_execution.is_parallel() && services.memory.is_some() {
        return Err(HarnessError::Config("task-parallel mode requires memory to be disabled".into()));
    }
    let mut reports = Vec::new();
    let mut traces = Vec::new();
    for round_index in 0..rounds {
        if let Some(memory) = services.memory {
            memory.reset();
        }
        let order = task_order(suite.len(), seed, round_index);
        let ordered: Vec<&BenchmarkTask> = order.iter().map(|&i| &suite[i]).collect();
        let runs = map_collect(options.task_execution, &ordered, |task| run_task(options, services, task));
        let mut per_task = Vec::with_capacity(runs.len());
        let mut totals = TokenUsage::default();
        for run in runs {
            totals.absorb(run.report.usage).map_err(|e| HarnessError::Config(e.to_string()))?;
            traces.push(TaskTrace { round_index, task_id: run.report.task_id.clone(), trace: run.trace });
            per_task.push(run.report);
        }
        let mean_score = per_task.iter().map(|t| t.score).sum::<f64>() / per_task.len() as f64;
        reports.push(RunReport {
            round_index,
            task_order_seed: seed,
            task_order: ordered.iter().map(|t| t.task_id.clone()).collect(),
            pass_at_1: pass_at_1(&per_task),
            mean_score,
            per_task,
            totals,
        });
    }
    Ok(SuiteRun { reports, traces })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    MaxHeight,
    InitialDegree,
}

impl std::str::FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max_height" | "m" => Ok(Self::MaxHeight),
            "initial_degree" | "n" => Ok(Self::InitialDegree),
            other => Err(format!("unknown sweep parameter `{other}` (expected max_height or initial_degree)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: u32,
    pub pass_at_1: f64,
    pub totals: TokenUsage,
    /// Node executions summed over every task and round.
    pub executed_nodes: u64,
    /// Largest executed tree of any task.
    pub max_executed_nodes: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Tab-separated table with a header line.
    pub fn to_tsv(&self) -> String {
        let name = match self.param {
            SweepParam::MaxHeight => "max_height",
            SweepParam::InitialDegree => "initial_degree",
        };
        let mut out = format!("{name}\tpass_at_1\tinput_tokens\toutput_tokens\tcompletion_calls\tembedding_calls\texecuted_nodes\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{:.4}\t{}\t{}\t{}\t{}\t{}\n",
                r.value,
                r.pass_at_1,
                r.totals.input_tokens,
                r.totals.output_tokens,
                r.totals.completion_calls,
                r.totals.embedding_calls,
                r.executed_nodes
            ));
        }
        out
    }
}

/// Memory settings for a sweep; each value gets a fresh store.
#[derive(Clone)]
pub struct SweepMemory {
    pub config: MemoryConfig,
    pub embedder: Arc<dyn Embedder>,
}

/// Runs the suite once per value with every other setting fixed. A value that
/// fails is recorded in its row and the sweep continues.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    param: SweepParam,
    values: &[u32],
    options: &HarnessOptions,
    provider: &dyn CompletionProvider,
    runner: &dyn TestRunner,
    scorer: &dyn TestRunner,
    memory: Option<&SweepMemory>,
    suite: &[BenchmarkTask],
    rounds: u32,
    seed: u64,
) -> Result<SweepTable, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::EmptySweep);
    }
    let rows = map_collect(options.sweep_execution, values, |&value| {
        let mut opts = *options;
        match param {
            SweepParam::MaxHeight => opts.orchestrator.tree.max_height = value,
            SweepParam::InitialDegree => opts.orchestrator.tree.initial_degree = value,
        }
        let store = match memory.map(|m| MemoryStore::new(m.config, m.embedder.clone())).transpose() {
            Ok(store) => store,
            Err(e) => return failed_row(value, e.to_string()),
        };
        let services = HarnessServices { provider, memory: store.as_ref(), runner, scorer };
        match run_suite(suite, &opts, services, rounds, seed) {
            Ok(run) => {
                let mut totals = TokenUsage::default();
                let mut executed = 0u64;
                let mut largest = 0;
                for r in &run.reports {
                    if let Err(e) = totals.absorb(r.totals) {
                        return failed_row(value, e.to_string());
                    }
                    for t in &r.per_task {
                        executed += u64::from(t.tree_stats.executed_nodes);
                        largest = largest.max(t.tree_stats.executed_nodes);
                    }
                }
                let pass = run.reports.iter().map(|r| r.pass_at_1).sum::<f64>() / run.reports.len() as f64;
                SweepRow { value, pass_at_1: pass, totals, executed_nodes: executed, max_executed_nodes: largest, error: None }
            }
            Err(e) => failed_row(value, e.to_string()),
        }
    });
    Ok(SweepTable { param, rows })
}

fn failed_row(value: u32, error: String) -> SweepRow {
    log::error!("sweep value {value} failed: {error}");
    SweepRow {
        value,
        pass_at_1: 0.0,
        totals: TokenUsage::default(),
        executed_nodes: 0,
        max_executed_nodes: 0,
        error: Some(error),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageDelta {
    pub input_tokens: i128,
    pub output_tokens: i128,
    pub completion_calls: i128,
    pub embedding_calls: i128,
}

impl UsageDelta {
    pub fn between(config: &TokenUsage, baseline: &TokenUsage) -> Self {
        let d = |a: u64, b: u64| i128::from(a) - i128::from(b);
        Self {
            input_tokens: d(config.input_tokens, baseline.input_tokens),
            output_tokens: d(config.output_tokens, baseline.output_tokens),
            completion_calls: d(config.completion_calls, baseline.completion_calls),
            embedding_calls: d(config.embedding_calls, baseline.embedding_calls),
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub round_index: u32,
    pub config: TokenUsage,
    pub baseline: TokenUsage,
    pub delta: UsageDelta,
    pub pass_at_1_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenComparison {
    pub rows: Vec<ComparisonRow>,
    pub config_totals: TokenUsage,
    pub baseline_totals: TokenUsage,
    pub delta: UsageDelta,
}

impl TokenComparison {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "round\tconfig_input\tconfig_output\tbaseline_input\tbaseline_output\tdelta_input\tdelta_output\tdelta_completion_calls\tdelta_pass_at_1\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.4}\n",
                r.round_index,
                r.config.input_tokens,
                r.config.output_tokens,
                r.baseline.input_tokens,
                r.baseline.output_tokens,
                r.delta.input_tokens,
                r.delta.output_tokens,
                r.delta.completion_calls,
                r.pass_at_1_delta
            ));
        }
        out
    }
}

/// Compares two report sets round by round. Both sets must cover the same
/// rounds, the same tasks in the same order, with the same ordering seed.
pub fn report_tokens(reports: &[RunReport], baseline: &[RunReport]) -> Result<TokenComparison, HarnessError> {
    if reports.len() != baseline.len() {
        return Err(HarnessError::Mismatch(format!("{} rounds vs {} baseline rounds", reports.len(), baseline.len())));
    }
    let mut rows = Vec::new();
    let mut config_totals = TokenUsage::default();
    let mut baseline_totals = TokenUsage::default();
    for (a, b) in reports.iter().zip(baseline) {
        if a.round_index != b.round_index || a.task_order_seed != b.task_order_seed {
            return Err(HarnessError::Mismatch(format!(
                "round {} seed {} vs round {} seed {}",
                a.round_index, a.task_order_seed, b.round_index, b.task_order_seed
            )));
        }
        if a.task_order != b.task_order {
            return Err(HarnessError::Mismatch(format!("task lists differ in round {}", a.round_index)));
        }
        let overflow = |e: crate::model::AccountingError| HarnessError::Mismatch(e.to_string());
        config_totals.absorb(a.totals).map_err(overflow)?;
        baseline_totals.absorb(b.totals).map_err(overflow)?;
        rows.push(ComparisonRow {
            round_index: a.round_index,
            config: a.totals,
            baseline: b.totals,
            delta: UsageDelta::between(&a.totals, &b.totals),
            pass_at_1_delta: a.pass_at_1 - b.pass_at_1,
        });
    }
    Ok(TokenComparison {
        delta: UsageDelta::between(&config_totals, &baseline_totals),
        rows,
        config_totals,
        baseline_totals,
    })
}
