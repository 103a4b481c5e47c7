//! Verification agent: test generation, sandboxed execution and the bounded
//! fix loop.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calls::{call_structured, PhaseCaller, Structured};
use crate::model::SolutionArtifact;
use crate::parse;
use crate::prompts;
use crate::provider::{Message, Phase, ProviderError};

pub mod sandbox;
pub mod scripted;

pub use sandbox::{RunnerProfile, SandboxLimits, SubprocessSandbox};
pub use scripted::ScriptedRunner;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SuiteSource {
    ModelGenerated,
    HarnessProvided,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestSuite {
    pub source: SuiteSource,
    pub test_code: String,
    /// Function or class under test; may be empty when unknown.
    pub entry_point: String,
}

impl TestSuite {
    pub fn harness(test_code: impl Into<String>, entry_point: impl Into<String>) -> Self {
        Self { source: SuiteSource::HarnessProvided, test_code: test_code.into(), entry_point: entry_point.into() }
    }

    pub fn generated(test_code: impl Into<String>, entry_point: impl Into<String>) -> Self {
        Self { source: SuiteSource::ModelGenerated, test_code: test_code.into(), entry_point: entry_point.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Fail,
    Timeout,
    CrashedSetup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxResult {
    pub verdict: Verdict,
    pub stdout: String,
    pub stderr: String,
    pub failing_cases: Vec<String>,
    /// Seconds.
    pub wall_time: f64,
    #[serde(default)]
    pub stdout_truncated: bool,
    #[serde(default)]
    pub stderr_truncated: bool,
    /// `(passed, total)` individual test cases, when the runner reports them.
    #[serde(default)]
    pub case_counts: Option<(u32, u32)>,
}

impl SandboxResult {
    pub fn with_verdict(verdict: Verdict) -> Self {
        Self {
            verdict,
            stdout: String::new(),
            stderr: String::new(),
            failing_cases: Vec::new(),
            wall_time: 0.0,
            stdout_truncated: false,
            stderr_truncated: false,
            case_counts: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SuiteCheck {
    Loads,
    Rejected(String),
}

/// Failures of the sandbox machinery itself, as opposed to failing tests.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SandboxError {
    #[error("interpreter `{0}` not found")]
    InterpreterMissing(String),
    #[error("failed to spawn sandbox process: {0}")]
    Spawn(String),
    #[error("sandbox workspace error: {0}")]
    Workspace(String),
    #[error("sandbox configuration error: {0}")]
    Config(String),
}

/// Executes candidate code against a test suite.
pub trait TestRunner: Send + Sync {
    /// Whether the suite itself parses and loads, independent of the code.
    fn check_suite(&self, suite: &TestSuite) -> Result<SuiteCheck, SandboxError>;
    fn run(&self, code: &str, suite: &TestSuite) -> Result<SandboxResult, SandboxError>;
    /// Test code that only loads the candidate.
    fn smoke_test(&self) -> String;
}

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// Produces a repaired candidate after a failed run.
pub trait Repairer {
    fn repair(&mut self, code: &str, result: &SandboxResult, iteration: u32) -> Result<String, ProviderError>;

    /// Called after every sandbox run, before any repair of that run.
    fn observe(&mut self, _attempt: u32, _result: &SandboxResult) {}
}

#[derive(Debug, Clone)]
pub struct Verification {
    pub artifact: SolutionArtifact,
    pub runs: Vec<SandboxResult>,
}

/// Runs the tests, and on failure repairs and re-runs, with at most
/// `max_fix_iterations` repairs. The suite is borrowed immutably and is never
/// changed by the loop.
pub fn verify(
    code: &str,
    suite: &TestSuite,
    max_fix_iterations: u32,
    runner: &dyn TestRunner,
    repairer: &mut dyn Repairer,
) -> Result<Verification, VerifyError> {
    let mut code = code.to_string();
    let mut runs = Vec::new();
    let mut fix_iterations = 0;
    let verified = loop {
        let result = runner.run(&code, suite)?;
        repairer.observe(runs.len() as u32 + 1, &result);
        let passed = result.verdict == Verdict::Pass;
        runs.push(result);
        if passed {
            break true;
        }
        if fix_iterations == max_fix_iterations {
            break false;
        }
        fix_iterations += 1;
        code = repairer.repair(&code, runs.last().expect("just pushed"), fix_iterations)?;
    };
    Ok(Verification {
        artifact: SolutionArtifact {
            code,
            reasoning_trace: String::new(),
            verified,
            tests_run: runs.len() as u32,
            fix_iterations,
        },
        runs,
    })
}

/// One repair completion. An empty reply returns the input code unchanged.
pub fn fix_errors(
    caller: &mut dyn PhaseCaller,
    task_description: &str,
    code: &str,
    result: &SandboxResult,
    stderr_budget: usize,
) -> Result<String, ProviderError> {
    let failing = if result.failing_cases.is_empty() {
        "(none reported)".to_string()
    } else {
        result.failing_cases.join("\n")
    };
    let verdict = format!("{:?}", result.verdict);
    let prompt = prompts::FIX.render(&[
        ("task", task_description),
        ("code", code),
        ("verdict", &verdict),
        ("failing_cases", &failing),
        ("stderr", parse::tail_bytes(&result.stderr, stderr_budget)),
    ]);
    let reply = caller.call(Phase::Fix, vec![Message::system(prompts::SYSTEM.text), Message::user(prompt)])?;
    let repaired = parse::extract_code(&reply.content);
    if repaired.trim().is_empty() {
        log::warn!("empty repair reply; keeping previous candidate");
        return Ok(code.to_string());
    }
    Ok(repaired)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedSuite {
    pub suite: TestSuite,
    pub regenerated: bool,
    pub smoke_fallback: bool,
}

/// Asks the model for a test suite and checks that it loads. A suite that
/// does not load is regenerated once; if that also fails the runner's smoke
/// test is used instead.
pub fn generate_tests(
    caller: &mut dyn PhaseCaller,
    runner: &dyn TestRunner,
    task_description: &str,
    code: &str,
) -> Result<GeneratedSuite, VerifyError> {
    let prompt = prompts::GENERATE_TESTS.render(&[("task", task_description), ("code", code)]);
    let mut messages = vec![Message::system(prompts::SYSTEM.text), Message::user(prompt)];
    let fallback_entry = parse::guess_entry_point(code).unwrap_or_default();
    for attempt in 0..2 {
        let problem = match call_structured(caller, Phase::GenerateTests, messages.clone(), parse::parse_tests)? {
            Structured::Parsed((test_code, entry)) => {
                let suite = TestSuite::generated(test_code, entry.unwrap_or_else(|| fallback_entry.clone()));
                match runner.check_suite(&suite)? {
                    SuiteCheck::Loads => {
                        return Ok(GeneratedSuite { suite, regenerated: attempt > 0, smoke_fallback: false });
                    }
                    SuiteCheck::Rejected(reason) => reason,
                }
            }
            Structured::Malformed { reason, .. } => reason,
        };
        log::warn!("generated test suite rejected (attempt {}): {problem}", attempt + 1);
        messages.push(Message::user(format!(
            "The previous test suite failed to load: {}. Write a corrected suite.",
            parse::tail_bytes(&problem, 1024)
        )));
    }
    Ok(GeneratedSuite {
        suite: TestSuite::generated(runner.smoke_test(), fallback_entry),
        regenerated: true,
        smoke_fallback: true,
    })
}
