//! Subprocess sandbox: a fresh temporary directory per run, a child process
//! in its own process group, a wall-clock timeout and capped output capture.
//!
//! This isolates runs from each other. It is not a security boundary.

use std::fs;
use std::io::{self, Read};
use std::os::unix::process::CommandExt;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{SandboxError, SandboxResult, SuiteCheck, TestRunner, TestSuite, Verdict};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SandboxLimits {
    pub timeout_secs: f64,
    /// Bytes kept per output stream; the rest is drained and dropped.
    pub stream_cap_bytes: usize,
    /// Bytes of stderr tail included in repair prompts.
    pub stderr_budget_bytes: usize,
    /// Extra time allowed for killing and reaping after a timeout.
    pub grace_secs: f64,
}

impl Default for SandboxLimits {
    fn default() -> Self {
        Self { timeout_secs: 10.0, stream_cap_bytes: 1 << 20, stderr_budget_bytes: 4096, grace_secs: 1.0 }
    }
}

/// How to lay out and invoke code and tests for one target language.
///
/// `command` and `syntax_check` entries may use the placeholders `{dir}`,
/// `{code_file}` and `{test_file}`. `epilogue` may use `{entry_point}`, which
/// is replaced by the entry point as a double-quoted string literal.
///
/// Marker files written by the test harness into the workspace:
/// `started_marker` once the code has loaded, `failures_file` with one failing
/// case per line, `summary_file` with `<passed> <total>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunnerProfile {
    pub command: Vec<String>,
    pub syntax_check: Option<Vec<String>>,
    pub code_file: String,
    pub test_file: String,
    pub prelude: String,
    pub epilogue: String,
    pub smoke_test: String,
    pub started_marker: Option<String>,
    pub failures_file: Option<String>,
    pub summary_file: Option<String>,
}

const PYTHON_PRELUDE: &str = r#"import sys as _sandbox_sys
import solution as _sandbox_solution
globals().update({_k: _v for _k, _v in vars(_sandbox_solution).items() if not _k.startswith("__")})
open(".started", "w").close()
"#;

const PYTHON_EPILOGUE: &str = r#"

def _sandbox_run_tests(entry_point):
    import traceback
    import unittest
    cases = []
    for name, obj in list(globals().items()):
        if name.startswith("test_") and callable(obj) and not isinstance(obj, type):
            cases.append((name, obj))
        elif isinstance(obj, type) and issubclass(obj, unittest.TestCase) and obj is not unittest.TestCase:
            for method in unittest.TestLoader().getTestCaseNames(obj):
                cases.append((name + "." + method, obj(method)))
    if entry_point and callable(globals().get("check")):
        cases.append(("check", lambda: check(globals()[entry_point])))
    failures = []
    for name, case in cases:
        try:
            if isinstance(case, unittest.TestCase):
                result = unittest.TestResult()
                case.run(result)
                problems = result.failures + result.errors
                if problems:
                    raise AssertionError(problems[0][1].strip().splitlines()[-1])
            else:
                case()
        except BaseException as exc:
            failures.append(name + ": " + type(exc).__name__ + ": " + str(exc)[:500])
            traceback.print_exc()
    with open(".failures", "w") as fh:
        fh.write("\n".join(failures))
    with open(".summary", "w") as fh:
        fh.write("%d %d" % (len(cases) - len(failures), len(cases)))
    _sandbox_sys.stdout.flush()
    _sandbox_sys.exit(1 if failures else 0)


_sandbox_run_tests({entry_point})
"#;

impl Default for RunnerProfile {
    fn default() -> Self {
        Self::python()
    }
}

impl RunnerProfile {
    pub fn python() -> Self {
        Self::python_with("python3")
    }

    pub fn python_with(interpreter: &str) -> Self {
        Self {
            command: vec![interpreter.into(), "-B".into(), "{test_file}".into()],
            syntax_check: Some(vec![
                interpreter.into(),
                "-B".into(),
                "-c".into(),
                "import ast, sys; ast.parse(open(sys.argv[1]).read())".into(),
                "{test_file}".into(),
            ]),
            code_file: "solution.py".into(),
            test_file: "test_solution.py".into(),
            prelude: PYTHON_PRELUDE.into(),
            epilogue: PYTHON_EPILOGUE.into(),
            smoke_test: "def test_loads():\n    pass\n".into(),
            started_marker: Some(".started".into()),
            failures_file: Some(".failures".into()),
            summary_file: Some(".summary".into()),
        }
    }

    fn test_source(&self, suite: &TestSuite) -> String {
        let entry = serde_json::to_string(&suite.entry_point).expect("strings serialize");
        let epilogue = self.epilogue.replace("{entry_point}", &entry);
        format!("{}\n{}\n{}", self.prelude, suite.test_code, epilogue)
    }

    fn expand(&self, template: &[String], dir: &Path) -> Result<(String, Vec<String>), SandboxError> {
        let dir_s = dir.to_string_lossy();
        let code = dir.join(&self.code_file);
        let test = dir.join(&self.test_file);
        let mut parts = template.iter().map(|part| {
            part.replace("{dir}", &dir_s)
                .replace("{code_file}", &code.to_string_lossy())
                .replace("{test_file}", &test.to_string_lossy())
        });
        let program = parts.next().ok_or_else(|| SandboxError::Config("empty command".into()))?;
        Ok((program, parts.collect()))
    }
}

/// Runs candidates as child processes according to a [`RunnerProfile`].
#[derive(Debug, Clone, Default)]
pub struct SubprocessSandbox {
    pub profile: RunnerProfile,
    pub limits: SandboxLimits,
}

struct Captured {
    bytes: Vec<u8>,
    truncated: bool,
}

struct ProcessOutcome {
    timed_out: bool,
    success: bool,
    stdout: Captured,
    stderr: Captured,
    wall_time: f64,
}

impl SubprocessSandbox {
    pub fn new(profile: RunnerProfile, limits: SandboxLimits) -> Self {
        Self { profile, limits }
    }

    fn workspace(&self) -> Result<tempfile::TempDir, SandboxError> {
        tempfile::Builder::new()
            .prefix("treecode-sandbox-")
            .tempdir()
            .map_err(|e| SandboxError::Workspace(e.to_string()))
    }

    fn write(dir: &Path, name: &str, contents: &str) -> Result<(), SandboxError> {
        fs::write(dir.join(name), contents).map_err(|e| SandboxError::Workspace(e.to_string()))
    }

    fn execute(&self, template: &[String], dir: &Path) -> Result<ProcessOutcome, SandboxError> {
        let (program, args) = self.profile.expand(template, dir)?;
        let mut cmd = Command::new(&program);
        cmd.args(&args)
            .current_dir(dir)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .env_clear()
            .env("PATH", std::env::var_os("PATH").unwrap_or_else(|| "/usr/local/bin:/usr/bin:/bin".into()))
            .env("HOME", dir)
            .env("TMPDIR", dir)
            .env("LANG", "C.UTF-8")
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .env("PYTHONHASHSEED", "0")
            .process_group(0);
        let start = Instant::now();
        let mut child = cmd.spawn().map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => SandboxError::InterpreterMissing(program.clone()),
            _ => SandboxError::Spawn(e.to_string()),
        })?;
        let cap = self.limits.stream_cap_bytes;
        let stdout = child.stdout.take().expect("stdout is piped");
        let stderr = child.stderr.take().expect("stderr is piped");
        let out_reader = thread::spawn(move || capture(stdout, cap));
        let err_reader = thread::spawn(move || capture(stderr, cap));

        let timeout = Duration::from_secs_f64(self.limits.timeout_secs.max(0.0));
        let (timed_out, exited_ok) = wait_with_timeout(&mut child, timeout)?;
        // Kill the whole group so nothing spawned by the tests survives,
        // then reap the direct child.
        kill_group(child.id());
        let status = child.wait().map_err(|e| SandboxError::Spawn(e.to_string()))?;
        let wall_time = start.elapsed().as_secs_f64();
        let stdout = out_reader.join().unwrap_or(Captured { bytes: Vec::new(), truncated: false });
        let stderr = err_reader.join().unwrap_or(Captured { bytes: Vec::new(), truncated: false });
        Ok(ProcessOutcome {
            timed_out,
            success: !timed_out && exited_ok.unwrap_or_else(|| status.success()),
            stdout,
            stderr,
            wall_time,
        })
    }
}

fn capture<R: Read>(mut reader: R, cap: usize) -> Captured {
    let mut bytes = Vec::new();
    let mut truncated = false;
    let mut chunk = [0u8; 8192];
    loop {
        match reader.read(&mut chunk) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                let room = cap.saturating_sub(bytes.len());
                if n > room {
                    truncated = true;
                }
                bytes.extend_from_slice(&chunk[..n.min(room)]);
            }
        }
    }
    Captured { bytes, truncated }
}

/// Polls until the child exits or `timeout` elapses without reaping it, so
/// its pid (and process group id) stay reserved until [`kill_group`] runs.
/// Returns `(timed_out, Some(exit success))`.
fn wait_with_timeout(child: &mut Child, timeout: Duration) -> Result<(bool, Option<bool>), SandboxError> {
    let pid = child.id() as libc::id_t;
    let deadline = Instant::now() + timeout;
    let mut sleep = Duration::from_millis(1);
    loop {
        let mut info: libc::siginfo_t = unsafe { std::mem::zeroed() };
        // SAFETY: `info` is a valid, zeroed siginfo_t owned by this frame.
        let rc = unsafe {
            libc::waitid(libc::P_PID, pid, &mut info, libc::WEXITED | libc::WNOHANG | libc::WNOWAIT)
        };
        if rc != 0 {
            let err = io::Error::last_os_error();
            if err.kind() == io::ErrorKind::Interrupted {
                continue;
            }
            return Err(SandboxError::Spawn(err.to_string()));
        }
        // SAFETY: si_pid is populated by waitid for P_PID queries.
        let exited_pid = unsafe { info.si_pid() };
        if exited_pid != 0 {
            // SAFETY: si_status is valid once si_pid is non-zero.
            let status = unsafe { info.si_status() };
            let ok = info.si_code == libc::CLD_EXITED && status == 0;
            return Ok((false, Some(ok)));
        }
        if Instant::now() >= deadline {
            return Ok((true, None));
        }
        thread::sleep(sleep);
        sleep = (sleep * 2).min(Duration::from_millis(20));
    }
}

fn kill_group(pid: u32) {
    // SAFETY: plain syscall; ESRCH (group already gone) is ignored.
    unsafe {
        libc::killpg(pid as libc::pid_t, libc::SIGKILL);
    }
}

fn read_marker(dir: &Path, name: &Option<String>) -> Option<String> {
    name.as_ref().and_then(|n| fs::read_to_string(dir.join(n)).ok())
}

impl TestRunner for SubprocessSandbox {
    fn check_suite(&self, suite: &TestSuite) -> Result<SuiteCheck, SandboxError> {
        let Some(check) = &self.profile.syntax_check else {
            return Ok(SuiteCheck::Loads);
        };
        let dir = self.workspace()?;
        Self::write(dir.path(), &self.profile.test_file, &self.profile.test_source(suite))?;
        let outcome = self.execute(check, dir.path())?;
        Ok(if outcome.success {
            SuiteCheck::Loads
        } else if outcome.timed_out {
            SuiteCheck::Rejected("syntax check timed out".into())
        } else {
            SuiteCheck::Rejected(String::from_utf8_lossy(&outcome.stderr.bytes).trim().to_string())
        })
    }

    fn run(&self, code: &str, suite: &TestSuite) -> Result<SandboxResult, SandboxError> {
        let dir = self.workspace()?;
        Self::write(dir.path(), &self.profile.code_file, code)?;
        Self::write(dir.path(), &self.profile.test_file, &self.profile.test_source(suite))?;
        let outcome = self.execute(&self.profile.command, dir.path())?;

        let started = match &self.profile.started_marker {
            Some(name) => dir.path().join(name).exists(),
            None => true,
        };
        let stderr = String::from_utf8_lossy(&outcome.stderr.bytes).into_owned();
        let verdict = if outcome.timed_out {
            Verdict::Timeout
        } else if !started {
            Verdict::CrashedSetup
        } else if outcome.success {
            Verdict::Pass
        } else {
            Verdict::Fail
        };
        let mut failing_cases = Vec::new();
        if verdict == Verdict::Fail {
            failing_cases = read_marker(dir.path(), &self.profile.failures_file)
                .map(|t| t.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
                .unwrap_or_default();
            if failing_cases.is_empty() {
                if let Some(last) = stderr.lines().rev().find(|l| !l.trim().is_empty()) {
                    failing_cases.push(last.trim().to_string());
                } else {
                    failing_cases.push("tests exited with a non-zero status".into());
                }
            }
        }
        let case_counts = read_marker(dir.path(), &self.profile.summary_file).and_then(|t| {
            let mut it = t.split_whitespace().map(|n| n.parse::<u32>());
            match (it.next(), it.next()) {
                (Some(Ok(p)), Some(Ok(total))) => Some((p, total)),
                _ => None,
            }
        });
        Ok(SandboxResult {
            verdict,
            stdout: String::from_utf8_lossy(&outcome.stdout.bytes).into_owned(),
            stderr,
            failing_cases,
            wall_time: outcome.wall_time,
            stdout_truncated: outcome.stdout.truncated,
            stderr_truncated: outcome.stderr.truncated,
            case_counts,
        })
    }

    fn smoke_test(&self) -> String {
        self.profile.smoke_test.clone()
    }
}
