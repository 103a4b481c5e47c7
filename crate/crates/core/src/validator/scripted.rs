use super::{SandboxError, SandboxResult, SuiteCheck, TestRunner, TestSuite, Verdict};

/// Offline stand-in for the subprocess sandbox. The verdict is a pure
/// function of the code and suite text:
///
/// - code containing `crash_marker` → `CrashedSetup`
/// - code containing `hang_marker` → `Timeout`
/// - code containing `fail_marker` → `Fail`
/// - every `REQUIRE: <token>` line of the suite whose token is absent from the
///   code → `Fail`
/// - otherwise `Pass`
///
/// Suites containing `bad_suite_marker` do not load.
#[derive(Debug, Clone)]
pub struct ScriptedRunner {
    pub fail_marker: String,
    pub crash_marker: String,
    pub hang_marker: String,
    pub bad_suite_marker: String,
}

impl Default for ScriptedRunner {
    fn default() -> Self {
        Self {
            fail_marker: "BUG".into(),
            crash_marker: "CRASH".into(),
            hang_marker: "HANG".into(),
            bad_suite_marker: "SYNTAX_ERROR".into(),
        }
    }
}

impl TestRunner for ScriptedRunner {
    fn check_suite(&self, suite: &TestSuite) -> Result<SuiteCheck, SandboxError> {
        Ok(if suite.test_code.contains(&self.bad_suite_marker) {
            SuiteCheck::Rejected(format!("suite contains {}", self.bad_suite_marker))
        } else {
            SuiteCheck::Loads
        })
    }

    fn run(&self, code: &str, suite: &TestSuite) -> Result<SandboxResult, SandboxError> {
        let mut failing = Vec::new();
        let verdict = if code.contains(&self.crash_marker) {
            Verdict::CrashedSetup
        } else if code.contains(&self.hang_marker) {
            Verdict::Timeout
        } else {
            if code.contains(&self.fail_marker) {
                failing.push(format!("code contains {}", self.fail_marker));
            }
            for line in suite.test_code.lines() {
                if let Some(token) = line.trim().strip_prefix("REQUIRE:") {
                    let token = token.trim();
                    if !token.is_empty() && !code.contains(token) {
                        failing.push(format!("missing {token}"));
                    }
                }
            }
            if failing.is_empty() {
                Verdict::Pass
            } else {
                Verdict::Fail
            }
        };
        let mut result = SandboxResult::with_verdict(verdict);
        if verdict == Verdict::Fail {
            result.stderr = failing.join("\n");
        }
        result.failing_cases = failing;
        Ok(result)
    }

    fn smoke_test(&self) -> String {
        "def test_loads():\n    pass\n".into()
    }
}
