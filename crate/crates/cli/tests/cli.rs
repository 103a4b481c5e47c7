//! End-to-end runs of the `treecode` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SCRIPT: &str = r#"
[[entry]]
path = "*"
phase = "plan"
content = "1. Write add.\nVERDICT: PROCEED"

[[entry]]
path = "*"
phase = "decompose"
content = "```subtasks\n- validate the inputs\n- add the numbers\n```"

[[entry]]
path = "*"
phase = "review"
content = "VERDICT: ACCEPT"

[[entry]]
path = "*"
phase = "implement"
content = "```python\ndef add(a, b):\n    return a + b\n```"

[[entry]]
path = "*"
phase = "generate_tests"
content = "```python\ndef test_add():\n    assert add(2, 3) == 5\n```"
"#;

const SUITE: &str = concat!(
    r#"{"task_id":"t/add","prompt":"Write add(a, b).","entry_point":"add","hidden_tests":"def check(candidate):\n    assert candidate(1, 2) == 3\n"}"#,
    "\n",
    r#"{"task_id":"t/sub","prompt":"Write sub(a, b).","entry_point":"sub","hidden_tests":"def check(candidate):\n    assert candidate(3, 2) == 1\n"}"#,
    "\n"
);

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("script.toml"), SCRIPT).unwrap();
        std::fs::write(dir.path().join("suite.jsonl"), SUITE).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn treecode(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_treecode"))
            .arg("--script")
            .arg(self.path("script.toml"))
            .args(args)
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Record count from the snapshot header line.
fn snapshot_size(path: &Path) -> u64 {
    let text = std::fs::read_to_string(path).unwrap();
    let header: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(header["records"].as_u64().unwrap() as usize, text.lines().count() - 1);
    header["records"].as_u64().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_solution_and_trace() {
    let fx = Fixture::new();
    let out = fx.treecode(&["-m", "2", "-n", "2", "run", "--prompt", "Write add(a, b).", "--out", "out"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("def add(a, b):"));
    let solution = std::fs::read_to_string(fx.path("out/solution.py")).unwrap();
    assert!(solution.contains("return a + b"));
    let nodes = read_json(&fx.path("out/nodes.json"));
    assert_eq!(nodes.as_array().unwrap().len(), 3);
    let artifact = read_json(&fx.path("out/artifact.json"));
    assert_eq!(artifact["verified"], true);
    let trace = std::fs::read_to_string(fx.path("out/trace.jsonl")).unwrap();
    assert!(trace.lines().all(|l| serde_json::from_str::<Value>(l).is_ok()));
}

#[test]
fn run_reads_prompt_from_file() {
    let fx = Fixture::new();
    std::fs::write(fx.path("prompt.txt"), "Write add(a, b).").unwrap();
    let out = fx.treecode(&["-m", "1", "run", "--prompt-file", "prompt.txt"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
}

#[test]
fn aborted_run_exits_one_and_keeps_the_trace() {
    let fx = Fixture::new();
    // a script without any implementation response
    let partial: String = SCRIPT.split("[[entry]]").filter(|e| !e.contains("implement")).collect::<Vec<_>>().join("[[entry]]");
    std::fs::write(fx.path("script.toml"), partial).unwrap();
    let out = fx.treecode(&["-m", "1", "run", "--prompt", "Write add(a, b).", "--out", "out"]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(fx.path("out/trace.jsonl").exists());
}

#[test]
fn setup_errors_exit_two() {
    let fx = Fixture::new();
    let missing_suite = fx.treecode(&["bench", "--suite", "nope.jsonl"]);
    assert_eq!(missing_suite.status.code(), Some(2));
    std::fs::write(fx.path("bad.toml"), "[tree]\nmax_height = \"tall\"\n").unwrap();
    let bad_config = fx.treecode(&["--config", "bad.toml", "run", "--prompt", "x"]);
    assert_eq!(bad_config.status.code(), Some(2), "{}", stderr(&bad_config));
    let conflicting = fx.treecode(&["bench", "--suite", "suite.jsonl", "--parallel-tasks"]);
    assert_eq!(conflicting.status.code(), Some(2), "task-parallel with memory on must be rejected");
}

#[test]
fn bench_with_real_sandbox_scores_hidden_tests() {
    let fx = Fixture::new();
    let out = fx.treecode(&["-m", "1", "--memory", "off", "bench", "--suite", "suite.jsonl", "--rounds", "2", "--out", "out"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let reports = read_json(&fx.path("out/reports.json"));
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 2);
    for r in reports {
        // the script always writes `add`, so only the add task passes
        assert_eq!(r["pass_at_1"], 0.5);
        let passed: Vec<&str> = r["per_task"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|t| t["passed"] == true)
            .map(|t| t["task_id"].as_str().unwrap())
            .collect();
        assert_eq!(passed, ["t/add"]);
    }
    assert!(fx.path("out/traces/round-0").read_dir().unwrap().count() == 2);
}

#[test]
fn memory_snapshot_persists_between_invocations() {
    let fx = Fixture::new();
    let args = ["-m", "2", "-n", "2", "--runner", "scripted", "--memory-snapshot", "mem.json", "run", "--prompt", "Write add."];
    assert_eq!(fx.treecode(&args).status.code(), Some(0));
    let first = snapshot_size(&fx.path("mem.json"));
    let out = fx.treecode(&args);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(first > 0);
    // identical descriptions merge instead of growing the store
    assert_eq!(snapshot_size(&fx.path("mem.json")), first);
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let fx = Fixture::new();
    std::fs::write(
        fx.path("engine.toml"),
        "[tree]\nmax_height = 1\ninitial_degree = 2\n\n[sandbox]\nrunner = \"scripted\"\n",
    )
    .unwrap();
    let from_file = fx.treecode(&["--config", "engine.toml", "run", "--prompt", "x", "--out", "a"]);
    assert_eq!(from_file.status.code(), Some(0), "{}", stderr(&from_file));
    assert_eq!(read_json(&fx.path("a/nodes.json")).as_array().unwrap().len(), 1);
    let overridden = fx.treecode(&["--config", "engine.toml", "-m", "2", "run", "--prompt", "x", "--out", "b"]);
    assert_eq!(overridden.status.code(), Some(0), "{}", stderr(&overridden));
    assert_eq!(read_json(&fx.path("b/nodes.json")).as_array().unwrap().len(), 3);
}

#[test]
fn sweep_and_report_round_trip() {
    let fx = Fixture::new();
    let common = ["--runner", "scripted", "-n", "2"];
    let sweep = fx.treecode(&[&common[..], &["sweep", "--suite", "suite.jsonl", "--param", "m", "--values", "1,2", "--out", "sw"]].concat());
    assert_eq!(sweep.status.code(), Some(0), "{}", stderr(&sweep));
    assert_eq!(stdout(&sweep).lines().count(), 3);
    assert_eq!(read_json(&fx.path("sw/sweep.json"))["rows"].as_array().unwrap().len(), 2);

    let bench = |memory: &str, dir: &str| {
        let out = fx.treecode(&[&common[..], &["--memory", memory, "bench", "--suite", "suite.jsonl", "--out", dir]].concat());
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    };
    bench("on", "with");
    bench("off", "without");
    let report = fx.treecode(&["report", "--reports", "with/reports.json", "--baseline", "without/reports.json", "--out", "cmp.json"]);
    assert_eq!(report.status.code(), Some(0), "{}", stderr(&report));
    let cmp = read_json(&fx.path("cmp.json"));
    assert_eq!(cmp["delta"]["completion_calls"], 0);

    bench("off", "other");
    let other_seed = fx.treecode(&[&common[..], &["--seed", "99", "bench", "--suite", "suite.jsonl", "--out", "seeded"]].concat());
    assert_eq!(other_seed.status.code(), Some(0));
    let mismatch = fx.treecode(&["report", "--reports", "seeded/reports.json", "--baseline", "other/reports.json"]);
    assert_eq!(mismatch.status.code(), Some(2), "different seeds must not be compared");
}
