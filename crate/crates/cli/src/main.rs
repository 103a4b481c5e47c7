//! `treecode` command-line interface.
//!
//! Subcommands: `run` solves one prompt, `bench` runs a task suite and scores
//! it, `sweep` varies the tree height or branching factor, `report` compares
//! two sets of run reports. Settings come from an optional TOML config file
//! and are overridden by flags.
//!
//! Exit codes: 0 when everything completed, 1 when a run or task aborted,
//! 2 on configuration or infrastructure errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use treecode::config::{EngineConfig, ProviderKind, RunnerKind};
use treecode::harness::{self, HarnessServices, RunReport, ScoringMode, SweepParam};
use treecode::orchestrator::{Orchestrator, RunError, Services};

#[derive(Parser, Debug)]
#[command(name = "treecode", version, about = "Tree-structured multi-agent code generation")]
struct Cli {
    #[command(flatten)]
    engine: EngineFlags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ProviderArg {
    Scripted,
    Live,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum RunnerArg {
    Subprocess,
    Scripted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ScoringArg {
    /// A task passes only if all hidden tests pass.
    All,
    /// Score each task by the fraction of hidden tests passed.
    Fraction,
}

#[derive(Args, Debug, Default)]
struct EngineFlags {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Maximum tree height m.
    #[arg(short = 'm', long, global = true)]
    max_height: Option<u32>,
    /// Root branching factor n.
    #[arg(short = 'n', long, global = true)]
    degree: Option<u32>,
    /// Per-level degree decay k.
    #[arg(short = 'k', long, global = true)]
    decay: Option<u32>,
    /// Maximum fix iterations r.
    #[arg(short = 'r', long, global = true)]
    retries: Option<u32>,
    #[arg(long, global = true)]
    clarification_rounds: Option<u32>,
    #[arg(long, global = true)]
    structure_corrections: Option<u32>,
    /// Long-term memory.
    #[arg(long, value_enum, global = true)]
    memory: Option<Switch>,
    /// Memory snapshot file, loaded if present and saved afterwards.
    #[arg(long, global = true)]
    memory_snapshot: Option<PathBuf>,
    #[arg(long, value_enum, global = true)]
    provider: Option<ProviderArg>,
    /// Script table for the scripted provider.
    #[arg(long, global = true)]
    script: Option<PathBuf>,
    /// Chat endpoint base URL for the live provider.
    #[arg(long, global = true)]
    endpoint: Option<String>,
    #[arg(long, global = true)]
    model: Option<String>,
    #[arg(long, value_enum, global = true)]
    runner: Option<RunnerArg>,
    #[arg(long, global = true)]
    interpreter: Option<String>,
    /// Sandbox wall-clock limit in seconds.
    #[arg(long, global = true)]
    timeout: Option<f64>,
    /// Bytes kept per sandbox output stream.
    #[arg(long, global = true)]
    stream_cap: Option<usize>,
    /// Bytes of stderr passed to repair prompts.
    #[arg(long, global = true)]
    stderr_budget: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run sibling subtrees concurrently.
    #[arg(long, global = true)]
    parallel_siblings: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve a single prompt.
    Run {
        /// The instruction text.
        #[arg(long, conflicts_with = "prompt_file", required_unless_present = "prompt_file")]
        prompt: Option<String>,
        #[arg(long)]
        prompt_file: Option<PathBuf>,
        /// Directory for solution, node records and trace.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run and score a task suite.
    Bench {
        /// Line-delimited task file.
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        rounds: Option<u32>,
        #[arg(long, value_enum)]
        scoring: Option<ScoringArg>,
        /// Run the tasks of a round concurrently (memory must be off).
        #[arg(long)]
        parallel_tasks: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep the tree height or the branching factor.
    Sweep {
        #[arg(long)]
        suite: PathBuf,
        /// `max_height` (m) or `initial_degree` (n).
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<u32>,
        #[arg(long)]
        rounds: Option<u32>,
        /// Run the values concurrently.
        #[arg(long)]
        parallel: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare token usage of two report files written by `bench`.
    Report {
        #[arg(long)]
        reports: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure classes mapped to exit codes.
enum Failure {
    Aborted(anyhow::Error),
    Setup(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Setup(e.into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(Failure::Aborted(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Setup(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn engine_config(flags: &EngineFlags) -> Result<EngineConfig> {
    let mut c = match &flags.config {
        Some(path) => EngineConfig::load(path)?,
        None => EngineConfig::default(),
    };
    let t = &mut c.tree;
    if let Some(v) = flags.max_height {
        t.max_height = v;
    }
    if let Some(v) = flags.degree {
        t.initial_degree = v;
    }
    if let Some(v) = flags.decay {
        t.degree_decay = v;
    }
    if let Some(v) = flags.retries {
        t.max_verify_retries = v;
    }
    if let Some(v) = flags.clarification_rounds {
        t.max_clarification_rounds = v;
    }
    if let Some(v) = flags.structure_corrections {
        t.max_structure_corrections = v;
    }
    if let Some(m) = flags.memory {
        c.memory.enabled = m == Switch::On;
    }
    if let Some(p) = &flags.memory_snapshot {
        c.memory.snapshot = Some(p.clone());
    }
    if let Some(p) = flags.provider {
        c.provider.kind = match p {
            ProviderArg::Scripted => ProviderKind::Scripted,
            ProviderArg::Live => ProviderKind::Live,
        };
    }
    if let Some(p) = &flags.script {
        c.provider.script = Some(p.clone());
    }
    if let Some(e) = &flags.endpoint {
        c.provider.live.endpoint = e.clone();
    }
    if let Some(m) = &flags.model {
        c.provider.live.model = m.clone();
    }
    if let Some(r) = flags.runner {
        c.sandbox.runner = match r {
            RunnerArg::Subprocess => RunnerKind::Subprocess,
            RunnerArg::Scripted => RunnerKind::Scripted,
        };
    }
    if let Some(i) = &flags.interpreter {
        c.sandbox.interpreter = i.clone();
    }
    if let Some(t) = flags.timeout {
        c.sandbox.limits.timeout_secs = t;
    }
    if let Some(cap) = flags.stream_cap {
        c.sandbox.limits.stream_cap_bytes = cap;
    }
    if let Some(b) = flags.stderr_budget {
        c.sandbox.limits.stderr_budget_bytes = b;
    }
    if let Some(s) = flags.seed {
        c.harness.seed = s;
    }
    if flags.parallel_siblings {
        c.harness.parallel_siblings = true;
    }
    Ok(c)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn safe_name(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect()
}

fn execute(cli: Cli) -> Result<ExitCode, Failure> {
    let mut config = engine_config(&cli.engine)?;
    match cli.command {
        Command::Run { prompt, prompt_file, out } => {
            config.validate()?;
            let prompt = match (prompt, prompt_file) {
                (Some(p), _) => p,
                (None, Some(path)) => {
                    std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?
                }
                (None, None) => return Err(Failure::Setup(anyhow::anyhow!("a prompt is required"))),
            };
            cmd_run(&config, &prompt, out.as_deref())
        }
        Command::Bench { suite, rounds, scoring, parallel_tasks, out } => {
            if let Some(r) = rounds {
                config.harness.rounds = r;
            }
            if let Some(s) = scoring {
                config.harness.scoring = match s {
                    ScoringArg::All => ScoringMode::AllTestsPass,
                    ScoringArg::Fraction => ScoringMode::PerTestFraction,
                };
            }
            config.harness.parallel_tasks |= parallel_tasks;
            config.validate()?;
            cmd_bench(&config, &suite, out.as_deref())
        }
        Command::Sweep { suite, param, values, rounds, parallel, out } => {
            if let Some(r) = rounds {
                config.harness.rounds = r;
            }
            config.harness.parallel_sweep |= parallel;
            config.validate()?;
            cmd_sweep(&config, &suite, param, &values, out.as_deref())
        }
        Command::Report { reports, baseline, out } => cmd_report(&reports, &baseline, out.as_deref()),
    }
}

fn cmd_run(config: &EngineConfig, prompt: &str, out: Option<&Path>) -> Result<ExitCode, Failure> {
    let provider = config.build_provider()?;
    let runner = config.build_runner();
    let memory = config.build_memory()?;
    let orchestrator = Orchestrator::new(
        config.orchestrator_options(),
        Services { provider: provider.as_ref(), memory: memory.as_ref(), runner: runner.as_ref() },
    );
    let result = orchestrator.run_workflow(prompt);
    if let (Some(store), Some(path)) = (&memory, &config.memory.snapshot) {
        store.save(path)?;
    }
    match result {
        Ok(outcome) => {
            if let Some(dir) = out {
                write_file(&dir.join("solution.py"), &outcome.artifact.code)?;
                write_file(&dir.join("trace.jsonl"), &outcome.trace.to_jsonl())?;
                write_file(&dir.join("nodes.json"), &serde_json::to_string_pretty(&outcome.nodes)?)?;
                write_file(&dir.join("artifact.json"), &serde_json::to_string_pretty(&outcome.artifact)?)?;
            }
            println!("{}", outcome.artifact.code);
            eprintln!(
                "verified: {}  nodes: {} executed / {} final  calls: {}  tokens: {} in / {} out",
                outcome.artifact.verified,
                outcome.stats.executed_nodes,
                outcome.stats.final_nodes,
                outcome.usage.completion_calls,
                outcome.usage.input_tokens,
                outcome.usage.output_tokens
            );
            Ok(ExitCode::SUCCESS)
        }
        Err(RunError::Aborted { source, trace, .. }) => {
            if let Some(dir) = out {
                write_file(&dir.join("trace.jsonl"), &trace.to_jsonl())?;
            }
            Err(Failure::Aborted(anyhow::Error::new(source).context("run aborted")))
        }
        Err(e) => Err(Failure::Setup(e.into())),
    }
}

fn print_report(report: &RunReport) {
    println!(
        "round {}  pass@1 {:.4} ({}/{})  aborted {}  tokens {} in / {} out  calls {}",
        report.round_index,
        report.pass_at_1,
        report.per_task.iter().filter(|t| t.passed).count(),
        report.per_task.len(),
        report.aborted_tasks(),
        report.totals.input_tokens,
        report.totals.output_tokens,
        report.totals.completion_calls
    );
}

fn cmd_bench(config: &EngineConfig, suite_path: &Path, out: Option<&Path>) -> Result<ExitCode, Failure> {
    let suite = harness::load_suite(suite_path)?;
    let provider = config.build_provider()?;
    let runner = config.build_runner();
    let memory = config.build_memory()?;
    let services = HarnessServices {
        provider: provider.as_ref(),
        memory: memory.as_ref(),
        runner: runner.as_ref(),
        scorer: runner.as_ref(),
    };
    let run = harness::run_suite(&suite, &config.harness_options(), services, config.harness.rounds, config.harness.seed)?;
    if let (Some(store), Some(path)) = (&memory, &config.memory.snapshot) {
        store.save(path)?;
    }
    if let Some(dir) = out {
        write_file(&dir.join("reports.json"), &serde_json::to_string_pretty(&run.reports)?)?;
        for t in &run.traces {
            let name = format!("round-{}/{}.jsonl", t.round_index, safe_name(&t.task_id));
            write_file(&dir.join("traces").join(name), &t.trace.to_jsonl())?;
        }
    }
    for report in &run.reports {
        print_report(report);
    }
    let aborted: usize = run.reports.iter().map(RunReport::aborted_tasks).sum();
    let infra: usize = run.reports.iter().map(RunReport::infra_errors).sum();
    if infra > 0 {
        return Err(Failure::Setup(anyhow::anyhow!("{infra} task(s) could not be scored (sandbox infrastructure error)")));
    }
    if aborted > 0 {
        return Err(Failure::Aborted(anyhow::anyhow!("{aborted} task run(s) aborted")));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(
    config: &EngineConfig,
    suite_path: &Path,
    param: SweepParam,
    values: &[u32],
    out: Option<&Path>,
) -> Result<ExitCode, Failure> {
    let suite = harness::load_suite(suite_path)?;
    let provider = config.build_provider()?;
    let runner = config.build_runner();
    let memory = config.sweep_memory()?;
    let table = harness::sweep(
        param,
        values,
        &config.harness_options(),
        provider.as_ref(),
        runner.as_ref(),
        runner.as_ref(),
        memory.as_ref(),
        &suite,
        config.harness.rounds,
        config.harness.seed,
    )?;
    let tsv = table.to_tsv();
    if let Some(dir) = out {
        write_file(&dir.join("sweep.json"), &serde_json::to_string_pretty(&table)?)?;
        write_file(&dir.join("sweep.tsv"), &tsv)?;
    }
    print!("{tsv}");
    if table.rows.iter().any(|r| r.error.is_some()) {
        for r in table.rows.iter().filter(|r| r.error.is_some()) {
            eprintln!("value {}: {}", r.value, r.error.as_deref().unwrap_or_default());
        }
        return Err(Failure::Aborted(anyhow::anyhow!("some sweep values failed")));
    }
    Ok(ExitCode::SUCCESS)
}

fn read_reports(path: &Path) -> Result<Vec<RunReport>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn cmd_report(reports: &Path, baseline: &Path, out: Option<&Path>) -> Result<ExitCode, Failure> {
    let a = read_reports(reports)?;
    let b = read_reports(baseline)?;
    if a.is_empty() {
        return Err(Failure::Setup(anyhow::anyhow!("{} holds no reports", reports.display())));
    }
    let comparison = harness::report_tokens(&a, &b)?;
    if let Some(path) = out {
        write_file(path, &serde_json::to_string_pretty(&comparison)?)?;
    }
    print!("{}", comparison.to_tsv());
    println!(
        "total\tdelta input {}\tdelta output {}\tdelta completion calls {}\tdelta embedding calls {}",
        comparison.delta.input_tokens,
        comparison.delta.output_tokens,
        comparison.delta.completion_calls,
        comparison.delta.embedding_calls
    );
    Ok(ExitCode::SUCCESS)
}
