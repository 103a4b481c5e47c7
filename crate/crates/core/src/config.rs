//! Engine configuration file (TOML).
//!
//! ```toml
//! [tree]
//! max_height = 3
//! initial_degree = 3
//! degree_decay = 1
//! max_verify_retries = 3
//!
//! [memory]
//! enabled = true
//! similarity_threshold = 0.75
//!
//! [sandbox]
//! runner = "subprocess"
//! interpreter = "python3"
//! timeout_secs = 10.0
//!
//! [provider]
//! kind = "scripted"
//! script = "script.toml"
//!
//! [harness]
//! rounds = 1
//! seed = 0
//! ```
//!
//! Every section and field is optional.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::{HarnessOptions, ScoringMode, SweepMemory};
use crate::memory::{MemoryConfig, MemoryError, MemoryStore};
use crate::model::TreeConfig;
use crate::orchestrator::OrchestratorOptions;
use crate::parallel::Execution;
use crate::provider::{
    CompletionProvider, Embedder, HashedBagEmbedder, LiveConfig, LiveProvider, ProviderError, ScriptTable,
    ScriptedProvider,
};
use crate::validator::{RunnerProfile, SandboxLimits, ScriptedRunner, SubprocessSandbox, TestRunner};

#[derive(Debug, Error)]
pub enum EngineConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemorySection {
    pub enabled: bool,
    #[serde(flatten)]
    pub config: MemoryConfig,
    /// Which embedder backs the store: the offline hashed embedder or the
    /// live provider's embedding endpoint.
    pub embedder: EmbedderKind,
    /// Snapshot loaded at start-up (if present) and saved at exit.
    pub snapshot: Option<PathBuf>,
}

impl Default for MemorySection {
    fn default() -> Self {
        Self { enabled: true, config: MemoryConfig::default(), embedder: EmbedderKind::Hashed, snapshot: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Hashed,
    Live,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunnerKind {
    Subprocess,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SandboxSection {
    pub runner: RunnerKind,
    pub interpreter: String,
    #[serde(flatten)]
    pub limits: SandboxLimits,
}

impl Default for SandboxSection {
    fn default() -> Self {
        Self { runner: RunnerKind::Subprocess, interpreter: "python3".into(), limits: SandboxLimits::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Scripted,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderSection {
    pub kind: ProviderKind,
    /// Script table for the scripted provider.
    pub script: Option<PathBuf>,
    pub live: LiveConfig,
}

impl Default for ProviderSection {
    fn default() -> Self {
        Self { kind: ProviderKind::Scripted, script: None, live: LiveConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessSection {
    pub rounds: u32,
    pub seed: u64,
    pub scoring: ScoringMode,
    pub parallel_tasks: bool,
    pub parallel_siblings: bool,
    pub parallel_sweep: bool,
}

impl Default for HarnessSection {
    fn default() -> Self {
        Self {
            rounds: 1,
            seed: 0,
            scoring: ScoringMode::AllTestsPass,
            parallel_tasks: false,
            parallel_siblings: false,
            parallel_sweep: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub tree: TreeConfig,
    pub memory: MemorySection,
    pub sandbox: SandboxSection,
    pub provider: ProviderSection,
    pub harness: HarnessSection,
}

fn mode(parallel: bool) -> Execution {
    if parallel {
        Execution::Parallel
    } else {
        Execution::Sequential
    }
}

impl EngineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, EngineConfigError> {
        Ok(toml::from_str(text)?)
    }

    /// Reads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, EngineConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| EngineConfigError::Io { path: path.to_path_buf(), source })?;
        let mut config = Self::from_toml_str(&text)?;
        if let Some(base) = path.parent() {
            let rebase = |p: &mut Option<PathBuf>| {
                if let Some(inner) = p.as_mut() {
                    if inner.is_relative() {
                        *inner = base.join(&*inner);
                    }
                }
            };
            rebase(&mut config.provider.script);
            rebase(&mut config.memory.snapshot);
        }
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), EngineConfigError> {
        self.tree.validate().map_err(|e| EngineConfigError::Invalid(e.to_string()))?;
        if self.memory.enabled {
            self.memory.config.validate()?;
        }
        if self.sandbox.limits.timeout_secs.is_nan() || self.sandbox.limits.timeout_secs <= 0.0 {
            return Err(EngineConfigError::Invalid("sandbox timeout must be positive".into()));
        }
        if self.harness.rounds == 0 {
            return Err(EngineConfigError::Invalid("harness rounds must be at least 1".into()));
        }
        if self.harness.parallel_tasks && self.memory.enabled {
            return Err(EngineConfigError::Invalid("parallel_tasks requires memory to be disabled".into()));
        }
        Ok(())
    }

    pub fn orchestrator_options(&self) -> OrchestratorOptions {
        OrchestratorOptions {
            tree: self.tree,
            sibling_execution: mode(self.harness.parallel_siblings),
            stderr_budget_bytes: self.sandbox.limits.stderr_budget_bytes,
            ..OrchestratorOptions::default()
        }
    }

    pub fn harness_options(&self) -> HarnessOptions {
        HarnessOptions {
            orchestrator: self.orchestrator_options(),
            scoring: self.harness.scoring,
            task_execution: mode(self.harness.parallel_tasks),
            sweep_execution: mode(self.harness.parallel_sweep),
        }
    }

    pub fn build_provider(&self) -> Result<Arc<dyn CompletionProvider>, EngineConfigError> {
        Ok(match self.provider.kind {
            ProviderKind::Scripted => {
                let path = self.provider.script.as_ref().ok_or_else(|| {
                    EngineConfigError::Invalid("the scripted provider needs a script table path".into())
                })?;
                Arc::new(ScriptedProvider::new(ScriptTable::load(path)?))
            }
            ProviderKind::Live => Arc::new(LiveProvider::new(self.provider.live.clone())?),
        })
    }

    pub fn build_embedder(&self) -> Result<Arc<dyn Embedder>, EngineConfigError> {
        Ok(match self.memory.embedder {
            EmbedderKind::Hashed => Arc::new(HashedBagEmbedder::default()),
            EmbedderKind::Live => Arc::new(LiveProvider::new(self.provider.live.clone())?),
        })
    }

    /// The configured store, loaded from the snapshot if one exists.
    pub fn build_memory(&self) -> Result<Option<MemoryStore>, EngineConfigError> {
        if !self.memory.enabled {
            return Ok(None);
        }
        let embedder = self.build_embedder()?;
        if let Some(path) = &self.memory.snapshot {
            if path.exists() {
                return Ok(Some(MemoryStore::load(path, embedder)?));
            }
        }
        Ok(Some(MemoryStore::new(self.memory.config, embedder)?))
    }

    pub fn sweep_memory(&self) -> Result<Option<SweepMemory>, EngineConfigError> {
        if !self.memory.enabled {
            return Ok(None);
        }
        Ok(Some(SweepMemory { config: self.memory.config, embedder: self.build_embedder()? }))
    }

    pub fn build_runner(&self) -> Arc<dyn TestRunner> {
        match self.sandbox.runner {
            RunnerKind::Subprocess => Arc::new(SubprocessSandbox::new(
                RunnerProfile::python_with(&self.sandbox.interpreter),
                self.sandbox.limits.clone(),
            )),
            RunnerKind::Scripted => Arc::new(ScriptedRunner::default()),
        }
    }
}
