//! Table-driven provider for offline runs.
//!
//! A script is a TOML file holding a list of `[[entry]]` tables:
//!
//! ```toml
//! [[entry]]
//! path = "0.2"        # node path, "root" for the root, "*" for any node
//! phase = "plan"
//! round = 0           # optional; omitted means "any round"
//! content = """
//! 1. parse the input
//! VERDICT: PROCEED
//! """
//! input_tokens = 120  # optional; estimated from the prompt when omitted
//! output_tokens = 14  # optional; estimated from the content when omitted
//! ```
//!
//! Lookup tries the most specific key first: exact path and round, exact path
//! with any round, any path with exact round, then any path and any round.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    estimate_tokens, CompletionProvider, CompletionRequest, CompletionResponse, Phase, ProviderError,
};
use crate::model::NodePath;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub path: String,
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<u32>,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_tokens: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum PathKey {
    Exact(NodePath),
    Any,
}

type Key = (PathKey, Phase, Option<u32>);

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct ScriptFile {
    #[serde(default)]
    entry: Vec<ScriptEntry>,
}

/// In-memory script. Later insertions for the same key replace earlier ones.
#[derive(Debug, Clone, Default)]
pub struct ScriptTable {
    entries: HashMap<Key, ScriptEntry>,
    order: Vec<Key>,
}

impl ScriptTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ProviderError> {
        let file: ScriptFile =
            toml::from_str(text).map_err(|e| ProviderError::Script(e.to_string()))?;
        let mut table = Self::new();
        for entry in file.entry {
            table.insert(entry)?;
        }
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProviderError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::Script(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        let file = ScriptFile {
            entry: self.order.iter().map(|k| self.entries[k].clone()).collect(),
        };
        toml::to_string(&file).expect("script entries always serialize")
    }

    pub fn insert(&mut self, entry: ScriptEntry) -> Result<(), ProviderError> {
        let path = match entry.path.trim() {
            "*" => PathKey::Any,
            other => PathKey::Exact(
                other.parse().map_err(|e: crate::model::ParsePathError| ProviderError::Script(e.to_string()))?,
            ),
        };
        let key = (path, entry.phase, entry.round);
        if self.entries.insert(key.clone(), entry).is_none() {
            self.order.push(key);
        }
        Ok(())
    }

    /// Registers a response for an exact `(path, phase, round)` key with
    /// token counts estimated at call time.
    pub fn set(&mut self, path: &NodePath, phase: Phase, round: u32, content: impl Into<String>) -> &mut Self {
        self.insert(ScriptEntry {
            path: path.to_string(),
            phase,
            round: Some(round),
            content: content.into(),
            input_tokens: None,
            output_tokens: None,
        })
        .expect("node paths always render parseably");
        self
    }

    /// Registers a response used for every round of `(path, phase)` that has
    /// no exact entry.
    pub fn set_any_round(&mut self, path: &NodePath, phase: Phase, content: impl Into<String>) -> &mut Self {
        self.insert(ScriptEntry {
            path: path.to_string(),
            phase,
            round: None,
            content: content.into(),
            input_tokens: None,
            output_tokens: None,
        })
        .expect("node paths always render parseably");
        self
    }

    /// Registers a fallback for `phase` at every node and round.
    pub fn set_default(&mut self, phase: Phase, content: impl Into<String>) -> &mut Self {
        self.insert(ScriptEntry {
            path: "*".into(),
            phase,
            round: None,
            content: content.into(),
            input_tokens: None,
            output_tokens: None,
        })
        .expect("wildcard path is valid");
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, path: &NodePath, phase: Phase, round: u32) -> Option<&ScriptEntry> {
        let exact = PathKey::Exact(path.clone());
        [
            (exact.clone(), phase, Some(round)),
            (exact, phase, None),
            (PathKey::Any, phase, Some(round)),
            (PathKey::Any, phase, None),
        ]
        .iter()
        .find_map(|key| self.entries.get(key))
    }
}

/// Answers completions from an immutable [`ScriptTable`].
#[derive(Debug, Clone)]
pub struct ScriptedProvider {
    table: ScriptTable,
}

impl ScriptedProvider {
    pub fn new(table: ScriptTable) -> Self {
        Self { table }
    }

    pub fn table(&self) -> &ScriptTable {
        &self.table
    }
}

impl CompletionProvider for ScriptedProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
        if request.messages.is_empty() {
            return Err(ProviderError::EmptyRequest);
        }
        let meta = &request.meta;
        let entry = self.table.lookup(&meta.path, meta.phase, meta.round).ok_or_else(|| {
            ProviderError::MissingScriptEntry {
                path: meta.path.to_string(),
                phase: meta.phase,
                round: meta.round,
            }
        })?;
        let input_tokens = entry.input_tokens.unwrap_or_else(|| {
            request.messages.iter().map(|m| estimate_tokens(&m.content)).sum()
        });
        let output_tokens = entry.output_tokens.unwrap_or_else(|| estimate_tokens(&entry.content));
        Ok(CompletionResponse { content: entry.content.clone(), input_tokens, output_tokens })
    }
}
