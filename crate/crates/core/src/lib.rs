//! Tree-structured multi-agent code generation.
//!
//! A root code agent plans a task, optionally delegates subtasks to child
//! agents within height and branching bounds, implements code on top of the
//! children's verified helpers, and has every candidate tested in a sandbox
//! with a bounded repair loop. Verified experiences go into a vector memory
//! that later agents consult while planning.

pub mod calls;
pub mod model;
pub mod parse;
pub mod prompts;
pub mod provider;
pub mod validator;
pub mod memory;
pub mod parallel;
pub mod orchestrator;
pub mod trace;
pub mod harness;
pub mod config;
