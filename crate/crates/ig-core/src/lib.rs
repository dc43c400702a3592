//! Corpus-level diagnostics over LLM-agent execution traces: a processed
//! trace store with schema statistics, hybrid lexical-semantic search, an
//! orchestrated scout/investigator analysis loop, a judge-based report
//! evaluation harness, an iterative patch-evaluate loop controller, and
//! the statistics kit backing all of it.
//!
//! All model traffic goes through `gateway`, which routes per role and
//! can be driven entirely by a deterministic scripted mock, so every
//! layer above it is testable offline.

pub mod agents;
pub mod config;
pub mod eval;
pub mod gateway;
pub mod patcher;
pub mod search;
pub mod stats;
pub mod store;
pub mod tokens;
pub mod tools;
pub mod trace;

pub use store::{StoreError, TraceStore};
