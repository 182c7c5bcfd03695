//! Task-oriented speed benchmarking for conversational LLM endpoints.
//!
//! Tokens per second and the time a model needs to finish a task can rank
//! the same models differently: a model that emits tokens quickly but says
//! a lot may still finish last. This crate renders multiple-choice datasets
//! into task prompt sets ([`suite`]), streams them through OpenAI-compatible
//! endpoints while timing every fragment ([`client`], [`runner`]), and turns
//! the traces into per-token and per-task metrics, rankings and reports
//! ([`metrics`], [`report`]). [`mockserver`] provides a deterministic
//! endpoint for hermetic runs.

pub mod client;
pub mod metrics;
pub mod mockserver;
pub mod report;
pub mod runner;
pub mod suite;
pub mod tokenize;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
