//! Synthetic bug generation with tool-calling agents.
//!
//! The crate is organized along the pipeline:
//!
//! * [`sandbox`]: isolated per-instance environments (docker or local).
//! * [`model_client`]: chat-with-tools backends (live HTTP, scripted replay).
//! * [`agent`]: the tool-calling episode loop and its four tools.
//! * [`testkit`]: test execution, runner-output parsing, fail-to-pass sets.
//! * [`buggen`]: generation strategies, the continuation loop, campaigns.
//! * [`solver`]: k-attempt evaluation, metrics and SFT trajectory export.
//! * [`taxonomy`]: category guides and per-bug classification.
//! * [`dataset`]: the on-disk store, diff statistics and validation.
//! * [`toycorpus`]: bundled fixture repositories and replay scripts.

pub mod agent;
pub mod buggen;
pub mod config;
pub mod dataset;
pub mod model_client;
pub mod parallel;
pub mod prompts;
pub mod sandbox;
pub mod solver;
pub mod taxonomy;
pub mod testkit;
pub mod toycorpus;
