//! Parallel transaction-oriented (GPSS subset) simulator.
//!
//! Partitioned GPSS models run on optimistic logical processes synchronized
//! by Time Warp with lazy cancellation, or by Shock Resistant Time Warp when
//! the per-LP control component is enabled. A simulation controller computes
//! the global virtual time, confirms the simulation end and assembles the
//! post-simulation report. All actors communicate over an in-process
//! message-passing transport that can run threaded or on a deterministic
//! single-stepped harness.

pub mod config;
pub mod controller;
pub mod engine;
pub mod logging;
pub mod lp;
pub mod lpcc;
pub mod model;
pub mod report;
pub mod rng;
pub mod runner;
pub mod sequential;
pub mod transport;

pub use config::Config;
pub use engine::{Engine, MoveOutcome, RuntimeError, Transaction};
pub use model::{parse_model, BlockKind, BlockRef, BlockSpec, ModelSpec, ParseError, PartitionSpec};
pub use report::ReportSet;
pub use runner::{run_deterministic, RunOptions};
pub use sequential::{run_sequential, SequentialOutcome};
