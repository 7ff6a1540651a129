//! Simulation of a small FIFO-scheduled GPU cluster with per-group access
//! policies, plus an on-premises vs. cloud cost model fed by the measured usage.
//!
//! - [`cluster`]: nodes, GPU inventory and group policies
//! - [`sched`]: authorization, FIFO queueing and least-loaded placement
//! - [`sim`] and [`workload`]: event-driven simulation and GPU-hour accounting
//! - [`cost`]: monthly and cumulative costs, break-even and usage sweeps
//! - [`scenario`] and [`commands`]: scenario files and the CLI commands

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cluster;
pub mod commands;
pub mod cost;
pub mod scenario;
pub mod sched;
pub mod sim;
pub mod workload;
