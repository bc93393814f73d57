//! Simulator, oracle, workloads, metrics and file formats around
//! `epochkv-core`.

pub mod audit;
pub mod cli;
pub mod config;
pub mod history;
pub mod metrics;
pub mod oracle;
pub mod pool;
pub mod sim;
pub mod workload;
