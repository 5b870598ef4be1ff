//! Experiment runner for the decentralized L-BFGS-ADMM simulator: config
//! loading, reference-solution caching, trace/summary export, and the
//! invariant check command.

pub mod commands;
pub mod config;
