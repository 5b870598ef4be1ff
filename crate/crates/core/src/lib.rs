//! Decentralized L-BFGS-ADMM: a simulator for multi-agent composite convex
//! optimization with limited-memory quasi-Newton primal steps.
//!
//! The crate is organized around the pipeline of an experiment:
//! [`graph`] builds the communication topology, [`objective`] supplies local
//! costs and the shared regularizer, [`engine`] runs the synchronous or
//! asynchronous iteration, [`analysis`] provides reference solutions, error
//! metrics, and runtime invariant monitors, and [`data`] loads LIBSVM
//! datasets for the benchmark workloads.

pub mod analysis;
pub mod data;
pub mod engine;
pub mod graph;
pub mod lbfgs;
pub mod linalg;
pub mod objective;
