//! Evolutionary optimization of text artifacts driven by evaluator feedback
//! and a reflective proposer.

pub mod bench;
pub mod cli;
pub mod config;
pub mod engine;
pub mod eval;
pub mod model;
pub mod pareto;
pub mod persist;
pub mod proposer;
