//! Experiment harness for the correlated-noise private-averaging and
//! functional-mechanism simulator: dataset generation/loading, sweep
//! runners, and CSV/NDJSON result writers.

pub mod data;
pub mod experiment;
