//! Command-line orchestration for the graph transformer pose decoder:
//! synthetic data generation, training, evaluation, ablations, and
//! attention-map export.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod export;
pub mod gendata;
pub mod metrics;
pub mod train;
