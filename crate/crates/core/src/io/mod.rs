//! File formats: run configs, checkpoints, sequence directories and results.

pub mod checkpoint;
pub mod config;
pub mod results;
pub mod sequence;
