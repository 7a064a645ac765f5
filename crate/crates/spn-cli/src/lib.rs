//! Experiment harness for the nodule classifiers: run configs, training,
//! cross-validation, grid sweeps, model files, and result tables.

pub mod config;
pub mod crossval;
pub mod eval;
pub mod grid;
pub mod label;
pub mod model_file;
pub mod results;
pub mod train;
