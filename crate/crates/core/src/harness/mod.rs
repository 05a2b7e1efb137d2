//! Experiment tooling: synthetic data, training, evaluation, ablations,
//! gradient checks, checkpoints and cost accounting.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod scene;
pub mod train;
pub mod gradcheck;
pub mod cost;
pub mod ablate;
pub mod coco;
