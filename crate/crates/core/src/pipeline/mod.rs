//! Data ingestion, the assembled model, training, synthesis, evaluation
//! metrics, plotting and checkpoints.

pub mod checkpoint;
pub mod corpus;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod train;
