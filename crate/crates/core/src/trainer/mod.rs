//! Experiment driver: objectives, training loop, evaluation, gradient
//! checks, reporting and plotting.

pub mod config;
pub mod evaluate;
pub mod gradcheck;
pub mod metrics;
pub mod objective;
pub mod plot;
pub mod report;
pub mod train;

pub use config::RunConfig;
pub use objective::{ObjectiveKind, ObjectiveSpec};
pub use train::{evaluate_checkpoint, train, train_on, RunSummary};
