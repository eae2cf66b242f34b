//! Configuration, optimizer, training loop and inference over a trained model.

mod adam;
mod config;
mod detector;
mod trainer;

pub use adam::{adam_step, OptimizerState};
pub use config::TrainConfig;
pub use detector::{Analysis, CheckpointHeader, Detector, Prediction};
pub use trainer::{split_indices, train, EpochRecord, TrainOutcome};
