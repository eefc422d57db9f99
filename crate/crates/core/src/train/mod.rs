//! Optimiser, learning-rate schedule, training loop and checkpoints.

mod checkpoint;
mod config;
mod optim;
mod trainer;

pub use checkpoint::{file_digest, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Detector, TrainConfig};
pub use optim::{adamw_step, lr_at};
pub use trainer::{matching_accuracy, procedural_sources, Checkpoint, LogRecord, StepStats, ValidationSet};

#[cfg(test)]
mod tests;
