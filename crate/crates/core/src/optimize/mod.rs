//! Joint Adam training of both fields.

mod adam;
mod objective;
mod trainer;

pub use adam::{AdamConfig, AdamState};
pub use objective::{loss_terms, objective, sample_batch, Batch, ObjectiveConfig};
pub use trainer::{iteration_rng, train, train_iteration, LrSchedule, TrainConfig, Trainer, CHECKPOINT_FILE};
