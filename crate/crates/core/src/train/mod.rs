//! Siamese training of the extractor.

pub mod adam;
pub mod batch;
pub mod loss;
pub mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use batch::{assemble_minibatch, MinibatchGroupSet, PatchPool};
pub use loss::{GroupLabels, LossBreakdown};
pub use trainer::{train, train_on, train_step, validation_margin, TrainConfig, TrainLogEntry, TrainOutcome};
