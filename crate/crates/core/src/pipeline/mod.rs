//! Training: synthetic data, SpecAugment, the two-stage curriculum and checkpoints.

mod augment;
mod checkpoint;
mod config;
mod toy;
mod train;

pub use augment::{sample_mask, spec_augment, MaskParams};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{DataSource, SpecAugmentConfig, Stage, TrainConfig};
pub use toy::{generate_toy_batch, ToyTaskSpec};
pub use train::{
    clip_global_norm, evaluate_loss, load_utterances, save_utterances, train_stage, Adam, Dataset, EpochStats,
    TrainOutcome,
};
