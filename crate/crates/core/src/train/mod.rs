//! Optimizer, learning-rate schedule, augmentation, checkpoints and the
//! training loop.

mod adam;
mod augment;
mod checkpoint;
mod config;
mod scheduler;
mod trainer;

pub use adam::{AdamState, Gradients};
pub use augment::augment;
pub use checkpoint::{Checkpoint, Progress, FORMAT_VERSION, MAGIC};
pub use config::{RunConfig, TrainConfig};
pub use scheduler::PlateauScheduler;
pub use trainer::{
    evaluate, score_pair, EpochRecord, EpochStats, Evaluation, FitOutputs, FitResult, ImageScores, StepStats,
    StopReason, Trainer, CSV_HEADER,
};
