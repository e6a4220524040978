//! Datasets, the training loop, checkpoints and the ablation harness.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod optim;
pub mod trainer;
pub mod vocoder;

pub use checkpoint::Checkpoint;
pub use config::{DataPaths, FeatureSpec, OptimizerConfig, OptimizerKind, ScheduleConfig, TrainConfig};
pub use data::{make_toy_data, toy_dataset, Dataset, Utterance};
pub use trainer::{evaluate, evaluate_with, synthesize, train, train_with, EpochRecord, StepRecord, TrainOutcome};
pub use vocoder::{Synthesis, Vocoder};
