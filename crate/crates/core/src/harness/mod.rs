//! Training, evaluation and their plumbing: configuration files, the
//! learning-rate schedule, Adam, checkpoints and the gradient-check suite.

pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod gradcheck;
pub mod optim;
pub mod train;

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC};
pub use config::{Configurable, GenerateConfig, OptimConfig, TrainConfig};
pub use evaluate::{
    alignment_offsets, decode_dataset, evaluate_checkpoint, evaluate_model, export_attention, model_from_checkpoint,
    score, Decoded, Evaluation,
};
pub use gradcheck::{gradient_suite, GradReport, GRADCHECK_STEP};
pub use optim::{clip_grad_norm, lr_at, Adam};
pub use train::{metrics_csv, train, train_from_config, EpochMetrics, Skipped, TrainOutcome, Trainer, METRICS_COLUMNS};
