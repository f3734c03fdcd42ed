//! Synthetic grid tasks, Adam training through budget curricula, and evaluation.

mod eval;
mod metrics;
mod optim;
mod task;
mod train;

pub use eval::{eval_seed, evaluate, evaluate_with, EVAL_STREAM};
pub use metrics::{write_metrics_csv, MetricsRow};
pub use optim::{cosine_lr, Adam, AdamConfig};
pub use task::{gen_indexed, gen_sample, sample_rng, SyntheticSample, TaskKind, TaskSpec, QUADRANTS};
pub use train::{train, TrainConfig, TrainOutcome};
