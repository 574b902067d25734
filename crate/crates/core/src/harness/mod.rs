//! Replay buffer, training loop, evaluation, metrics and checkpoints.

pub mod buffer;
pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod train;

pub use buffer::{Episode, EpisodeBuilder, ReplayBuffer};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use metrics::{read_metrics, MetricsRecord, MetricsWriter};
pub use train::{compare, evaluate, evaluate_checkpoint, random_policy_returns, run_training, CompareRun, EvalSummary, Trainer};
