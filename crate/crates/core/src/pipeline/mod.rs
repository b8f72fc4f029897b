//! Two-phase training (labeled pre-training, then joint discovery), its
//! configuration, and experiment orchestration.

pub mod config;
pub mod experiment;
pub mod gradcheck;
pub mod schedule;
pub mod train;

pub use config::{ContrastiveMode, EvalConfig, EvalFeatures, ExperimentConfig, TrainConfig};
pub use experiment::{
    ablation_variants, evaluate_protocol, mean_by_variant, run_ablation, run_experiment, run_many,
    run_to_dir, AblationResult, EpochRecord, MetricsRow, RunCheckpoint, RunOptions, RunOutcome,
    StopPoint,
};
pub use gradcheck::gradcheck_suite;
pub use schedule::lr_at;
pub use train::{
    discover_batch, embed, pretrain_batch, DiscoverBatch, LossComponents, Momentum, Phase,
    PhaseState, PretrainBatch, Trainer,
};
