//! Run configuration and the training pipeline: teacher, distillation,
//! XE pretraining of the student, CMAL fine-tuning, evaluation, latency
//! benchmarking and the gradient oracle check.

mod check;
mod config;
mod eval;
mod run;

pub use check::{oracle_check, oracle_features, oracle_model_config, OracleCase, OracleCheckReport, ORACLE_TOLERANCE};
pub use config::{BenchConfig, CmalConfig, DecodeConfig, LrSchedule, Paths, RunConfig, StageConfig, XeConfig};
pub use eval::{bench_latency, caption, evaluate, Decoder, EvalReport, LatencyReport, LatencyRow};
pub use run::{
    derive_seed, distill_dataset, train_cmal, train_teacher, train_xe, xe_training_set, CmalData, RunDir, RunLock,
    StageLog, StageOutcome, TrainState, XeItem,
};

#[cfg(test)]
mod tests;
