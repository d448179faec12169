//! Training objectives: the per-position cross-entropy loss and the
//! multi-agent policy gradient with agent-agnostic or counterfactual
//! baselines.

mod baseline;
mod loss;
mod optim;
mod train;

pub use baseline::{
    advantages, counterfactual_baseline_from_policies, exact_counterfactual_baseline, self_critical_baseline,
    top_k_tokens, topk_counterfactual_baseline, BaselineKind, MovingAverageState, RewardEvaluator, RewardFn,
    DEFAULT_MA_DECAY, NORMALIZATION_TOL,
};
pub use loss::{cmal_surrogate_loss, pad_target, supervised_positions, xe_loss};
pub use optim::{clip_grad_norm, global_norm, Adam, AdamConfig};
pub use train::{
    baseline_values, surrogate_gradient, train_step_cmal, train_step_teacher, train_step_xe, CmalExample, CmalState, CmalStepStats,
    LogRecord, TrainingLog, XeExample, XeStepStats,
};
