//! Independent reference implementations used to check the fast paths.

pub mod gradient;
pub mod metrics;

pub use gradient::{
    deviation, estimator_variance, exact_expected_gradient, expected_loss_gradient, unbiasedness_report, Deviation,
    EnumerationReport, ExpectedGradient, Mutation, VarianceSummary, MAX_DIRECT_JOINT_ACTIONS, MAX_JOINT_ACTIONS,
    MIN_VARIANCE_SAMPLES, REL_FLOOR,
};
pub use metrics::{bleu_bruteforce, cider_bruteforce, metric_oracles, MetricOracles};
