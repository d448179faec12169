use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Tensor;
use crate::cmal::BaselineKind;
use crate::error::Result;
use crate::metrics::{CiderCorpusStats, MetricKind, TeamReward};
use crate::model::{ImageFeatures, Model, ModelConfig, PERIOD};
use crate::oracle::{unbiasedness_report, EnumerationReport, Mutation};

/// Largest deviation tolerated between exact expected gradients.
pub const ORACLE_TOLERANCE: f64 = 1e-6;

const CHECK_BASELINES: [BaselineKind; 5] = [
    BaselineKind::None,
    BaselineKind::MovingAverage { decay: 0.9 },
    BaselineKind::SelfCritical,
    BaselineKind::Counterfactual { k: 2 },
    BaselineKind::Counterfactual { k: 4 },
];

#[derive(Clone, Debug, Serialize)]
pub struct OracleCase {
    pub seed: u64,
    pub passed: bool,
    pub report: EnumerationReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleCheckReport {
    pub tolerance: f64,
    pub mutation: Mutation,
    pub cases: Vec<OracleCase>,
    pub passed: bool,
    pub wall_time_s: f64,
}

/// Tiny model over four tokens (pad, period and two words).
pub fn oracle_model_config(num_agents: usize) -> ModelConfig {
    ModelConfig {
        num_layers: 1,
        model_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        vocab_size: 4,
        num_agents,
        max_regions: 2,
        feature_dim: 3,
    }
}

pub fn oracle_features(config: &ModelConfig, seed: u64) -> ImageFeatures {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageFeatures::new(Tensor::from_fn(config.max_regions, config.feature_dim, |_, _| rng.gen_range(-1.0..1.0)))
        .expect("non-empty features")
}

/// Exact-enumeration unbiasedness check of every baseline, on models with
/// 1 to 3 agents and a CIDEr-D team reward over a two-word vocabulary.
pub fn oracle_check(mutation: Mutation, seeds: u64) -> Result<OracleCheckReport> {
    let start = std::time::Instant::now();
    let refs = vec![vec![3, 2, PERIOD], vec![3, 3, PERIOD], vec![2, PERIOD]];
    let stats = CiderCorpusStats::build(&[refs.clone(), vec![vec![2, 2, PERIOD]]])?;
    let reward = TeamReward::new(&refs, &stats, MetricKind::CiderD)?;
    let mut cases = Vec::new();
    for agents in 1..=3 {
        let config = oracle_model_config(agents);
        for seed in 0..seeds {
            let model = Model::init(config.clone(), seed)?;
            let feat = oracle_features(&config, 1000 + seed);
            for kind in CHECK_BASELINES {
                let report = unbiasedness_report(&model, &feat, &reward, kind, mutation)?;
                cases.push(OracleCase {
                    seed,
                    passed: report.passed(ORACLE_TOLERANCE),
                    report,
                });
            }
        }
    }
    let passed = cases.iter().all(|c| c.passed);
    Ok(OracleCheckReport {
        tolerance: ORACLE_TOLERANCE,
        mutation,
        cases,
        passed,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}
