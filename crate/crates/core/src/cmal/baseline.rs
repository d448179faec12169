use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::metrics::TeamReward;
use crate::model::{greedy_joint, truncate_at_period, DecoderLogits, JointAction, TokenId};

/// Maximum allowed `|Σπ − 1|` for a policy fed to a counterfactual baseline.
pub const NORMALIZATION_TOL: f64 = 1e-9;

pub const DEFAULT_MA_DECAY: f64 = 0.9;

/// Which baseline is subtracted from the team reward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BaselineKind {
    None,
    MovingAverage { decay: f64 },
    SelfCritical,
    /// Top-`k` counterfactual baseline; `k = |U|` is the exact form.
    Counterfactual { k: usize },
}

impl BaselineKind {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        match *self {
            BaselineKind::MovingAverage { decay } if !(decay > 0.0 && decay < 1.0) => {
                invalid(format!("moving-average decay {decay} outside (0, 1)"))
            }
            BaselineKind::Counterfactual { k } if k == 0 || k > vocab_size => {
                invalid(format!("top-k {k} outside [1, {vocab_size}]"))
            }
            _ => Ok(()),
        }
    }

    /// Short name used in logs and on the command line.
    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::None => "none",
            BaselineKind::MovingAverage { .. } => "ma",
            BaselineKind::SelfCritical => "sc",
            BaselineKind::Counterfactual { .. } => "cf",
        }
    }

    /// Reward evaluations one training sample costs: `R(u)` plus the
    /// baseline's own queries.
    pub fn reward_evals_per_sample(&self, num_agents: usize) -> usize {
        match *self {
            BaselineKind::None | BaselineKind::MovingAverage { .. } => 1,
            BaselineKind::SelfCritical => 2,
            BaselineKind::Counterfactual { k } => num_agents * k + 1,
        }
    }
}

/// A team reward over untruncated joint actions.
pub trait RewardFn: Sync {
    fn reward(&self, tokens: &[TokenId]) -> f64;

    /// True when the reward only depends on the tokens before the first
    /// period, which makes memoizing on the truncated caption safe.
    fn ignores_tail(&self) -> bool {
        false
    }
}

impl RewardFn for TeamReward<'_> {
    fn reward(&self, tokens: &[TokenId]) -> f64 {
        self.score(tokens)
    }

    fn ignores_tail(&self) -> bool {
        true
    }
}

impl<F: Fn(&[TokenId]) -> f64 + Sync> RewardFn for F {
    fn reward(&self, tokens: &[TokenId]) -> f64 {
        self(tokens)
    }
}

/// Counts reward queries and memoizes them by truncated caption when the
/// reward allows it. `requests` counts every query, cached or not.
pub struct RewardEvaluator<'a> {
    reward: &'a dyn RewardFn,
    memo: Option<HashMap<Vec<TokenId>, f64>>,
    requests: usize,
    computed: usize,
}

impl<'a> RewardEvaluator<'a> {
    pub fn new(reward: &'a dyn RewardFn) -> Self {
        let memo = reward.ignores_tail().then(HashMap::new);
        Self {
            reward,
            memo,
            requests: 0,
            computed: 0,
        }
    }

    pub fn eval(&mut self, tokens: &[TokenId]) -> f64 {
        self.requests += 1;
        let Some(memo) = self.memo.as_mut() else {
            self.computed += 1;
            return self.reward.reward(tokens);
        };
        let key = truncate_at_period(tokens);
        if let Some(&r) = memo.get(key) {
            return r;
        }
        self.computed += 1;
        let r = self.reward.reward(tokens);
        memo.insert(key.to_vec(), r);
        r
    }

    pub fn requests(&self) -> usize {
        self.requests
    }

    /// Queries that actually ran the reward function.
    pub fn computed(&self) -> usize {
        self.computed
    }
}

/// Top-`k` token ids of `policy` by probability, ties to the lower id,
/// returned in ascending id order.
pub fn top_k_tokens(policy: &[f64], k: usize) -> Vec<TokenId> {
    let mut ids: Vec<TokenId> = (0..policy.len()).collect();
    ids.sort_by(|&a, &b| policy[b].total_cmp(&policy[a]).then(a.cmp(&b)));
    ids.truncate(k);
    ids.sort_unstable();
    ids
}

/// Counterfactual baseline from explicit per-agent policies. Every agent's
/// replacement tokens are restricted to its top `k`, renormalized, and
/// summed in ascending id order, so `k = |U|` and the exact form share one
/// code path.
pub fn counterfactual_baseline_from_policies(
    policies: &[Vec<f64>],
    joint: &JointAction,
    reward: &mut RewardEvaluator<'_>,
    k: usize,
) -> Result<Vec<f64>> {
    if policies.len() != joint.len() {
        return invalid(format!("{} policies for {} agents", policies.len(), joint.len()));
    }
    let mut out = Vec::with_capacity(policies.len());
    for (a, pi) in policies.iter().enumerate() {
        if k == 0 || k > pi.len() {
            return invalid(format!("top-k {k} outside [1, {}]", pi.len()));
        }
        let total: f64 = pi.iter().sum();
        if !((total - 1.0).abs() <= NORMALIZATION_TOL) || pi.iter().any(|&p| p < 0.0) {
            return invalid(format!("policy of agent {a} is not normalized (sum {total})"));
        }
        let support = top_k_tokens(pi, k);
        let mass: f64 = support.iter().map(|&t| pi[t]).sum();
        let mut b = 0.0;
        for &t in &support {
            let r = reward.eval(joint.with_replacement(a, t).tokens());
            b += pi[t] / mass * r;
        }
        out.push(b);
    }
    Ok(out)
}

/// `B_a = Σ_{u'} π_a(u')·R([u_{−a}, u'])`
pub fn exact_counterfactual_baseline(
    logits: &DecoderLogits,
    joint: &JointAction,
    reward: &mut RewardEvaluator<'_>,
) -> Result<Vec<f64>> {
    counterfactual_baseline_from_policies(&logits.policies(), joint, reward, logits.vocab_size())
}

/// Counterfactual baseline over each agent's `k` most probable tokens with
/// renormalized probabilities.
pub fn topk_counterfactual_baseline(
    logits: &DecoderLogits,
    joint: &JointAction,
    reward: &mut RewardEvaluator<'_>,
    k: usize,
) -> Result<Vec<f64>> {
    counterfactual_baseline_from_policies(&logits.policies(), joint, reward, k)
}

/// Reward of the all-greedy joint action, broadcast to every agent.
pub fn self_critical_baseline(logits: &DecoderLogits, reward: &mut RewardEvaluator<'_>) -> Result<Vec<f64>> {
    let greedy = greedy_joint(logits)?;
    Ok(vec![reward.eval(greedy.tokens()); logits.num_agents()])
}

/// Exponential moving average of batch-mean rewards.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MovingAverageState {
    pub value: f64,
    pub initialized: bool,
}

impl MovingAverageState {
    /// Baseline for the current batch: the value before this batch's update.
    pub fn baseline(&self) -> f64 {
        if self.initialized {
            self.value
        } else {
            0.0
        }
    }

    /// Folds in a batch mean and returns the baseline that applied to it.
    pub fn update(&mut self, batch_mean_reward: f64, decay: f64) -> f64 {
        let before = self.baseline();
        if self.initialized {
            self.value = decay * self.value + (1.0 - decay) * batch_mean_reward;
        } else {
            self.value = batch_mean_reward;
            self.initialized = true;
        }
        before
    }
}

/// `A_a = R(u) − B_a`
pub fn advantages(team_reward: f64, baselines: &[f64]) -> Vec<f64> {
    baselines.iter().map(|b| team_reward - b).collect()
}
