//! Exact expectations of the policy-gradient estimators by enumerating every
//! joint action, the exact gradient of the expected loss by direct
//! differentiation, and sampled estimator variance.
//!
//! Baselines, sampling and policies are recomputed here from scratch; only
//! the model forward pass and the tape are shared with the training code.

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Gradients, Graph, Tensor, Var};
use crate::cmal::{BaselineKind, RewardFn};
use crate::error::{invalid, Result};
use crate::model::{ImageFeatures, Model, TokenId};

/// Upper bound on `|U|^N` for enumeration.
pub const MAX_JOINT_ACTIONS: usize = 1_000_000;
/// Upper bound on `|U|^N` for the directly differentiated expected loss,
/// which records a few nodes per joint action.
pub const MAX_DIRECT_JOINT_ACTIONS: usize = 4_096;
pub const MIN_VARIANCE_SAMPLES: usize = 1_000;
/// Relative deviations divide by `max(REL_FLOOR, |reference|)`.
pub const REL_FLOOR: f64 = 1e-8;

/// Deliberate estimator bugs, used to show the oracle catches them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mutation {
    #[default]
    None,
    FlipAdvantageSign,
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Forward pass kept on a tape so many loss heads can share it.
struct Forward<'m> {
    model: &'m Model,
    graph: Graph,
    logits: Var,
    policies: Vec<Vec<f64>>,
}

impl<'m> Forward<'m> {
    fn new(model: &'m Model, features: &ImageFeatures) -> Result<Self> {
        let mut graph = Graph::new();
        let logits = model.forward_na(&mut graph, features)?.logits;
        let t = graph.value(logits);
        let policies = (0..t.rows()).map(|a| softmax(t.row(a))).collect();
        Ok(Self {
            model,
            graph,
            logits,
            policies,
        })
    }

    fn num_agents(&self) -> usize {
        self.policies.len()
    }

    fn vocab(&self) -> usize {
        self.policies[0].len()
    }

    fn prob(&self, joint: &[TokenId]) -> f64 {
        joint.iter().enumerate().map(|(a, &t)| self.policies[a][t]).product()
    }

    /// Gradient of `−Σ_a A_a log π_a(u_a)`.
    fn estimator_gradient(&mut self, joint: &[TokenId], adv: &[f64]) -> Result<Gradients> {
        let mark = self.graph.len();
        let loss = self.graph.cross_entropy(self.logits, joint, adv)?;
        let mut grads = self.model.params.zero_grads();
        grads.extend(self.graph.backward(loss)?);
        self.graph.truncate(mark);
        Ok(grads)
    }
}

/// Reward cache keyed by the full joint action, valid for any reward.
struct Rewards<'r> {
    reward: &'r dyn RewardFn,
    cache: HashMap<Vec<TokenId>, f64>,
}

impl<'r> Rewards<'r> {
    fn new(reward: &'r dyn RewardFn) -> Self {
        Self {
            reward,
            cache: HashMap::new(),
        }
    }

    fn get(&mut self, joint: &[TokenId]) -> f64 {
        if let Some(&r) = self.cache.get(joint) {
            return r;
        }
        let r = self.reward.reward(joint);
        self.cache.insert(joint.to_vec(), r);
        r
    }
}

fn baselines(
    kind: BaselineKind,
    policies: &[Vec<f64>],
    joint: &[TokenId],
    rewards: &mut Rewards<'_>,
    constant: f64,
) -> Vec<f64> {
    let n = policies.len();
    match kind {
        BaselineKind::None => vec![0.0; n],
        BaselineKind::MovingAverage { .. } => vec![constant; n],
        BaselineKind::SelfCritical => {
            let greedy: Vec<TokenId> = policies
                .iter()
                .map(|p| {
                    let mut best = 0;
                    for (t, &v) in p.iter().enumerate() {
                        if v > p[best] {
                            best = t;
                        }
                    }
                    best
                })
                .collect();
            vec![rewards.get(&greedy); n]
        }
        BaselineKind::Counterfactual { k } => (0..n)
            .map(|a| {
                let p = &policies[a];
                let mut ranked: Vec<TokenId> = (0..p.len()).collect();
                ranked.sort_by(|&x, &y| p[y].partial_cmp(&p[x]).unwrap().then(x.cmp(&y)));
                let mut chosen = ranked[..k].to_vec();
                chosen.sort_unstable();
                let mass: f64 = chosen.iter().map(|&t| p[t]).sum();
                let mut u = joint.to_vec();
                let mut b = 0.0;
                for &t in &chosen {
                    u[a] = t;
                    b += p[t] / mass * rewards.get(&u);
                }
                b
            })
            .collect(),
    }
}

/// Every joint action in lexicographic order.
fn joint_actions(num_agents: usize, vocab: usize) -> impl Iterator<Item = Vec<TokenId>> {
    let total = vocab.pow(num_agents as u32);
    (0..total).map(move |mut i| {
        let mut u = vec![0; num_agents];
        for a in (0..num_agents).rev() {
            u[a] = i % vocab;
            i /= vocab;
        }
        u
    })
}

fn joint_count(num_agents: usize, vocab: usize, cap: usize) -> Result<usize> {
    match vocab.checked_pow(num_agents as u32) {
        Some(c) if c <= cap => Ok(c),
        _ => invalid(format!(
            "|U|^N = {vocab}^{num_agents} exceeds the enumeration bound of {cap} joint actions"
        )),
    }
}

fn add_scaled(total: &mut Gradients, part: &Gradients, scale: f64) {
    for (name, g) in part {
        let t = total.get_mut(name).expect("same layout");
        let data: Vec<f64> = t.data().iter().zip(g.data()).map(|(a, b)| a + scale * b).collect();
        *t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
    }
}

/// `Σ_u P(u)·g(u)` for the per-sample estimator gradient `g` under `kind`.
#[derive(Clone, Debug)]
pub struct ExpectedGradient {
    pub gradient: Gradients,
    pub joint_actions: usize,
    /// `Σ_u P(u)`, 1 up to rounding.
    pub total_mass: f64,
    pub expected_reward: f64,
}

/// Exact expected estimator gradient. A moving-average baseline is modelled
/// by its fixed point, the exact expected reward.
pub fn exact_expected_gradient(
    model: &Model,
    features: &ImageFeatures,
    reward: &dyn RewardFn,
    kind: BaselineKind,
    mutation: Mutation,
) -> Result<ExpectedGradient> {
    let mut fwd = Forward::new(model, features)?;
    let (n, vocab) = (fwd.num_agents(), fwd.vocab());
    kind.validate(vocab)?;
    let count = joint_count(n, vocab, MAX_JOINT_ACTIONS)?;
    let mut rewards = Rewards::new(reward);

    let mut expected_reward = 0.0;
    let mut total_mass = 0.0;
    for u in joint_actions(n, vocab) {
        let p = fwd.prob(&u);
        total_mass += p;
        expected_reward += p * rewards.get(&u);
    }

    let mut gradient = model.params.zero_grads();
    for u in joint_actions(n, vocab) {
        let p = fwd.prob(&u);
        let r = rewards.get(&u);
        let b = baselines(kind, &fwd.policies, &u, &mut rewards, expected_reward);
        let mut adv: Vec<f64> = b.iter().map(|b| r - b).collect();
        if mutation == Mutation::FlipAdvantageSign {
            adv.iter_mut().for_each(|a| *a = -*a);
        }
        let g = fwd.estimator_gradient(&u, &adv)?;
        add_scaled(&mut gradient, &g, p);
    }
    Ok(ExpectedGradient {
        gradient,
        joint_actions: count,
        total_mass,
        expected_reward,
    })
}

/// Gradient of the expected loss `−Σ_u P(u)·R(u)`, differentiated directly
/// through the joint probabilities instead of via the score function.
pub fn expected_loss_gradient(model: &Model, features: &ImageFeatures, reward: &dyn RewardFn) -> Result<Gradients> {
    let mut g = Graph::new();
    let logits = model.forward_na(&mut g, features)?.logits;
    let (n, vocab) = (g.value(logits).rows(), g.value(logits).cols());
    joint_count(n, vocab, MAX_DIRECT_JOINT_ACTIONS)?;
    let probs = g.softmax(logits)?;
    let mut cells = Vec::with_capacity(n);
    for a in 0..n {
        let row = g.slice(probs, 0, a, 1)?;
        let row_cells: Result<Vec<Var>> = (0..vocab).map(|t| g.slice(row, 1, t, 1)).collect();
        cells.push(row_cells?);
    }
    let mut terms = Vec::new();
    for u in joint_actions(n, vocab) {
        let mut p = cells[0][u[0]];
        for a in 1..n {
            p = g.mul(p, cells[a][u[a]])?;
        }
        terms.push(g.scale(p, -reward.reward(&u)));
    }
    let all = g.concat(&terms, 0)?;
    let loss = g.sum(all);
    let mut grads = model.params.zero_grads();
    grads.extend(g.backward(loss)?);
    Ok(grads)
}

/// Largest absolute and relative coordinate differences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Deviation {
    pub max_abs: f64,
    pub max_rel: f64,
}

pub fn deviation(candidate: &Gradients, reference: &Gradients) -> Deviation {
    let mut d = Deviation::default();
    for (name, r) in reference {
        let c = &candidate[name];
        for (x, y) in c.data().iter().zip(r.data()) {
            let abs = (x - y).abs();
            d.max_abs = d.max_abs.max(abs);
            d.max_rel = d.max_rel.max(abs / y.abs().max(REL_FLOOR));
        }
    }
    d
}

/// Result of comparing an estimator's exact expectation against the
/// no-baseline estimator and the directly differentiated expected loss.
#[derive(Clone, Debug, Serialize)]
pub struct EnumerationReport {
    pub vocab_size: usize,
    pub num_agents: usize,
    pub joint_actions: usize,
    pub total_mass: f64,
    pub baseline: BaselineKind,
    pub mutation: Mutation,
    pub expected_reward: f64,
    /// Baseline estimator vs no-baseline estimator.
    pub baseline_vs_plain: Deviation,
    /// No-baseline estimator vs direct differentiation.
    pub plain_vs_direct: Deviation,
    /// Largest coordinate of the direct gradient, for scale.
    pub gradient_scale: f64,
    #[serde(skip)]
    pub with_baseline: Gradients,
    #[serde(skip)]
    pub plain: Gradients,
    #[serde(skip)]
    pub direct: Gradients,
}

impl EnumerationReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.baseline_vs_plain.max_rel < tol && self.plain_vs_direct.max_rel < tol && (self.total_mass - 1.0).abs() < 1e-9
    }
}

pub fn unbiasedness_report(
    model: &Model,
    features: &ImageFeatures,
    reward: &dyn RewardFn,
    kind: BaselineKind,
    mutation: Mutation,
) -> Result<EnumerationReport> {
    let with = exact_expected_gradient(model, features, reward, kind, mutation)?;
    let plain = exact_expected_gradient(model, features, reward, BaselineKind::None, mutation)?;
    let direct = expected_loss_gradient(model, features, reward)?;
    let gradient_scale = direct
        .values()
        .flat_map(|t| t.data().iter())
        .fold(0.0f64, |m, x| m.max(x.abs()));
    Ok(EnumerationReport {
        vocab_size: model.config.vocab_size,
        num_agents: model.config.num_agents,
        joint_actions: with.joint_actions,
        total_mass: with.total_mass,
        baseline: kind,
        mutation,
        expected_reward: with.expected_reward,
        baseline_vs_plain: deviation(&with.gradient, &plain.gradient),
        plain_vs_direct: deviation(&plain.gradient, &direct),
        gradient_scale,
        with_baseline: with.gradient,
        plain: plain.gradient,
        direct,
    })
}

/// Per-coordinate sample variance of the estimator gradient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VarianceSummary {
    pub median: f64,
    pub mean: f64,
    pub max: f64,
    pub num_coords: usize,
    pub num_samples: usize,
    pub mean_reward: f64,
}

fn sample(policies: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Vec<TokenId> {
    policies
        .iter()
        .map(|p| {
            let x: f64 = rng.gen();
            let mut c = 0.0;
            for (t, &v) in p.iter().enumerate() {
                c += v;
                if x < c {
                    return t;
                }
            }
            p.len() - 1
        })
        .collect()
}

/// Draws `num_samples` joint actions and measures the unbiased variance of
/// every gradient coordinate the forward pass reaches. A moving-average
/// baseline tracks the rewards of the previous draws.
pub fn estimator_variance(
    model: &Model,
    features: &ImageFeatures,
    reward: &dyn RewardFn,
    kind: BaselineKind,
    num_samples: usize,
    seed: u64,
) -> Result<VarianceSummary> {
    if num_samples < MIN_VARIANCE_SAMPLES {
        return invalid(format!("need at least {MIN_VARIANCE_SAMPLES} samples, got {num_samples}"));
    }
    let mut fwd = Forward::new(model, features)?;
    kind.validate(fwd.vocab())?;
    let reachable: BTreeSet<String> = fwd.graph.param_names().map(str::to_string).collect();
    let mut rewards = Rewards::new(reward);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ma, mut ma_init) = (0.0, false);
    let mut mean: Vec<f64> = Vec::new();
    let mut m2: Vec<f64> = Vec::new();
    let mut reward_sum = 0.0;
    for i in 0..num_samples {
        let u = sample(&fwd.policies, &mut rng);
        let r = rewards.get(&u);
        reward_sum += r;
        let b = baselines(kind, &fwd.policies, &u, &mut rewards, ma);
        if let BaselineKind::MovingAverage { decay } = kind {
            ma = if ma_init { decay * ma + (1.0 - decay) * r } else { r };
            ma_init = true;
        }
        let adv: Vec<f64> = b.iter().map(|b| r - b).collect();
        let g = fwd.estimator_gradient(&u, &adv)?;
        let flat: Vec<f64> = g
            .iter()
            .filter(|(name, _)| reachable.contains(*name))
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect();
        if i == 0 {
            mean = vec![0.0; flat.len()];
            m2 = vec![0.0; flat.len()];
        }
        let k = (i + 1) as f64;
        for (j, x) in flat.into_iter().enumerate() {
            let d = x - mean[j];
            mean[j] += d / k;
            m2[j] += d * (x - mean[j]);
        }
    }
    let mut var: Vec<f64> = m2.iter().map(|s| s / (num_samples - 1) as f64).collect();
    var.sort_by(f64::total_cmp);
    let len = var.len();
    let median = if len % 2 == 1 {
        var[len / 2]
    } else {
        0.5 * (var[len / 2 - 1] + var[len / 2])
    };
    Ok(VarianceSummary {
        median,
        mean: var.iter().sum::<f64>() / len as f64,
        max: var[len - 1],
        num_coords: len,
        num_samples,
        mean_reward: reward_sum / num_samples as f64,
    })
}
