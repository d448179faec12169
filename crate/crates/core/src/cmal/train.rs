use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::baseline::{
    advantages, counterfactual_baseline_from_policies, self_critical_baseline, BaselineKind, MovingAverageState,
    RewardEvaluator, RewardFn,
};
use super::loss::{cmal_surrogate_loss, supervised_positions, xe_loss};
use super::optim::Adam;
use crate::autodiff::{Gradients, Graph, Tensor};
use crate::error::{invalid, Error, Result};
use crate::model::{sample_joint, DecoderLogits, ImageFeatures, JointAction, Model, TokenId, BOS, PERIOD};

/// One supervised example: features and a target padded to `N`.
#[derive(Clone, Copy, Debug)]
pub struct XeExample<'a> {
    pub features: &'a ImageFeatures,
    pub target: &'a [TokenId],
}

/// One reinforcement example: features and the reward of its references.
#[derive(Clone, Copy)]
pub struct CmalExample<'a> {
    pub features: &'a ImageFeatures,
    pub reward: &'a dyn RewardFn,
}

/// Statistics of one CMAL step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmalStepStats {
    pub loss: f64,
    pub mean_reward: f64,
    pub mean_abs_advantage: f64,
    /// Reward queries over the whole batch, cached ones included.
    pub reward_evals: usize,
    /// Reward queries that missed the cache.
    pub reward_computed: usize,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XeStepStats {
    pub loss: f64,
    pub grad_norm: f64,
}

/// Mutable state carried across CMAL steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CmalState {
    pub optimizer: Adam,
    pub moving_average: MovingAverageState,
}

impl CmalState {
    pub fn new(optimizer: Adam) -> Self {
        Self {
            optimizer,
            moving_average: MovingAverageState::default(),
        }
    }
}

/// Baseline vector for one sampled joint action. `ma_value` is the moving
/// average before the current batch.
pub fn baseline_values(
    kind: BaselineKind,
    logits: &DecoderLogits,
    joint: &JointAction,
    reward: &mut RewardEvaluator<'_>,
    ma_value: f64,
) -> Result<Vec<f64>> {
    kind.validate(logits.vocab_size())?;
    let n = logits.num_agents();
    match kind {
        BaselineKind::None => Ok(vec![0.0; n]),
        BaselineKind::MovingAverage { .. } => Ok(vec![ma_value; n]),
        BaselineKind::SelfCritical => self_critical_baseline(logits, reward),
        BaselineKind::Counterfactual { k } => counterfactual_baseline_from_policies(&logits.policies(), joint, reward, k),
    }
}

/// Parameter gradient of the surrogate loss for a fixed joint action and
/// fixed advantages. Parameters the pass does not touch get zeros.
pub fn surrogate_gradient(
    model: &Model,
    features: &ImageFeatures,
    joint: &JointAction,
    advantages: &[f64],
) -> Result<Gradients> {
    let mut g = Graph::new();
    let fwd = model.forward_na(&mut g, features)?;
    let loss = cmal_surrogate_loss(&mut g, fwd.logits, joint, advantages)?;
    let mut grads = model.params.zero_grads();
    grads.extend(g.backward(loss)?);
    Ok(grads)
}

fn accumulate(total: &mut Gradients, part: &Gradients, scale: f64) {
    for (name, g) in part {
        let t = total.get_mut(name).expect("same layout");
        let data: Vec<f64> = t.data().iter().zip(g.data()).map(|(a, b)| a + scale * b).collect();
        *t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
    }
}

fn mean_gradients(model: &Model, parts: &[Gradients]) -> Gradients {
    let mut total = model.params.zero_grads();
    let scale = 1.0 / parts.len() as f64;
    for p in parts {
        accumulate(&mut total, p, scale);
    }
    total
}

/// One supervised step on the mean per-image XE loss.
pub fn train_step_xe(model: &mut Model, batch: &[XeExample<'_>], optimizer: &mut Adam) -> Result<XeStepStats> {
    if batch.is_empty() {
        return invalid("empty batch");
    }
    let frozen: &Model = model;
    let per_image: Vec<Result<(f64, Gradients)>> = batch
        .par_iter()
        .map(|ex| {
            let mut g = Graph::new();
            let fwd = frozen.forward_na(&mut g, ex.features)?;
            let loss = xe_loss(&mut g, fwd.logits, ex.target)?;
            Ok((g.value(loss).item(), g.backward(loss)?))
        })
        .collect();
    let mut losses = Vec::with_capacity(batch.len());
    let mut grads = Vec::with_capacity(batch.len());
    for r in per_image {
        let (l, gr) = r?;
        losses.push(l);
        grads.push(gr);
    }
    let loss = losses.iter().sum::<f64>() / losses.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("XE loss {loss}")));
    }
    let grads = mean_gradients(model, &grads);
    let grad_norm = optimizer.step(&mut model.params, &grads)?;
    Ok(XeStepStats { loss, grad_norm })
}

/// One teacher-forced step of the autoregressive teacher. Each caption is
/// supervised up to and including its first period, appended if missing.
pub fn train_step_teacher(model: &mut Model, batch: &[XeExample<'_>], optimizer: &mut Adam) -> Result<XeStepStats> {
    if batch.is_empty() {
        return invalid("empty batch");
    }
    let frozen: &Model = model;
    let per_image: Vec<Result<(f64, Gradients)>> = batch
        .par_iter()
        .map(|ex| {
            let mut target: Vec<TokenId> = ex.target[..supervised_positions(ex.target)].to_vec();
            if target.last() != Some(&PERIOD) {
                target.push(PERIOD);
            }
            let mut inputs = vec![BOS];
            inputs.extend_from_slice(&target[..target.len() - 1]);
            let mut g = Graph::new();
            let logits = frozen.forward_teacher(&mut g, ex.features, &inputs)?;
            let loss = g.cross_entropy(logits, &target, &vec![1.0; target.len()])?;
            let mut grads = frozen.params.zero_grads();
            grads.extend(g.backward(loss)?);
            Ok((g.value(loss).item(), grads))
        })
        .collect();
    let mut losses = Vec::with_capacity(batch.len());
    let mut grads = Vec::with_capacity(batch.len());
    for r in per_image {
        let (l, gr) = r?;
        losses.push(l);
        grads.push(gr);
    }
    let loss = losses.iter().sum::<f64>() / losses.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("teacher loss {loss}")));
    }
    let grads = mean_gradients(model, &grads);
    let grad_norm = optimizer.step(&mut model.params, &grads)?;
    Ok(XeStepStats { loss, grad_norm })
}

struct SampleOutcome {
    loss: f64,
    reward: f64,
    mean_abs_advantage: f64,
    requests: usize,
    computed: usize,
    grads: Gradients,
}

fn cmal_sample(
    model: &Model,
    ex: &CmalExample<'_>,
    kind: BaselineKind,
    ma_value: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SampleOutcome> {
    let mut g = Graph::new();
    let fwd = model.forward_na(&mut g, ex.features)?;
    let logits = DecoderLogits::from_logits(g.value(fwd.logits).clone());
    let joint = sample_joint(&logits, rng)?;
    let mut eval = RewardEvaluator::new(ex.reward);
    let reward = eval.eval(joint.tokens());
    let baselines = baseline_values(kind, &logits, &joint, &mut eval, ma_value)?;
    let adv = advantages(reward, &baselines);
    let loss = cmal_surrogate_loss(&mut g, fwd.logits, &joint, &adv)?;
    Ok(SampleOutcome {
        loss: g.value(loss).item(),
        reward,
        mean_abs_advantage: adv.iter().map(|a| a.abs()).sum::<f64>() / adv.len() as f64,
        requests: eval.requests(),
        computed: eval.computed(),
        grads: g.backward(loss)?,
    })
}

/// One CMAL step: a single sampled joint action per image, baseline,
/// advantages, surrogate loss and an optimizer update. Image `i` samples
/// from a generator seeded by `(seed, i)`, so the step is reproducible.
pub fn train_step_cmal(
    model: &mut Model,
    batch: &[CmalExample<'_>],
    kind: BaselineKind,
    state: &mut CmalState,
    seed: u64,
) -> Result<CmalStepStats> {
    if batch.is_empty() {
        return invalid("empty batch");
    }
    kind.validate(model.config.vocab_size)?;
    let ma_value = state.moving_average.baseline();
    let frozen: &Model = model;
    let outcomes: Vec<Result<SampleOutcome>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            cmal_sample(frozen, ex, kind, ma_value, &mut rng)
        })
        .collect();
    let outcomes: Vec<SampleOutcome> = outcomes.into_iter().collect::<Result<_>>()?;
    let b = outcomes.len() as f64;
    let mean_reward = outcomes.iter().map(|o| o.reward).sum::<f64>() / b;
    if let BaselineKind::MovingAverage { decay } = kind {
        state.moving_average.update(mean_reward, decay);
    }
    let grads: Vec<Gradients> = outcomes.iter().map(|o| o.grads.clone()).collect();
    let grads = mean_gradients(model, &grads);
    let grad_norm = state.optimizer.step(&mut model.params, &grads)?;
    Ok(CmalStepStats {
        loss: outcomes.iter().map(|o| o.loss).sum::<f64>() / b,
        mean_reward,
        mean_abs_advantage: outcomes.iter().map(|o| o.mean_abs_advantage).sum::<f64>() / b,
        reward_evals: outcomes.iter().map(|o| o.requests).sum(),
        reward_computed: outcomes.iter().map(|o| o.computed).sum(),
        grad_norm,
    })
}

/// One line of a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: String,
    pub step: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub epoch: Option<usize>,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_reward: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub baseline: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reward_evals: Option<usize>,
    pub wall_time_s: f64,
    /// Hex sha256 of the run configuration that produced this record.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config_sha256: Option<String>,
}

/// Append-only JSON-lines log.
pub struct TrainingLog {
    out: BufWriter<File>,
}

impl TrainingLog {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }

    pub fn append(&mut self, record: &LogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}
