use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, StageConfig};
use crate::cmal::{
    pad_target, train_step_cmal, train_step_teacher, train_step_xe, Adam, CmalExample, CmalState, LogRecord,
    TrainingLog, XeExample,
};
use crate::error::{Error, Result};
use crate::metrics::{CiderCorpusStats, MetricKind, TeamReward};
use crate::model::{init_from_teacher, ImageFeatures, Model, TokenId};
use crate::synth::{distill, teacher_checksum, Dataset, DatasetRecord, PseudoCaptions, Split};

/// Stream tags keeping the random streams of different stages apart.
const TEACHER_TAG: u64 = 1;
const XE_TAG: u64 = 2;
const CMAL_TAG: u64 = 3;

/// Mixes a base seed with a tag and an index (splitmix64 finalizer).
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// File layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.jsonl")
    }

    pub fn teacher(&self) -> PathBuf {
        self.root.join("teacher.ckpt")
    }

    pub fn pseudo_captions(&self) -> PathBuf {
        self.root.join("pseudo.jsonl")
    }

    pub fn xe(&self) -> PathBuf {
        self.root.join("xe.ckpt")
    }

    pub fn cmal(&self) -> PathBuf {
        self.root.join("cmal.ckpt")
    }

    pub fn state(&self, stage: &str) -> PathBuf {
        self.root.join(format!("{stage}.state.json"))
    }

    pub fn log(&self, stage: &str) -> PathBuf {
        self.root.join(format!("{stage}.log.jsonl"))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join(format!("{name}.json"))
    }

    /// Takes the directory lock, creating the directory if needed. A second
    /// lock on the same directory fails until the first guard is dropped.
    pub fn lock(&self) -> Result<RunLock> {
        fs::create_dir_all(&self.root)?;
        let path = self.root.join(".lock");
        let mut file = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::InvalidArgument(format!(
                    "{} is in use by another run (remove {} if that run is gone)",
                    self.root.display(),
                    path.display()
                ))
            } else {
                e.into()
            }
        })?;
        writeln!(file, "{}", std::process::id())?;
        Ok(RunLock { path })
    }
}

/// Removes the lock file on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Optimizer progress of one stage, enough to resume at an epoch boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub stage: String,
    pub epochs_done: usize,
    pub optimizer: CmalState,
}

impl TrainState {
    pub fn new(stage: &str, config: &StageConfig) -> Result<Self> {
        Ok(Self {
            stage: stage.to_string(),
            epochs_done: 0,
            optimizer: CmalState::new(Adam::new(config.adam())?),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        serde_json::to_writer(File::create(&tmp)?, self)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(File::open(path)?)?)
    }
}

/// Where a stage writes its step records.
pub struct StageLog<'a> {
    pub log: &'a mut TrainingLog,
    pub config_sha256: String,
}

/// Per-epoch mean losses and the final optimizer state.
#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub epoch_losses: Vec<f64>,
    /// Mean sampled reward per epoch; empty for supervised stages.
    pub epoch_rewards: Vec<f64>,
    pub state: TrainState,
}

struct StepResult {
    loss: f64,
    mean_reward: Option<f64>,
    reward_evals: Option<usize>,
}

/// Shared epoch loop: per-epoch shuffles and per-step seeds derive from
/// `(seed, tag, epoch)`, so resuming after any epoch repeats exactly the
/// steps an uninterrupted run would take.
#[allow(clippy::too_many_arguments)]
fn run_epochs<F>(
    model: &mut Model,
    config: &StageConfig,
    seed: u64,
    tag: u64,
    num_examples: usize,
    mut state: TrainState,
    mut log: Option<StageLog<'_>>,
    baseline_name: Option<&str>,
    mut step: F,
) -> Result<StageOutcome>
where
    F: FnMut(&mut Model, &[usize], &mut CmalState, u64) -> Result<StepResult>,
{
    if num_examples == 0 {
        return Err(Error::InvalidArgument(format!("stage {} has no training examples", state.stage)));
    }
    let start = Instant::now();
    let mut epoch_losses = Vec::new();
    let mut epoch_rewards = Vec::new();
    for epoch in state.epochs_done + 1..=config.epochs {
        let lr = config.schedule.lr(epoch);
        state.optimizer.optimizer.set_lr(lr);
        let mut order: Vec<usize> = (0..num_examples).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, epoch as u64)));
        let (mut total, mut reward, mut count) = (0.0, 0.0, 0usize);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let step_seed = derive_seed(seed, tag ^ 0xc3a1, ((epoch as u64) << 32) | b as u64);
            let r = step(model, batch, &mut state.optimizer, step_seed)?;
            total += r.loss * batch.len() as f64;
            reward += r.mean_reward.unwrap_or(0.0) * batch.len() as f64;
            count += batch.len();
            if let Some(l) = log.as_mut() {
                l.log.append(&LogRecord {
                    stage: state.stage.clone(),
                    step: state.optimizer.optimizer.steps(),
                    epoch: Some(epoch),
                    loss: r.loss,
                    lr: Some(lr),
                    mean_reward: r.mean_reward,
                    baseline: baseline_name.map(str::to_string),
                    reward_evals: r.reward_evals,
                    wall_time_s: start.elapsed().as_secs_f64(),
                    config_sha256: Some(l.config_sha256.clone()),
                })?;
            }
        }
        epoch_losses.push(total / count as f64);
        if baseline_name.is_some() {
            epoch_rewards.push(reward / count as f64);
        }
        state.epochs_done = epoch;
    }
    Ok(StageOutcome {
        epoch_losses,
        epoch_rewards,
        state,
    })
}

fn records_of(ds: &Dataset, split: Split) -> Vec<&DatasetRecord> {
    ds.split(split)
}

/// Teacher-forced training of the autoregressive teacher on every
/// (training image, reference) pair.
pub fn train_teacher(
    cfg: &RunConfig,
    ds: &Dataset,
    resume: Option<(Model, TrainState)>,
    log: Option<StageLog<'_>>,
) -> Result<(Model, StageOutcome)> {
    let pairs: Vec<(&ImageFeatures, &[TokenId])> = records_of(ds, Split::Train)
        .into_iter()
        .flat_map(|r| r.references.iter().map(move |c| (&r.image, c.as_slice())))
        .collect();
    let (mut model, state) = match resume {
        Some(x) => x,
        None => (
            Model::init(cfg.model.clone(), derive_seed(cfg.seed, TEACHER_TAG, u64::MAX))?,
            TrainState::new("teacher", &cfg.teacher)?,
        ),
    };
    let outcome = run_epochs(
        &mut model,
        &cfg.teacher,
        cfg.seed,
        TEACHER_TAG,
        pairs.len(),
        state,
        log,
        None,
        |m, idx, st, _| {
            let batch: Vec<XeExample> = idx
                .iter()
                .map(|&i| XeExample {
                    features: pairs[i].0,
                    target: pairs[i].1,
                })
                .collect();
            let s = train_step_teacher(m, &batch, &mut st.optimizer)?;
            Ok(StepResult {
                loss: s.loss,
                mean_reward: None,
                reward_evals: None,
            })
        },
    )?;
    Ok((model, outcome))
}

/// Pseudo-captions for every training and unlabeled image. Validation and
/// test images are never shown to the teacher here.
pub fn distill_dataset(cfg: &RunConfig, ds: &Dataset, teacher: &Model) -> Result<PseudoCaptions> {
    if teacher.config.feature_dim != ds.grammar.feature_dim || teacher.config.max_regions < ds.grammar.num_regions {
        return Err(Error::Config("teacher input does not match the dataset features".into()));
    }
    let images: Vec<(String, &ImageFeatures)> = ds
        .records
        .iter()
        .filter(|r| matches!(r.split, Split::Train | Split::Unlabeled))
        .map(|r| (r.id.clone(), &r.image))
        .collect();
    distill(teacher, &images, cfg.decode.beam_width, cfg.model.num_agents)
}

/// One XE training image with its candidate targets, padded to
/// `num_agents`. Each epoch visits the image once with one of them.
pub type XeItem<'a> = (&'a ImageFeatures, Vec<Vec<TokenId>>);

/// XE training set. With distillation the target is the pseudo-caption of
/// each training image (plus unlabeled images when enabled); otherwise the
/// real references of each training image. Pseudo-captions for validation
/// or test images are a data-flow error.
pub fn xe_training_set<'a>(cfg: &RunConfig, ds: &'a Dataset, pseudo: Option<&PseudoCaptions>) -> Result<Vec<XeItem<'a>>> {
    let n = cfg.model.num_agents;
    if !cfg.xe.distill {
        let mut out = Vec::new();
        for r in records_of(ds, Split::Train) {
            let targets = r.references.iter().map(|c| pad_target(c, n)).collect::<Result<_>>()?;
            out.push((&r.image, targets));
        }
        return Ok(out);
    }
    let pseudo = pseudo.ok_or_else(|| Error::DataFlow("distillation enabled but no pseudo-captions given".into()))?;
    let by_id: std::collections::HashMap<&str, &DatasetRecord> =
        ds.records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut captions = std::collections::HashMap::new();
    for (id, caption) in &pseudo.captions {
        let rec = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::DataFlow(format!("pseudo-caption for unknown image {id}")))?;
        if matches!(rec.split, Split::Val | Split::Test) {
            return Err(Error::DataFlow(format!(
                "pseudo-caption for {} image {id}; held-out images cannot be training targets",
                rec.split.name()
            )));
        }
        captions.insert(id.as_str(), caption);
    }
    let mut out = Vec::new();
    for r in &ds.records {
        let wanted = r.split == Split::Train || (cfg.xe.unlabeled && r.split == Split::Unlabeled);
        if !wanted {
            continue;
        }
        let c = captions
            .get(r.id.as_str())
            .ok_or_else(|| Error::DataFlow(format!("no pseudo-caption for image {}", r.id)))?;
        out.push((&r.image, vec![pad_target(c, n)?]));
    }
    Ok(out)
}

/// Student pretraining with the XE loss. `teacher` is needed for
/// weight-init, and must then be the model that produced `pseudo`.
pub fn train_xe(
    cfg: &RunConfig,
    ds: &Dataset,
    pseudo: Option<&PseudoCaptions>,
    teacher: Option<&Model>,
    resume: Option<(Model, TrainState)>,
    log: Option<StageLog<'_>>,
) -> Result<(Model, StageOutcome)> {
    let examples = xe_training_set(cfg, ds, pseudo)?;
    let (mut model, state) = match resume {
        Some(x) => x,
        None => {
            let model = if cfg.xe.weight_init {
                let teacher =
                    teacher.ok_or_else(|| Error::Config("weight_init requires the teacher checkpoint".into()))?;
                if let Some(p) = pseudo.filter(|_| cfg.xe.distill) {
                    if p.teacher_sha256 != teacher_checksum(teacher) {
                        return Err(Error::DataFlow(
                            "pseudo-captions were produced by a different teacher checkpoint".into(),
                        ));
                    }
                }
                init_from_teacher(teacher, &cfg.model)?
            } else {
                Model::init(cfg.model.clone(), derive_seed(cfg.seed, XE_TAG, u64::MAX))?
            };
            (model, TrainState::new("xe", &cfg.xe.stage)?)
        }
    };
    let outcome = run_epochs(
        &mut model,
        &cfg.xe.stage,
        cfg.seed,
        XE_TAG,
        examples.len(),
        state,
        log,
        None,
        |m, idx, st, step_seed| {
            let batch: Vec<XeExample> = idx
                .iter()
                .map(|&i| {
                    let (features, targets) = &examples[i];
                    let pick = derive_seed(step_seed, i as u64, 0) % targets.len() as u64;
                    XeExample {
                        features,
                        target: &targets[pick as usize],
                    }
                })
                .collect();
            let s = train_step_xe(m, &batch, &mut st.optimizer)?;
            Ok(StepResult {
                loss: s.loss,
                mean_reward: None,
                reward_evals: None,
            })
        },
    )?;
    Ok((model, outcome))
}

/// CMAL training data: labeled training images with their real references
/// and the CIDEr-D statistics of those references.
pub struct CmalData<'a> {
    pub records: Vec<&'a DatasetRecord>,
    pub stats: CiderCorpusStats,
}

impl<'a> CmalData<'a> {
    pub fn new(ds: &'a Dataset) -> Result<Self> {
        let records = records_of(ds, Split::Train);
        if let Some(r) = records.iter().find(|r| r.references.is_empty()) {
            return Err(Error::DataFlow(format!("training image {} has no real references", r.id)));
        }
        let corpus: Vec<Vec<Vec<TokenId>>> = records.iter().map(|r| r.references.clone()).collect();
        Ok(Self {
            stats: CiderCorpusStats::build(&corpus)?,
            records,
        })
    }

    pub fn rewards(&self) -> Result<Vec<TeamReward<'_>>> {
        self.records
            .iter()
            .map(|r| TeamReward::new(&r.references, &self.stats, MetricKind::CiderD))
            .collect()
    }
}

/// Policy-gradient fine-tuning of an XE-pretrained student on the CIDEr-D
/// team reward.
pub fn train_cmal(
    cfg: &RunConfig,
    ds: &Dataset,
    init: Model,
    resume: Option<TrainState>,
    log: Option<StageLog<'_>>,
) -> Result<(Model, StageOutcome)> {
    let data = CmalData::new(ds)?;
    let rewards = data.rewards()?;
    let mut model = init;
    let state = match resume {
        Some(s) => s,
        None => TrainState::new("cmal", &cfg.cmal.stage)?,
    };
    let kind = cfg.cmal.baseline;
    let outcome = run_epochs(
        &mut model,
        &cfg.cmal.stage,
        cfg.seed,
        CMAL_TAG,
        data.records.len(),
        state,
        log,
        Some(kind.name()),
        |m, idx, st, step_seed| {
            let batch: Vec<CmalExample> = idx
                .iter()
                .map(|&i| CmalExample {
                    features: &data.records[i].image,
                    reward: &rewards[i],
                })
                .collect();
            let s = train_step_cmal(m, &batch, kind, st, step_seed)?;
            Ok(StepResult {
                loss: s.loss,
                mean_reward: Some(s.mean_reward),
                reward_evals: Some(s.reward_evals),
            })
        },
    )?;
    Ok((model, outcome))
}
