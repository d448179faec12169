use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cmal::{AdamConfig, BaselineKind};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synth::{GrammarConfig, SplitSizes};

/// Per-epoch learning rate: linear warm-up over `warmup_epochs`, then a
/// factor of `decay` every `decay_every` epochs once `decay_after` epochs
/// have passed. Epochs count from 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_epochs: usize,
    pub decay: f64,
    pub decay_every: usize,
    pub decay_after: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self::constant(1e-3)
    }
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            base: lr,
            warmup_epochs: 0,
            decay: 1.0,
            decay_every: 0,
            decay_after: 0,
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        let epoch = epoch.max(1);
        let warm = if self.warmup_epochs > 0 {
            (epoch as f64 / self.warmup_epochs as f64).min(1.0)
        } else {
            1.0
        };
        let decays = if self.decay_every > 0 && epoch > self.decay_after {
            (epoch - self.decay_after - 1) / self.decay_every + 1
        } else {
            0
        };
        self.base * warm * self.decay.powi(decays as i32)
    }

    pub fn validate(&self, stage: &str) -> Result<()> {
        if !(self.base >= 0.0 && self.base.is_finite()) {
            return Err(Error::Config(format!("{stage}: learning rate must be finite and >= 0")));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("{stage}: decay must lie in (0, 1]")));
        }
        Ok(())
    }
}

/// Settings shared by every training stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub clip_norm: Option<f64>,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 50,
            schedule: LrSchedule::default(),
            clip_norm: Some(5.0),
        }
    }
}

impl StageConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.schedule.lr(1),
            clip_norm: self.clip_norm,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self, stage: &str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{stage}: batch_size must be >= 1")));
        }
        self.schedule.validate(stage)?;
        self.adam().validate().map_err(|e| Error::Config(format!("{stage}: {e}")))
    }
}

/// Student pretraining with the per-position cross-entropy loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct XeConfig {
    pub stage: StageConfig,
    /// Train on teacher pseudo-captions instead of the real references.
    pub distill: bool,
    /// Add unlabeled images (with pseudo-captions) to the training set.
    pub unlabeled: bool,
    /// Start from the teacher's weights.
    pub weight_init: bool,
}

impl Default for XeConfig {
    fn default() -> Self {
        Self {
            stage: StageConfig {
                epochs: 30,
                batch_size: 50,
                schedule: LrSchedule {
                    base: 2e-3,
                    warmup_epochs: 3,
                    decay: 0.5,
                    decay_every: 8,
                    decay_after: 15,
                },
                clip_norm: Some(5.0),
            },
            distill: true,
            unlabeled: true,
            weight_init: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CmalConfig {
    pub stage: StageConfig,
    pub baseline: BaselineKind,
}

impl Default for CmalConfig {
    fn default() -> Self {
        Self {
            stage: StageConfig {
                epochs: 60,
                batch_size: 50,
                schedule: LrSchedule {
                    base: 1e-3,
                    warmup_epochs: 0,
                    decay: 0.8,
                    decay_every: 20,
                    decay_after: 20,
                },
                clip_norm: Some(5.0),
            },
            baseline: BaselineKind::Counterfactual { k: 2 },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    /// Beam width of the autoregressive teacher, for distillation and
    /// evaluation.
    pub beam_width: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { beam_width: 3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Test images timed; 0 means the whole test split.
    pub num_images: usize,
    /// Untimed runs per decoder before measuring.
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            num_images: 0,
            warmup: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Run directory holding data, checkpoints, logs and reports.
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs/default"),
        }
    }
}

/// Everything a run depends on. Every command is reproducible from this
/// and the seed it contains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub grammar: GrammarConfig,
    pub data: SplitSizes,
    pub teacher: StageConfig,
    pub xe: XeConfig,
    pub cmal: CmalConfig,
    pub decode: DecodeConfig,
    pub bench: BenchConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig {
                num_layers: 2,
                model_dim: 32,
                num_heads: 4,
                ffn_dim: 64,
                ..ModelConfig::default()
            },
            grammar: GrammarConfig::default(),
            data: SplitSizes::default(),
            teacher: StageConfig {
                epochs: 10,
                batch_size: 50,
                schedule: LrSchedule {
                    base: 2e-3,
                    warmup_epochs: 1,
                    decay: 0.5,
                    decay_every: 3,
                    decay_after: 4,
                },
                clip_norm: Some(5.0),
            },
            xe: XeConfig::default(),
            cmal: CmalConfig::default(),
            decode: DecodeConfig::default(),
            bench: BenchConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.grammar.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.grammar.max_len > self.model.num_agents {
            return Err(Error::Config(format!(
                "references of up to {} tokens do not fit {} agents",
                self.grammar.max_len, self.model.num_agents
            )));
        }
        if self.grammar.num_regions > self.model.max_regions || self.grammar.feature_dim != self.model.feature_dim {
            return Err(Error::Config("grammar features do not match the model input".into()));
        }
        self.teacher.validate("teacher")?;
        self.xe.stage.validate("xe")?;
        self.cmal.stage.validate("cmal")?;
        self.cmal
            .baseline
            .validate(self.model.vocab_size)
            .map_err(|e| Error::Config(format!("cmal: {e}")))?;
        if self.xe.unlabeled && !self.xe.distill {
            return Err(Error::Config("unlabeled images need pseudo-captions: set xe.distill".into()));
        }
        if self.decode.beam_width == 0 {
            return Err(Error::Config("beam_width must be >= 1".into()));
        }
        if self.data.train == 0 {
            return Err(Error::Config("at least one training image is required".into()));
        }
        Ok(())
    }

    /// Hex sha256 of the canonical JSON form.
    pub fn checksum(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}
