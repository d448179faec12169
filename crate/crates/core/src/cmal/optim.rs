use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tensor, TensorMap};
use crate::error::{invalid, Result};
use crate::model::Parameters;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return invalid(format!("learning rate {} must be finite and >= 0", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return invalid("Adam betas must lie in [0, 1) and eps must be positive");
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return invalid(format!("clip norm {c} must be positive"));
            }
        }
        Ok(())
    }
}

/// Euclidean norm over every gradient entry.
pub fn global_norm(grads: &Gradients) -> f64 {
    grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            *g = g.map(|x| x * s);
        }
    }
    norm
}

/// Adam moment estimates. Serializable so that training can resume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Adam {
    pub config: AdamConfig,
    m: TensorMap,
    v: TensorMap,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            m: TensorMap::new(),
            v: TensorMap::new(),
            t: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One update. Returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut Parameters, grads: &Gradients) -> Result<f64> {
        let mut grads = grads.clone();
        let norm = match self.config.clip_norm {
            Some(c) => clip_grad_norm(&mut grads, c),
            None => global_norm(&grads),
        };
        if !norm.is_finite() {
            return Err(crate::Error::Diverged(format!("gradient norm {norm}")));
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        params.update(&grads, |name, p, g| {
            let m = m_all.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = v_all.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
            let mut m_new = Vec::with_capacity(p.numel());
            let mut v_new = Vec::with_capacity(p.numel());
            let mut out = Vec::with_capacity(p.numel());
            for i in 0..p.numel() {
                let gi = g.data()[i];
                let mi = c.beta1 * m.data()[i] + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v.data()[i] + (1.0 - c.beta2) * gi * gi;
                let step = c.lr * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                out.push(p.data()[i] - step);
                m_new.push(mi);
                v_new.push(vi);
            }
            *m = Tensor::new(p.shape().to_vec(), m_new).expect("same shape");
            *v = Tensor::new(p.shape().to_vec(), v_new).expect("same shape");
            Tensor::new(p.shape().to_vec(), out).expect("same shape")
        });
        Ok(norm)
    }
}
