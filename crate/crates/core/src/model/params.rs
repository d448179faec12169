use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::autodiff::{Gradients, Tensor, TensorMap};
use crate::error::{Error, Result};

/// Named parameter tensors. Shapes are a pure function of [`ModelConfig`];
/// nothing depends on the number of agents, so every target position shares
/// the same weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    tensors: TensorMap,
}

fn push_linear(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, fan_in: usize, fan_out: usize) {
    out.push((format!("{prefix}.w"), vec![fan_in, fan_out]));
    out.push((format!("{prefix}.b"), vec![fan_out]));
}

fn push_norm(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, dim: usize) {
    out.push((format!("{prefix}.g"), vec![dim]));
    out.push((format!("{prefix}.b"), vec![dim]));
}

fn push_attention(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, dim: usize) {
    for proj in ["q", "k", "v", "o"] {
        push_linear(out, &format!("{prefix}.{proj}"), dim, dim);
    }
}

/// Every parameter name with its shape, in a fixed order.
pub fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.model_dim;
    let mut out = Vec::new();
    push_linear(&mut out, "feat", config.feature_dim, d);
    for l in 0..config.num_layers {
        let p = format!("enc.{l}");
        push_attention(&mut out, &format!("{p}.self"), d);
        push_norm(&mut out, &format!("{p}.ln1"), d);
        push_linear(&mut out, &format!("{p}.ffn1"), d, config.ffn_dim);
        push_linear(&mut out, &format!("{p}.ffn2"), config.ffn_dim, d);
        push_norm(&mut out, &format!("{p}.ln2"), d);
    }
    out.push(("embed".to_string(), vec![config.vocab_size, d]));
    for l in 0..config.num_layers {
        let p = format!("dec.{l}");
        push_attention(&mut out, &format!("{p}.self"), d);
        push_norm(&mut out, &format!("{p}.ln1"), d);
        push_attention(&mut out, &format!("{p}.cross"), d);
        push_norm(&mut out, &format!("{p}.ln2"), d);
        push_linear(&mut out, &format!("{p}.ffn1"), d, config.ffn_dim);
        push_linear(&mut out, &format!("{p}.ffn2"), config.ffn_dim, d);
        push_norm(&mut out, &format!("{p}.ln3"), d);
    }
    push_linear(&mut out, "out", d, config.vocab_size);
    out
}

impl Parameters {
    /// Seeded initialisation: uniform Xavier for weight matrices, variance
    /// `1/d` uniform for the token embedding, unit gains and zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = TensorMap::new();
        for (name, shape) in layout(config) {
            let t = if name.ends_with(".g") {
                Tensor::full(&shape, 1.0)
            } else if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else {
                let limit = if name == "embed" {
                    (3.0 / config.model_dim as f64).sqrt()
                } else {
                    (6.0 / (shape[0] + shape[1]) as f64).sqrt()
                };
                Tensor::from_fn(shape[0], shape[1], |_, _| rng.gen_range(-limit..limit))
            };
            tensors.insert(name, t);
        }
        Self { tensors }
    }

    /// Validates a tensor map against the layout of `config`.
    pub fn from_map(config: &ModelConfig, tensors: TensorMap) -> Result<Self> {
        let expected = layout(config);
        if expected.len() != tensors.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (name, shape) in &expected {
            match tensors.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Config(format!(
                        "parameter {name}: expected shape {shape:?}, found {:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Config(format!("missing parameter {name}"))),
            }
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[name]
    }

    pub fn tensors(&self) -> &TensorMap {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn replace(&mut self, name: &str, t: Tensor) -> Result<()> {
        match self.tensors.get(name) {
            Some(old) if old.shape() == t.shape() => {
                self.tensors.insert(name.to_string(), t);
                Ok(())
            }
            Some(old) => Err(Error::Config(format!(
                "parameter {name}: shape {:?} cannot replace {:?}",
                t.shape(),
                old.shape()
            ))),
            None => Err(Error::Config(format!("unknown parameter {name}"))),
        }
    }

    /// Applies `f(name, param, grad) -> new_param` to every tensor.
    pub fn update(&mut self, grads: &Gradients, mut f: impl FnMut(&str, &Tensor, &Tensor) -> Tensor) {
        let names: Vec<String> = self.tensors.keys().cloned().collect();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let new = f(&name, &self.tensors[&name], g);
            self.tensors.insert(name, new);
        }
    }

    /// Zero gradients matching this layout.
    pub fn zero_grads(&self) -> Gradients {
        self.tensors
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect::<BTreeMap<_, _>>()
    }
}
