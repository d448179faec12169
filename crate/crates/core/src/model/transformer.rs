//! Graph construction for the encoder and the two decoder modes.

use std::collections::HashMap;

use super::{ModelConfig, Parameters};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::Result;

/// Large negative score used for masked attention entries.
const MASKED: f64 = -1e9;

/// Sinusoidal encodings for positions `1..=n`.
pub fn positional_encoding(n: usize, dim: usize) -> Tensor {
    Tensor::from_fn(n, dim, |i, j| {
        let pos = (i + 1) as f64;
        let rate = 10000f64.powf((2 * (j / 2)) as f64 / dim as f64);
        if j % 2 == 0 {
            (pos / rate).sin()
        } else {
            (pos / rate).cos()
        }
    })
}

fn causal_mask(n: usize) -> Tensor {
    Tensor::from_fn(n, n, |i, j| if j > i { MASKED } else { 0.0 })
}

/// What the decoder stack is fed.
#[derive(Clone, Copy, Debug)]
pub enum DecoderInput<'a> {
    /// One sinusoidal encoding per agent; no token information.
    Positions(usize),
    /// Scaled token embeddings plus positional encodings (teacher forcing).
    Tokens(&'a [usize]),
}

/// Builds Transformer sub-graphs against one parameter set, registering each
/// parameter at most once per graph.
pub struct Builder<'a> {
    pub graph: &'a mut Graph,
    params: &'a Parameters,
    config: &'a ModelConfig,
    registered: HashMap<String, Var>,
}

impl<'a> Builder<'a> {
    pub fn new(graph: &'a mut Graph, params: &'a Parameters, config: &'a ModelConfig) -> Self {
        Self {
            graph,
            params,
            config,
            registered: HashMap::new(),
        }
    }

    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.registered.get(name) {
            return v;
        }
        let v = self.graph.param(name, self.params.get(name));
        self.registered.insert(name.to_string(), v);
        v
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"));
        let b = self.param(&format!("{prefix}.b"));
        let y = self.graph.matmul(x, w)?;
        self.graph.add(y, b)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.g"));
        let b = self.param(&format!("{prefix}.b"));
        self.graph.layer_norm(x, g, b)
    }

    fn attention(&mut self, queries: Var, keys: Var, prefix: &str, mask: Option<Var>) -> Result<Var> {
        let q = self.linear(queries, &format!("{prefix}.q"))?;
        let k = self.linear(keys, &format!("{prefix}.k"))?;
        let v = self.linear(keys, &format!("{prefix}.v"))?;
        let heads = self.config.num_heads;
        let head_dim = self.config.model_dim / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.graph.slice(q, 1, h * head_dim, head_dim)?;
            let kh = self.graph.slice(k, 1, h * head_dim, head_dim)?;
            let vh = self.graph.slice(v, 1, h * head_dim, head_dim)?;
            let scores = self.graph.matmul_nt(qh, kh)?;
            let mut scores = self.graph.scale(scores, scale);
            if let Some(m) = mask {
                scores = self.graph.add(scores, m)?;
            }
            let probs = self.graph.softmax(scores)?;
            outs.push(self.graph.matmul(probs, vh)?);
        }
        let joined = if heads == 1 { outs[0] } else { self.graph.concat(&outs, 1)? };
        self.linear(joined, &format!("{prefix}.o"))
    }

    fn feed_forward(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.ffn1"))?;
        let h = self.graph.gelu(h);
        self.linear(h, &format!("{prefix}.ffn2"))
    }

    /// Encoder over region features. Regions carry no positional encoding,
    /// so the output is permutation-equivariant in the region order.
    pub fn encode(&mut self, features: &Tensor) -> Result<Var> {
        let x = self.graph.constant(features.clone());
        let mut h = self.linear(x, "feat")?;
        for l in 0..self.config.num_layers {
            let p = format!("enc.{l}");
            let a = self.attention(h, h, &format!("{p}.self"), None)?;
            let r = self.graph.add(h, a)?;
            h = self.norm(r, &format!("{p}.ln1"))?;
            let f = self.feed_forward(h, &p)?;
            let r = self.graph.add(h, f)?;
            h = self.norm(r, &format!("{p}.ln2"))?;
        }
        Ok(h)
    }

    pub fn decoder_input(&mut self, input: DecoderInput<'_>) -> Result<Var> {
        let d = self.config.model_dim;
        match input {
            DecoderInput::Positions(n) => Ok(self.graph.constant(positional_encoding(n, d))),
            DecoderInput::Tokens(tokens) => {
                let table = self.param("embed");
                let e = self.graph.gather(table, tokens)?;
                let e = self.graph.scale(e, (d as f64).sqrt());
                let pe = self.graph.constant(positional_encoding(tokens.len(), d));
                self.graph.add(e, pe)
            }
        }
    }

    /// Decoder stack; returns the final hidden states (one row per position).
    pub fn decode(&mut self, context: Var, input: Var, causal: bool) -> Result<Var> {
        let n = self.graph.value(input).shape()[0];
        let mask = causal.then(|| self.graph.constant(causal_mask(n)));
        let mut h = input;
        for l in 0..self.config.num_layers {
            let p = format!("dec.{l}");
            let a = self.attention(h, h, &format!("{p}.self"), mask)?;
            let r = self.graph.add(h, a)?;
            h = self.norm(r, &format!("{p}.ln1"))?;
            let c = self.attention(h, context, &format!("{p}.cross"), None)?;
            let r = self.graph.add(h, c)?;
            h = self.norm(r, &format!("{p}.ln2"))?;
            let f = self.feed_forward(h, &p)?;
            let r = self.graph.add(h, f)?;
            h = self.norm(r, &format!("{p}.ln3"))?;
        }
        Ok(h)
    }

    pub fn project(&mut self, states: Var) -> Result<Var> {
        self.linear(states, "out")
    }
}
