//! Transformer captioner with an autoregressive (teacher) and a
//! non-autoregressive (student) decoding mode over one parameter layout.

mod checkpoint;
mod decode;
mod params;
pub mod transformer;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
    DecodingMode, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use decode::{greedy_joint, sample_joint, truncate_at_period, Hypothesis};
pub use params::{layout, Parameters};

use crate::autodiff::{kernels, Graph, Tensor, Var};
use crate::error::{invalid, shape_err, Error, Result};
use transformer::{Builder, DecoderInput};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const PERIOD: TokenId = 1;
pub const BOS: TokenId = 2;
pub const UNK: TokenId = 3;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    /// Number of agents, i.e. non-autoregressive target positions.
    pub num_agents: usize,
    pub max_regions: usize,
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            model_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            vocab_size: 59,
            num_agents: 16,
            max_regions: 4,
            feature_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return fail(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.num_agents == 0 {
            return fail("num_agents must be >= 1".into());
        }
        if self.vocab_size < 4 {
            return fail(format!("vocab_size {} < 4 (pad, period, bos, unk)", self.vocab_size));
        }
        if self.num_layers == 0 || self.ffn_dim == 0 || self.feature_dim == 0 || self.max_regions == 0 {
            return fail("layer count and dimensions must be positive".into());
        }
        Ok(())
    }
}

/// Region feature matrix standing in for CNN output.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures(Tensor);

impl ImageFeatures {
    pub fn new(regions: Tensor) -> Result<Self> {
        if regions.shape().len() != 2 || regions.shape()[0] == 0 {
            return shape_err("image_features", format!("need >= 1 region, got {:?}", regions.shape()));
        }
        if !regions.is_finite() {
            return invalid("image features must be finite");
        }
        Ok(Self(regions))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn num_regions(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.0.shape()[1]
    }
}

/// Per-agent output of one non-autoregressive decoder pass.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLogits {
    /// `N × |U|`
    pub logits: Tensor,
    /// Final decoder hidden states, `N × model_dim`.
    pub agent_states: Tensor,
}

impl DecoderLogits {
    pub fn from_logits(logits: Tensor) -> Self {
        let n = logits.rows();
        Self {
            logits,
            agent_states: Tensor::zeros(&[n, 0]),
        }
    }

    pub fn num_agents(&self) -> usize {
        self.logits.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.logits.cols()
    }

    /// Softmax policy of every agent.
    pub fn policies(&self) -> Vec<Vec<f64>> {
        (0..self.num_agents())
            .map(|a| {
                let mut p = vec![0.0; self.vocab_size()];
                kernels::softmax_row(self.logits.row(a), &mut p);
                p
            })
            .collect()
    }

    pub fn log_policy(&self, agent: usize) -> Vec<f64> {
        let row = self.logits.row(agent);
        let lse = kernels::log_sum_exp(row);
        row.iter().map(|v| v - lse).collect()
    }
}

/// One token per agent.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct JointAction(Vec<TokenId>);

impl JointAction {
    pub fn new(tokens: Vec<TokenId>, vocab_size: usize) -> Result<Self> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab_size) {
            return invalid(format!("token {bad} >= vocab size {vocab_size}"));
        }
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Copy with agent `agent` switched to `token`.
    pub fn with_replacement(&self, agent: usize, token: TokenId) -> Self {
        let mut t = self.0.clone();
        t[agent] = token;
        Self(t)
    }
}

/// Graph handles of a non-autoregressive forward pass.
#[derive(Clone, Copy, Debug)]
pub struct NaForward {
    pub logits: Var,
    pub states: Var,
}

/// Parameters plus configuration, with a counter of decoder-stack
/// invocations for cost accounting.
#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Parameters,
    decoder_calls: AtomicUsize,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            decoder_calls: AtomicUsize::new(0),
        }
    }
}

impl Model {
    pub fn new(config: ModelConfig, params: Parameters) -> Result<Self> {
        config.validate()?;
        let params = Parameters::from_map(&config, params.tensors().clone())?;
        Ok(Self {
            config,
            params,
            decoder_calls: AtomicUsize::new(0),
        })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Parameters::init(&config, seed);
        Ok(Self {
            config,
            params,
            decoder_calls: AtomicUsize::new(0),
        })
    }

    pub fn decoder_calls(&self) -> usize {
        self.decoder_calls.load(Ordering::Relaxed)
    }

    pub fn reset_decoder_calls(&self) {
        self.decoder_calls.store(0, Ordering::Relaxed);
    }

    fn count_decoder_call(&self) {
        self.decoder_calls.fetch_add(1, Ordering::Relaxed);
    }

    pub fn builder<'a>(&'a self, graph: &'a mut Graph) -> Builder<'a> {
        Builder::new(graph, &self.params, &self.config)
    }

    fn check_features(&self, feat: &ImageFeatures) -> Result<()> {
        if feat.feature_dim() != self.config.feature_dim {
            return shape_err(
                "encode",
                format!("feature dim {} != model feature dim {}", feat.feature_dim(), self.config.feature_dim),
            );
        }
        if feat.num_regions() > self.config.max_regions {
            return shape_err(
                "encode",
                format!("{} regions > max_regions {}", feat.num_regions(), self.config.max_regions),
            );
        }
        Ok(())
    }

    /// Visual context, `num_regions × model_dim`.
    pub fn encode(&self, feat: &ImageFeatures) -> Result<Tensor> {
        self.check_features(feat)?;
        let mut g = Graph::new();
        let ctx = self.builder(&mut g).encode(feat.tensor())?;
        Ok(g.value(ctx).clone())
    }

    fn check_context(&self, context: &Tensor) -> Result<()> {
        if context.shape().len() != 2 || context.shape()[1] != self.config.model_dim || context.shape()[0] == 0 {
            return shape_err(
                "decode",
                format!("context {:?} incompatible with model_dim {}", context.shape(), self.config.model_dim),
            );
        }
        Ok(())
    }

    /// Encoder plus one parallel decoder pass, recorded on `graph` for training.
    pub fn forward_na(&self, graph: &mut Graph, feat: &ImageFeatures) -> Result<NaForward> {
        self.check_features(feat)?;
        let mut b = self.builder(graph);
        let ctx = b.encode(feat.tensor())?;
        let input = b.decoder_input(DecoderInput::Positions(self.config.num_agents))?;
        let states = b.decode(ctx, input, false)?;
        let logits = b.project(states)?;
        self.count_decoder_call();
        Ok(NaForward { logits, states })
    }

    /// Teacher-forced autoregressive pass: `inputs` are `[BOS, y_1, .., y_{T-1}]`,
    /// the returned logits row `t` predicts `y_{t+1}`.
    pub fn forward_teacher(&self, graph: &mut Graph, feat: &ImageFeatures, inputs: &[TokenId]) -> Result<Var> {
        self.check_features(feat)?;
        let mut b = self.builder(graph);
        let ctx = b.encode(feat.tensor())?;
        let input = b.decoder_input(DecoderInput::Tokens(inputs))?;
        let states = b.decode(ctx, input, true)?;
        self.count_decoder_call();
        b.project(states)
    }

    /// All agents' logits in a single decoder pass. Depends only on the
    /// context and the parameters.
    pub fn decode_na(&self, context: &Tensor) -> Result<DecoderLogits> {
        self.check_context(context)?;
        let mut g = Graph::new();
        let mut b = self.builder(&mut g);
        let ctx = b.graph.constant(context.clone());
        let input = b.decoder_input(DecoderInput::Positions(self.config.num_agents))?;
        let states = b.decode(ctx, input, false)?;
        let logits = b.project(states)?;
        self.count_decoder_call();
        Ok(DecoderLogits {
            logits: g.value(logits).clone(),
            agent_states: g.value(states).clone(),
        })
    }

    /// Decoder pass over an explicit input with a switchable causal mask.
    /// Used to compare the two decoding modes on identical inputs.
    pub fn decode_with(&self, context: &Tensor, inputs: DecoderInput<'_>, causal: bool) -> Result<Tensor> {
        self.check_context(context)?;
        let mut g = Graph::new();
        let mut b = self.builder(&mut g);
        let ctx = b.graph.constant(context.clone());
        let input = b.decoder_input(inputs)?;
        let states = b.decode(ctx, input, causal)?;
        let logits = b.project(states)?;
        self.count_decoder_call();
        Ok(g.value(logits).clone())
    }

    /// Log-probabilities of the next token after `prefix` (which starts with
    /// BOS). One decoder invocation.
    pub fn next_token_log_probs(&self, context: &Tensor, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut b = self.builder(&mut g);
        let ctx = b.graph.constant(context.clone());
        let input = b.decoder_input(DecoderInput::Tokens(prefix))?;
        let states = b.decode(ctx, input, true)?;
        let last = b.graph.slice(states, 0, prefix.len() - 1, 1)?;
        let logits = b.project(last)?;
        self.count_decoder_call();
        let row = g.value(logits).row(0);
        let lse = kernels::log_sum_exp(row);
        Ok(row.iter().map(|v| v - lse).collect())
    }

    /// Left-to-right greedy decoding. The returned tokens include the final
    /// period when one was emitted; one decoder invocation per token.
    pub fn decode_ar_greedy(&self, context: &Tensor, max_len: usize) -> Result<Vec<TokenId>> {
        if max_len == 0 {
            return invalid("max_len must be >= 1");
        }
        self.check_context(context)?;
        let mut prefix = vec![BOS];
        let mut out = Vec::new();
        while out.len() < max_len {
            let lp = self.next_token_log_probs(context, &prefix)?;
            let next = decode::argmax(&lp);
            out.push(next);
            prefix.push(next);
            if next == PERIOD {
                break;
            }
        }
        Ok(out)
    }

    /// Beam search scored by summed log-probabilities.
    pub fn decode_ar_beam(&self, context: &Tensor, beam_width: usize, max_len: usize) -> Result<Hypothesis> {
        if beam_width == 0 {
            return invalid("beam_width must be >= 1");
        }
        if max_len == 0 {
            return invalid("max_len must be >= 1");
        }
        self.check_context(context)?;
        decode::beam_search(beam_width, max_len, |prefix| self.next_token_log_probs(context, prefix))
    }

    /// Sum of log-probabilities the teacher assigns to `tokens`.
    pub fn sequence_log_prob(&self, context: &Tensor, tokens: &[TokenId]) -> Result<f64> {
        let mut prefix = vec![BOS];
        let mut total = 0.0;
        for &t in tokens {
            total += self.next_token_log_probs(context, &prefix)?[t];
            prefix.push(t);
        }
        Ok(total)
    }
}

/// Student initialisation: every tensor is copied bit-exactly. The decoding
/// mode is a runtime choice, so nothing needs converting.
pub fn init_from_teacher(teacher: &Model, student_config: &ModelConfig) -> Result<Model> {
    if &teacher.config != student_config {
        return Err(Error::Config(format!(
            "teacher config {:?} does not match student config {:?}",
            teacher.config, student_config
        )));
    }
    Model::new(student_config.clone(), teacher.params.clone())
}

#[cfg(test)]
mod tests;
