//! Sentence-level caption metrics: BLEU-n and CIDEr-D.
//!
//! CIDEr-D follows the consensus-metric reference implementation: tf-idf
//! vectors per n-gram order, candidate weights clipped to the reference
//! weights, a Gaussian penalty on the bigram-count difference, averaged over
//! references and orders and scaled by 10.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{truncate_at_period, TokenId};

pub const CIDER_MAX_N: usize = 4;
pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_SCALE: f64 = 10.0;

const TOKEN_BITS: u32 = 15;

/// An n-gram (1 ≤ n ≤ 4) packed into a single integer key: the order in
/// the top four bits, then one 15-bit field per token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NGram(u64);

impl NGram {
    pub fn new(tokens: &[TokenId]) -> Self {
        debug_assert!((1..=4).contains(&tokens.len()));
        let mut key = 0u64;
        for &t in tokens {
            debug_assert!(t < (1 << TOKEN_BITS), "token id {t} too large to pack");
            key = (key << TOKEN_BITS) | t as u64;
        }
        Self(((tokens.len() as u64) << 60) | key)
    }

    pub fn order(self) -> usize {
        (self.0 >> 60) as usize
    }

    pub fn tokens(self) -> Vec<TokenId> {
        let n = self.order();
        (0..n)
            .rev()
            .map(|i| ((self.0 >> (TOKEN_BITS as usize * i)) & ((1 << TOKEN_BITS) - 1)) as TokenId)
            .collect()
    }
}

/// Multiset of n-grams of one sentence.
pub type NGramCounts = HashMap<NGram, usize>;

/// Counts of all n-grams of orders `1..=max_n`.
pub fn ngram_counts(tokens: &[TokenId], max_n: usize) -> NGramCounts {
    let mut counts = NGramCounts::new();
    for n in 1..=max_n {
        for w in tokens.windows(n) {
            *counts.entry(NGram::new(w)).or_insert(0) += 1;
        }
    }
    counts
}

fn order_counts(tokens: &[TokenId], n: usize) -> NGramCounts {
    let mut counts = NGramCounts::new();
    for w in tokens.windows(n) {
        *counts.entry(NGram::new(w)).or_insert(0) += 1;
    }
    counts
}

/// Clipped matches and total candidate n-grams of order `n`.
pub fn clipped_matches(candidate: &[TokenId], references: &[Vec<TokenId>], n: usize) -> (usize, usize) {
    let cand = order_counts(candidate, n);
    let mut max_ref: HashMap<NGram, usize> = HashMap::new();
    for r in references {
        for (g, c) in order_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    let total = candidate.len().saturating_sub(n - 1);
    (matched, total)
}

/// Sentence BLEU without smoothing.
pub fn bleu(candidate: &[TokenId], references: &[Vec<TokenId>], max_n: usize) -> Result<f64> {
    if references.is_empty() {
        return invalid("BLEU needs at least one reference");
    }
    if !(1..=4).contains(&max_n) {
        return invalid(format!("BLEU order {max_n} outside [1, 4]"));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (matched, total) = clipped_matches(candidate, references, n);
        if matched == 0 || total == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let c = candidate.len();
    let r = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("non-empty references");
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(bp * (log_sum / max_n as f64).exp())
}

/// Document frequencies over a reference corpus; one document per image.
#[derive(Clone, Debug)]
pub struct CiderCorpusStats {
    doc_freq: HashMap<NGram, usize>,
    num_docs: usize,
    pub max_n: usize,
    pub sigma: f64,
}

impl CiderCorpusStats {
    /// Builds document frequencies; each n-gram counts once per reference set
    /// containing it.
    pub fn build(corpus: &[Vec<Vec<TokenId>>]) -> Result<Self> {
        if corpus.is_empty() {
            return invalid("CIDEr-D corpus is empty");
        }
        let mut doc_freq = HashMap::new();
        for refs in corpus {
            let mut seen = HashSet::new();
            for r in refs {
                seen.extend(ngram_counts(truncate_at_period(r), CIDER_MAX_N).into_keys());
            }
            for g in seen {
                *doc_freq.entry(g).or_insert(0) += 1;
            }
        }
        Ok(Self {
            doc_freq,
            num_docs: corpus.len(),
            max_n: CIDER_MAX_N,
            sigma: CIDER_SIGMA,
        })
    }

    pub fn num_docs(&self) -> usize {
        self.num_docs
    }

    pub fn doc_freq(&self, g: &NGram) -> usize {
        self.doc_freq.get(g).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.doc_freq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_freq.is_empty()
    }

    /// `log(num_docs / max(1, doc_freq))`
    pub fn idf(&self, g: &NGram) -> f64 {
        (self.num_docs as f64).ln() - (self.doc_freq(g).max(1) as f64).ln()
    }

    fn check(&self) -> Result<()> {
        if self.num_docs < 2 {
            return invalid(format!("CIDEr-D needs >= 2 documents, got {}", self.num_docs));
        }
        Ok(())
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }
}

/// tf-idf vector of one sentence, split by order. Entries are sorted by
/// n-gram so every sum runs in a fixed order.
#[derive(Clone, Debug)]
struct TfIdf {
    weights: Vec<Vec<(NGram, f64)>>,
    norms: Vec<f64>,
    /// Bigram count, the length used by the Gaussian penalty.
    length: f64,
}

impl TfIdf {
    fn new(tokens: &[TokenId], stats: &CiderCorpusStats) -> Self {
        let mut weights = Vec::with_capacity(stats.max_n);
        let mut norms = Vec::with_capacity(stats.max_n);
        for n in 1..=stats.max_n {
            let mut entries: Vec<(NGram, f64)> = order_counts(tokens, n)
                .into_iter()
                .map(|(g, tf)| (g, tf as f64 * stats.idf(&g)))
                .collect();
            entries.sort_by_key(|e| e.0);
            norms.push(entries.iter().map(|e| e.1 * e.1).sum::<f64>().sqrt());
            weights.push(entries);
        }
        Self {
            weights,
            norms,
            length: tokens.len().saturating_sub(1) as f64,
        }
    }

    fn similarity(&self, reference: &TfIdf, sigma: f64) -> f64 {
        let delta = self.length - reference.length;
        let penalty = (-(delta * delta) / (2.0 * sigma * sigma)).exp();
        let mut total = 0.0;
        for n in 0..self.weights.len() {
            let (hyp, refs) = (&self.weights[n], &reference.weights[n]);
            let (mut i, mut j) = (0, 0);
            let mut val = 0.0;
            while i < hyp.len() && j < refs.len() {
                match hyp[i].0.cmp(&refs[j].0) {
                    std::cmp::Ordering::Less => i += 1,
                    std::cmp::Ordering::Greater => j += 1,
                    std::cmp::Ordering::Equal => {
                        val += hyp[i].1.min(refs[j].1) * refs[j].1;
                        i += 1;
                        j += 1;
                    }
                }
            }
            if self.norms[n] != 0.0 && reference.norms[n] != 0.0 {
                val /= self.norms[n] * reference.norms[n];
            }
            total += val * penalty;
        }
        total
    }
}

/// References of one image with their tf-idf vectors precomputed.
#[derive(Clone, Debug)]
pub struct PreparedReferences {
    captions: Vec<Vec<TokenId>>,
    vectors: Vec<TfIdf>,
}

impl PreparedReferences {
    pub fn new(references: &[Vec<TokenId>], stats: &CiderCorpusStats) -> Result<Self> {
        stats.check()?;
        if references.is_empty() {
            return invalid("at least one reference is required");
        }
        let captions: Vec<Vec<TokenId>> =
            references.iter().map(|r| truncate_at_period(r).to_vec()).collect();
        let vectors = captions.iter().map(|r| TfIdf::new(r, stats)).collect();
        Ok(Self { captions, vectors })
    }

    pub fn captions(&self) -> &[Vec<TokenId>] {
        &self.captions
    }

    pub fn cider_d(&self, candidate: &[TokenId], stats: &CiderCorpusStats) -> f64 {
        if candidate.is_empty() {
            return 0.0;
        }
        let cand = TfIdf::new(candidate, stats);
        let sum: f64 = self.vectors.iter().map(|r| cand.similarity(r, stats.sigma)).sum();
        sum / stats.max_n as f64 / self.vectors.len() as f64 * CIDER_SCALE
    }
}

/// CIDEr-D of one candidate caption against its references.
pub fn cider_d(candidate: &[TokenId], references: &[Vec<TokenId>], stats: &CiderCorpusStats) -> Result<f64> {
    Ok(PreparedReferences::new(references, stats)?.cider_d(candidate, stats))
}

/// Which sentence metric supplies the team reward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    #[default]
    CiderD,
    Bleu4,
    Bleu1,
}

/// Scores joint actions of one image: truncation at the first period, then
/// the configured metric.
#[derive(Clone, Debug)]
pub struct TeamReward<'a> {
    refs: PreparedReferences,
    stats: &'a CiderCorpusStats,
    kind: MetricKind,
}

impl<'a> TeamReward<'a> {
    pub fn new(references: &[Vec<TokenId>], stats: &'a CiderCorpusStats, kind: MetricKind) -> Result<Self> {
        Ok(Self {
            refs: PreparedReferences::new(references, stats)?,
            stats,
            kind,
        })
    }

    /// Reward of an untruncated token sequence.
    pub fn score(&self, tokens: &[TokenId]) -> f64 {
        self.score_caption(truncate_at_period(tokens))
    }

    pub fn score_caption(&self, caption: &[TokenId]) -> f64 {
        match self.kind {
            MetricKind::CiderD => self.refs.cider_d(caption, self.stats),
            MetricKind::Bleu4 => bleu(caption, self.refs.captions(), 4).unwrap_or(0.0),
            MetricKind::Bleu1 => bleu(caption, self.refs.captions(), 1).unwrap_or(0.0),
        }
    }
}

/// Convenience wrapper over [`TeamReward`].
pub fn team_reward(
    joint: &[TokenId],
    references: &[Vec<TokenId>],
    stats: &CiderCorpusStats,
    kind: MetricKind,
) -> Result<f64> {
    Ok(TeamReward::new(references, stats, kind)?.score(joint))
}

/// Fraction of adjacent token pairs that repeat the same token, over all
/// captions.
pub fn adjacent_duplicate_rate(captions: &[Vec<TokenId>]) -> f64 {
    let (mut dup, mut pairs) = (0usize, 0usize);
    for c in captions {
        for w in c.windows(2) {
            pairs += 1;
            if w[0] == w[1] {
                dup += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        dup as f64 / pairs as f64
    }
}
