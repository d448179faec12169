//! Naive metric implementations: n-grams as token vectors, direct formula
//! evaluation, no precomputation. Shares only the token type with
//! `crate::metrics`.

use std::collections::{BTreeMap, BTreeSet};

use crate::model::{TokenId, PERIOD};

fn caption(tokens: &[TokenId]) -> Vec<TokenId> {
    tokens.iter().copied().take_while(|&t| t != PERIOD).collect()
}

fn grams(tokens: &[TokenId], n: usize) -> BTreeMap<Vec<TokenId>, usize> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for i in 0..=tokens.len() - n {
            *out.entry(tokens[i..i + n].to_vec()).or_insert(0) += 1;
        }
    }
    out
}

/// Unsmoothed sentence BLEU by direct counting.
pub fn bleu_bruteforce(candidate: &[TokenId], references: &[Vec<TokenId>], max_n: usize) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let mut precisions = Vec::new();
    for n in 1..=max_n {
        let cand = grams(candidate, n);
        let total: usize = cand.values().sum();
        let mut matched = 0;
        for (g, &c) in &cand {
            let max_ref = references.iter().map(|r| grams(r, n).get(g).copied().unwrap_or(0)).max().unwrap_or(0);
            matched += c.min(max_ref);
        }
        if total == 0 || matched == 0 {
            return 0.0;
        }
        precisions.push(matched as f64 / total as f64);
    }
    let c = candidate.len() as f64;
    let mut closest = references[0].len();
    for r in references {
        let (d_new, d_old) = ((r.len() as f64 - c).abs(), (closest as f64 - c).abs());
        if d_new < d_old || (d_new == d_old && r.len() < closest) {
            closest = r.len();
        }
    }
    let bp = if c < closest as f64 { (1.0 - closest as f64 / c).exp() } else { 1.0 };
    let geo = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
    bp * geo.exp()
}

/// CIDEr-D evaluated straight from its definition. `corpus` holds one
/// reference set per document.
pub fn cider_bruteforce(candidate: &[TokenId], references: &[Vec<TokenId>], corpus: &[Vec<Vec<TokenId>>]) -> f64 {
    const N: usize = 4;
    const SIGMA: f64 = 6.0;
    let candidate = caption(candidate);
    if candidate.is_empty() {
        return 0.0;
    }
    let docs = corpus.len() as f64;
    let doc_freq = |g: &Vec<TokenId>| -> f64 {
        corpus
            .iter()
            .filter(|refs| {
                let set: BTreeSet<Vec<TokenId>> =
                    refs.iter().flat_map(|r| grams(&caption(r), g.len()).into_keys()).collect();
                set.contains(g)
            })
            .count() as f64
    };
    let vector = |tokens: &[TokenId], n: usize| -> BTreeMap<Vec<TokenId>, f64> {
        grams(tokens, n)
            .into_iter()
            .map(|(g, tf)| {
                let df = doc_freq(&g).max(1.0);
                (g, tf as f64 * (docs / df).ln())
            })
            .collect()
    };
    let norm = |v: &BTreeMap<Vec<TokenId>, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();

    let mut per_ref = Vec::new();
    for r in references {
        let r = caption(r);
        let delta = candidate.len().saturating_sub(1) as f64 - r.len().saturating_sub(1) as f64;
        let mut score = 0.0;
        for n in 1..=N {
            let vc = vector(&candidate, n);
            let vr = vector(&r, n);
            let mut dot = 0.0;
            for (g, &wc) in &vc {
                if let Some(&wr) = vr.get(g) {
                    dot += wc.min(wr) * wr;
                }
            }
            let (nc, nr) = (norm(&vc), norm(&vr));
            if nc != 0.0 && nr != 0.0 {
                dot /= nc * nr;
            }
            score += dot * (-(delta * delta) / (2.0 * SIGMA * SIGMA)).exp();
        }
        per_ref.push(score / N as f64);
    }
    10.0 * per_ref.iter().sum::<f64>() / per_ref.len() as f64
}

/// Both brute-force scores of one candidate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricOracles {
    pub bleu1: f64,
    pub bleu4: f64,
    pub cider: f64,
}

pub fn metric_oracles(candidate: &[TokenId], references: &[Vec<TokenId>], corpus: &[Vec<Vec<TokenId>>]) -> MetricOracles {
    let cand = caption(candidate);
    let refs: Vec<Vec<TokenId>> = references.iter().map(|r| caption(r)).collect();
    MetricOracles {
        bleu1: bleu_bruteforce(&cand, &refs, 1),
        bleu4: bleu_bruteforce(&cand, &refs, 4),
        cider: cider_bruteforce(&cand, &refs, corpus),
    }
}
