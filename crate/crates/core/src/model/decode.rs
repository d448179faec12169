use rand::Rng;

use super::{DecoderLogits, JointAction, TokenId, BOS, PERIOD};
use crate::autodiff::kernels;
use crate::error::{invalid, Result};

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_finite(logits: &DecoderLogits) -> Result<()> {
    if !logits.logits.is_finite() {
        return invalid("logits contain NaN or infinite values");
    }
    Ok(())
}

/// Draws every agent's token independently from its softmax policy.
pub fn sample_joint<R: Rng + ?Sized>(logits: &DecoderLogits, rng: &mut R) -> Result<JointAction> {
    check_finite(logits)?;
    let vocab = logits.vocab_size();
    let mut probs = vec![0.0; vocab];
    let mut tokens = Vec::with_capacity(logits.num_agents());
    for a in 0..logits.num_agents() {
        kernels::softmax_row(logits.logits.row(a), &mut probs);
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        let mut chosen = vocab - 1;
        for (t, &p) in probs.iter().enumerate() {
            cum += p;
            if u < cum {
                chosen = t;
                break;
            }
        }
        // guard against a residual tail from rounding landing on a zero-probability id
        while probs[chosen] == 0.0 && chosen > 0 {
            chosen -= 1;
        }
        tokens.push(chosen);
    }
    JointAction::new(tokens, vocab)
}

/// Per-agent argmax, lowest id on ties.
pub fn greedy_joint(logits: &DecoderLogits) -> Result<JointAction> {
    check_finite(logits)?;
    let tokens = (0..logits.num_agents()).map(|a| argmax(logits.logits.row(a))).collect();
    JointAction::new(tokens, logits.vocab_size())
}

/// Caption tokens strictly before the first period.
pub fn truncate_at_period(tokens: &[TokenId]) -> &[TokenId] {
    match tokens.iter().position(|&t| t == PERIOD) {
        Some(i) => &tokens[..i],
        None => tokens,
    }
}

/// A decoded sequence with its summed log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    pub score: f64,
    pub finished: bool,
}

fn better(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search over a next-token log-probability oracle. `next` receives the
/// prefix starting with BOS.
pub(crate) fn beam_search<F>(beam_width: usize, max_len: usize, mut next: F) -> Result<Hypothesis>
where
    F: FnMut(&[TokenId]) -> Result<Vec<f64>>,
{
    let mut beams = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
    }];
    let mut prefix = Vec::with_capacity(max_len + 1);
    for _ in 0..max_len {
        if beams.iter().all(|h| h.finished) {
            break;
        }
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for beam in &beams {
            if beam.finished {
                candidates.push(beam.clone());
                continue;
            }
            prefix.clear();
            prefix.push(BOS);
            prefix.extend_from_slice(&beam.tokens);
            let lp = next(&prefix)?;
            let mut order: Vec<usize> = (0..lp.len()).collect();
            order.sort_by(|&i, &j| lp[j].partial_cmp(&lp[i]).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j)));
            for &t in order.iter().take(beam_width) {
                let mut tokens = beam.tokens.clone();
                tokens.push(t);
                candidates.push(Hypothesis {
                    tokens,
                    score: beam.score + lp[t],
                    finished: t == PERIOD,
                });
            }
        }
        candidates.sort_by(better);
        candidates.truncate(beam_width);
        beams = candidates;
    }
    let best = beams
        .iter()
        .filter(|h| h.finished)
        .min_by(|a, b| better(a, b))
        .or_else(|| beams.iter().min_by(|a, b| better(a, b)))
        .cloned()
        .expect("beam is never empty");
    Ok(best)
}
