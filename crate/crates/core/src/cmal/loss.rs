use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Result};
use crate::model::{JointAction, TokenId, PAD, PERIOD};

/// Pads a caption to `n` positions. A period is appended when missing;
/// captions that do not fit are rejected.
pub fn pad_target(caption: &[TokenId], n: usize) -> Result<Vec<TokenId>> {
    let mut out: Vec<TokenId> = caption.to_vec();
    match out.iter().position(|&t| t == PERIOD) {
        Some(p) => out.truncate(p + 1),
        None => out.push(PERIOD),
    }
    if out.len() > n {
        return invalid(format!("caption of {} tokens does not fit {n} positions", out.len()));
    }
    out.resize(n, PAD);
    Ok(out)
}

/// Positions supervised by the XE loss: everything up to and including the
/// first period.
pub fn supervised_positions(target: &[TokenId]) -> usize {
    target.iter().position(|&t| t == PERIOD).map_or(target.len(), |p| p + 1)
}

/// `−Σ_i log p(y_i)` over the supervised positions of a padded target.
pub fn xe_loss(g: &mut Graph, logits: Var, target: &[TokenId]) -> Result<Var> {
    let (rows, vocab) = (g.value(logits).rows(), g.value(logits).cols());
    if target.len() != rows {
        return invalid(format!("target length {} != {rows} positions", target.len()));
    }
    if let Some(&bad) = target.iter().find(|&&t| t >= vocab) {
        return invalid(format!("target token {bad} >= vocab size {vocab}"));
    }
    let m = supervised_positions(target);
    let weights: Vec<f64> = (0..rows).map(|i| if i < m { 1.0 } else { 0.0 }).collect();
    g.cross_entropy(logits, target, &weights)
}

/// `−Σ_a A_a · log π_a(u_a)`, with the advantages held constant.
pub fn cmal_surrogate_loss(g: &mut Graph, logits: Var, joint: &JointAction, advantages: &[f64]) -> Result<Var> {
    if advantages.len() != joint.len() {
        return invalid(format!("{} advantages for {} agents", advantages.len(), joint.len()));
    }
    if let Some(a) = advantages.iter().find(|a| !a.is_finite()) {
        return invalid(format!("non-finite advantage {a}"));
    }
    g.cross_entropy(logits, joint.tokens(), advantages)
}
