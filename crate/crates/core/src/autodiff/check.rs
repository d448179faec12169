use std::collections::BTreeMap;

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

/// Named tensors fed to a loss builder.
pub type TensorMap = BTreeMap<String, Tensor>;

/// Coordinates probed per tensor by [`finite_difference_check`].
pub const DEFAULT_COORDS_PER_TENSOR: usize = 24;

fn eval<F>(loss_fn: &F, params: &TensorMap) -> Result<(f64, Gradients)>
where
    F: Fn(&mut Graph, &TensorMap) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, params)?;
    let value = g.value(loss).item();
    Ok((value, g.backward(loss)?))
}

fn eval_value<F>(loss_fn: &F, params: &TensorMap) -> Result<f64>
where
    F: Fn(&mut Graph, &TensorMap) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, params)?;
    Ok(g.value(loss).item())
}

fn with_coord(params: &TensorMap, name: &str, idx: usize, delta: f64) -> TensorMap {
    let mut out = params.clone();
    let t = &params[name];
    let mut data = t.data().to_vec();
    data[idx] += delta;
    out.insert(name.to_string(), Tensor::new(t.shape().to_vec(), data).expect("same shape"));
    out
}

/// Compares reverse-mode gradients against central differences.
///
/// `loss_fn` must register every entry of `params` with [`Graph::param`]
/// under its map key. Returns the maximum of
/// `|analytic − numeric| / max(1e-8, |numeric|)` over the probed coordinates.
pub fn finite_difference_check<F>(loss_fn: F, params: &TensorMap, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &TensorMap) -> Result<Var>,
{
    finite_difference_check_with(loss_fn, params, eps, DEFAULT_COORDS_PER_TENSOR)
}

pub fn finite_difference_check_with<F>(
    loss_fn: F,
    params: &TensorMap,
    eps: f64,
    coords_per_tensor: usize,
) -> Result<f64>
where
    F: Fn(&mut Graph, &TensorMap) -> Result<Var>,
{
    let probes = finite_difference_probes(loss_fn, params, eps, coords_per_tensor)?;
    Ok(probes.iter().map(Probe::relative_error).fold(0.0, f64::max))
}

/// One probed coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    /// `|analytic − numeric| / max(1e-8, |numeric|)`
    pub fn relative_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.numeric.abs().max(1e-8)
    }
}

/// Analytic and central-difference derivatives at up to
/// `coords_per_tensor` evenly spaced coordinates of every tensor.
pub fn finite_difference_probes<F>(
    loss_fn: F,
    params: &TensorMap,
    eps: f64,
    coords_per_tensor: usize,
) -> Result<Vec<Probe>>
where
    F: Fn(&mut Graph, &TensorMap) -> Result<Var>,
{
    if !(eps > 0.0) || !eps.is_finite() {
        return invalid(format!("finite-difference eps must be > 0, got {eps}"));
    }
    let (v1, grads) = eval(&loss_fn, params)?;
    let v2 = eval_value(&loss_fn, params)?;
    if v1.to_bits() != v2.to_bits() {
        return Err(Error::NonDeterministic(format!("two evaluations gave {v1} and {v2}")));
    }

    let mut probes = Vec::new();
    for (name, t) in params {
        let analytic = grads
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("parameter {name} not registered")))?;
        let n = t.numel();
        let stride = (n / coords_per_tensor.max(1)).max(1);
        for idx in (0..n).step_by(stride).take(coords_per_tensor) {
            let plus = eval_value(&loss_fn, &with_coord(params, name, idx, eps))?;
            let minus = eval_value(&loss_fn, &with_coord(params, name, idx, -eps))?;
            probes.push(Probe {
                name: name.clone(),
                index: idx,
                analytic: analytic.data()[idx],
                numeric: (plus - minus) / (2.0 * eps),
            });
        }
    }
    Ok(probes)
}
