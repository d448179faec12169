use std::collections::BTreeMap;

use super::kernels::{self, gelu, gelu_grad, log_sum_exp, norm_stats, softmax_row};
use super::tensor::Tensor;
use crate::error::{invalid, shape_err, Result};

/// Epsilon added to the variance inside layer normalisation.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named gradients returned by [`Graph::backward`].
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(String),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add { lhs: Var, rhs: Var, broadcast: bool },
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var },
    Gather { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    Log(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64> },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Tape of tensor operations in creation (= topological) order.
///
/// Every op validates its input shapes before appending a node, so a graph
/// only ever contains well-formed nodes. Backward walks the tape in exact
/// reverse order and never mutates recorded values.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

fn is_matrix(t: &Tensor) -> bool {
    t.shape().len() == 2
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded at or after position `len`, so a shared
    /// prefix can be reused with different loss heads.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.params.retain(|v| v.0 < len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, t)
    }

    /// Registers a named trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, t: &Tensor) -> Var {
        let v = self.push(Op::Param(name.into()), t.clone());
        self.params.push(v);
        v
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(move |v| match &self.nodes[v.0].op {
            Op::Param(name) => name.as_str(),
            _ => unreachable!("param list holds only Param nodes"),
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_matrix(ta) || !is_matrix(tb) || ta.shape()[1] != tb.shape()[0] {
            return shape_err("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    /// `a · bᵀ`, used for attention scores.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_matrix(ta) || !is_matrix(tb) || ta.shape()[1] != tb.shape()[1] {
            return shape_err("matmul_nt", format!("{:?} x {:?}^T", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMulNT(a, b), value))
    }

    /// Elementwise sum. `rhs` may also be a single row broadcast over every
    /// row of `lhs` (bias addition).
    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (ta, tb) = (self.value(lhs), self.value(rhs));
        let broadcast = if ta.shape() == tb.shape() {
            false
        } else if tb.numel() == ta.cols() && tb.cols() == ta.cols() && tb.rows() == 1 {
            true
        } else {
            return shape_err("add", format!("{:?} + {:?}", ta.shape(), tb.shape()));
        };
        let cols = ta.cols();
        let out: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + if broadcast { tb.data()[i % cols] } else { tb.data()[i] })
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(Op::Add { lhs, rhs, broadcast }, value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err("mul", format!("{:?} * {:?}", ta.shape(), tb.shape()));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(Op::Scale(a, factor), value)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(Op::Gelu(a), value)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.cols() == 0 {
            return shape_err("softmax", format!("empty last axis in {:?}", t.shape()));
        }
        let cols = t.cols();
        let mut out = vec![0.0; t.numel()];
        for (row, dst) in t.data().chunks(cols).zip(out.chunks_mut(cols)) {
            softmax_row(row, dst);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(Op::Softmax(a), value))
    }

    /// Layer normalisation over the last axis followed by `gain * x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let cols = tx.cols();
        if tg.numel() != cols || tb.numel() != cols || cols == 0 {
            return shape_err(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", tx.shape(), tg.shape(), tb.shape()),
            );
        }
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(cols) {
            let (mean, inv_std) = norm_stats(row, LAYER_NORM_EPS);
            for (j, &v) in row.iter().enumerate() {
                out.push(tg.data()[j] * (v - mean) * inv_std + tb.data()[j]);
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(Op::LayerNorm { x, gain, bias }, value))
    }

    /// Selects rows of a `[vocab, dim]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if !is_matrix(t) {
            return shape_err("gather", format!("table {:?} is not a matrix", t.shape()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= t.shape()[0]) {
            return shape_err("gather", format!("id {bad} out of range for table {:?}", t.shape()));
        }
        let dim = t.shape()[1];
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(vec![ids.len(), dim], out)?;
        Ok(self.push(Op::Gather { table, ids: ids.to_vec() }, value))
    }

    /// Concatenates matrices along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return shape_err("concat", format!("{} parts along axis {axis}", parts.len()));
        }
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.value(p).shape().to_vec()).collect();
        if shapes.iter().any(|s| s.len() != 2) {
            return shape_err("concat", format!("non-matrix input among {shapes:?}"));
        }
        let other = 1 - axis;
        if shapes.iter().any(|s| s[other] != shapes[0][other]) {
            return shape_err("concat", format!("{shapes:?} along axis {axis}"));
        }
        let value = if axis == 0 {
            let rows = shapes.iter().map(|s| s[0]).sum();
            let mut out = Vec::new();
            for &p in parts {
                out.extend_from_slice(self.value(p).data());
            }
            Tensor::new(vec![rows, shapes[0][1]], out)?
        } else {
            let rows = shapes[0][0];
            let cols: usize = shapes.iter().map(|s| s[1]).sum();
            let mut out = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for &p in parts {
                    out.extend_from_slice(self.value(p).row(i));
                }
            }
            Tensor::new(vec![rows, cols], out)?
        };
        Ok(self.push(Op::Concat { parts: parts.to_vec(), axis }, value))
    }

    /// Contiguous slice `[start, start + len)` of a matrix along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if !is_matrix(t) || axis > 1 || start + len > t.shape()[axis] {
            return shape_err(
                "slice",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, t.shape()),
            );
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let value = if axis == 0 {
            Tensor::new(vec![len, cols], t.data()[start * cols..(start + len) * cols].to_vec())?
        } else {
            let mut out = Vec::with_capacity(rows * len);
            for i in 0..rows {
                out.extend_from_slice(&t.row(i)[start..start + len]);
            }
            Tensor::new(vec![rows, len], out)?
        };
        Ok(self.push(Op::Slice { x, axis, start }, value))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return shape_err("mean", "empty tensor");
        }
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        Ok(self.push(Op::Mean(a), Tensor::scalar(m)))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if let Some(bad) = t.data().iter().find(|&&v| v <= 0.0 || !v.is_finite()) {
            return invalid(format!("log of non-positive value {bad}"));
        }
        let value = t.map(f64::ln);
        Ok(self.push(Op::Log(a), value))
    }

    /// `Σ_i weights[i] · (−log softmax(logits_i)[targets[i]])` over the rows
    /// of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        if !is_matrix(t) || targets.len() != t.rows() || weights.len() != t.rows() {
            return shape_err(
                "cross_entropy",
                format!(
                    "logits {:?}, {} targets, {} weights",
                    t.shape(),
                    targets.len(),
                    weights.len()
                ),
            );
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= t.cols()) {
            return shape_err("cross_entropy", format!("target {bad} >= {} classes", t.cols()));
        }
        let mut loss = 0.0;
        for (i, (&y, &w)) in targets.iter().zip(weights).enumerate() {
            if w != 0.0 {
                let row = t.row(i);
                loss += w * (log_sum_exp(row) - row[y]);
            }
        }
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            Tensor::scalar(loss),
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`. Every registered parameter
    /// receives an entry; unreachable ones get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return shape_err("backward", format!("loss must be scalar, got {:?}", lt.shape()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(_) => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    // dA = dC · Bᵀ ; dB = Aᵀ · dC
                    kernels::matmul_nt_acc(&g, tb.data(), acc(&mut grads, *a, m * k), m, n, k);
                    kernels::matmul_tn_acc(ta.data(), &g, acc(&mut grads, *b, k * n), m, k, n);
                }
                Op::MatMulNT(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                    // C = A Bᵀ: dA = dC · B ; dB = dCᵀ · A
                    kernels::matmul_acc(&g, tb.data(), acc(&mut grads, *a, m * k), m, n, k);
                    kernels::matmul_tn_acc(&g, ta.data(), acc(&mut grads, *b, n * k), m, n, k);
                }
                Op::Add { lhs, rhs, broadcast } => {
                    let len_a = self.value(*lhs).numel();
                    for (d, s) in acc(&mut grads, *lhs, len_a).iter_mut().zip(&g) {
                        *d += s;
                    }
                    let tb = self.value(*rhs);
                    let len_b = tb.numel();
                    let db = acc(&mut grads, *rhs, len_b);
                    if *broadcast {
                        for (i, s) in g.iter().enumerate() {
                            db[i % len_b] += s;
                        }
                    } else {
                        for (d, s) in db.iter_mut().zip(&g) {
                            *d += s;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a).clone(), self.value(*b).clone());
                    let da = acc(&mut grads, *a, ta.numel());
                    for ((d, s), y) in da.iter_mut().zip(&g).zip(tb.data()) {
                        *d += s * y;
                    }
                    let db = acc(&mut grads, *b, tb.numel());
                    for ((d, s), x) in db.iter_mut().zip(&g).zip(ta.data()) {
                        *d += s * x;
                    }
                }
                Op::Scale(a, factor) => {
                    let da = acc(&mut grads, *a, g.len());
                    for (d, s) in da.iter_mut().zip(&g) {
                        *d += s * factor;
                    }
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let da = acc(&mut grads, *a, g.len());
                    for ((d, s), &xv) in da.iter_mut().zip(&g).zip(x.data()) {
                        *d += s * gelu_grad(xv);
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let cols = y.cols();
                    let da = acc(&mut grads, *a, g.len());
                    for ((yr, gr), dr) in y
                        .data()
                        .chunks(cols)
                        .zip(g.chunks(cols))
                        .zip(da.chunks_mut(cols))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((d, &p), &q) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += p * (q - dot);
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (tx, tg) = (self.value(*x).clone(), self.value(*gain).clone());
                    let cols = tx.cols();
                    let mut dgain = vec![0.0; cols];
                    let mut dbias = vec![0.0; cols];
                    let mut dx = vec![0.0; tx.numel()];
                    for ((row, gr), dr) in tx
                        .data()
                        .chunks(cols)
                        .zip(g.chunks(cols))
                        .zip(dx.chunks_mut(cols))
                    {
                        let (mean, inv_std) = norm_stats(row, LAYER_NORM_EPS);
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                        let dxhat: Vec<f64> =
                            gr.iter().zip(tg.data()).map(|(s, w)| s * w).collect();
                        let n = cols as f64;
                        let mean_dxhat = dxhat.iter().sum::<f64>() / n;
                        let mean_dxhat_xhat =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                        for j in 0..cols {
                            dgain[j] += gr[j] * xhat[j];
                            dbias[j] += gr[j];
                            dr[j] = inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        }
                    }
                    for (d, s) in acc(&mut grads, *x, dx.len()).iter_mut().zip(&dx) {
                        *d += s;
                    }
                    for (d, s) in acc(&mut grads, *gain, cols).iter_mut().zip(&dgain) {
                        *d += s;
                    }
                    for (d, s) in acc(&mut grads, *bias, cols).iter_mut().zip(&dbias) {
                        *d += s;
                    }
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let (len, dim) = (t.numel(), t.shape()[1]);
                    let dt = acc(&mut grads, *table, len);
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..dim {
                            dt[id * dim + j] += g[r * dim + j];
                        }
                    }
                }
                Op::Concat { parts, axis } => {
                    let shapes: Vec<Vec<usize>> =
                        parts.iter().map(|&p| self.value(p).shape().to_vec()).collect();
                    if *axis == 0 {
                        let mut offset = 0;
                        for (&p, s) in parts.iter().zip(&shapes) {
                            let n = s[0] * s[1];
                            for (d, v) in acc(&mut grads, p, n).iter_mut().zip(&g[offset..offset + n]) {
                                *d += v;
                            }
                            offset += n;
                        }
                    } else {
                        let total_cols = node.value.cols();
                        let mut col = 0;
                        for (&p, s) in parts.iter().zip(&shapes) {
                            let (rows, cols) = (s[0], s[1]);
                            let dp = acc(&mut grads, p, rows * cols);
                            for i in 0..rows {
                                for j in 0..cols {
                                    dp[i * cols + j] += g[i * total_cols + col + j];
                                }
                            }
                            col += cols;
                        }
                    }
                }
                Op::Slice { x, axis, start } => {
                    let t = self.value(*x);
                    let (rows, cols) = (t.shape()[0], t.shape()[1]);
                    let out_cols = node.value.cols();
                    let dx = acc(&mut grads, *x, rows * cols);
                    if *axis == 0 {
                        for (d, v) in dx[start * cols..].iter_mut().zip(&g) {
                            *d += v;
                        }
                    } else {
                        for i in 0..rows {
                            for j in 0..out_cols {
                                dx[i * cols + start + j] += g[i * out_cols + j];
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    let n = self.value(*a).numel();
                    for d in acc(&mut grads, *a, n).iter_mut() {
                        *d += g[0];
                    }
                }
                Op::Mean(a) => {
                    let n = self.value(*a).numel();
                    let s = g[0] / n as f64;
                    for d in acc(&mut grads, *a, n).iter_mut() {
                        *d += s;
                    }
                }
                Op::Log(a) => {
                    let x = self.value(*a).clone();
                    let da = acc(&mut grads, *a, x.numel());
                    for ((d, s), xv) in da.iter_mut().zip(&g).zip(x.data()) {
                        *d += s / xv;
                    }
                }
                Op::CrossEntropy { logits, targets, weights } => {
                    let t = self.value(*logits).clone();
                    let cols = t.cols();
                    let dl = acc(&mut grads, *logits, t.numel());
                    let mut probs = vec![0.0; cols];
                    for (i, (&y, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        softmax_row(t.row(i), &mut probs);
                        let scale = g[0] * w;
                        for j in 0..cols {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            dl[i * cols + j] += scale * (probs[j] - onehot);
                        }
                    }
                }
            }
        }

        let mut out = Gradients::new();
        for &p in &self.params {
            let Op::Param(name) = &self.nodes[p.0].op else { unreachable!() };
            let shape = self.value(p).shape().to_vec();
            let g = match grads.get_mut(p.0).and_then(Option::take) {
                Some(g) => Tensor::new(shape, g)?,
                None => Tensor::zeros(&shape),
            };
            match out.get_mut(name) {
                // same name registered twice: gradients add
                Some(existing) => {
                    let summed = existing.data().iter().zip(g.data()).map(|(a, b)| a + b).collect();
                    *existing = Tensor::new(existing.shape().to_vec(), summed)?;
                }
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        Ok(out)
    }
}
