//! Reverse-mode differentiation over a linear tape of recorded operations.

use std::collections::BTreeMap;

use super::ops::{self, AttnDims};
use super::{ParameterStore, Tensor};
use crate::error::{Result, XfiError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Pool {
        x: Var,
        groups: usize,
        out_len: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        scale: f64,
        probs: Vec<f64>,
    },
    MeanOf(Vec<Var>),
    SquaredError {
        pred: Var,
        target: Vec<f64>,
        denom: f64,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation so it can be differentiated once.
///
/// A tape is confined to one thread; independent tapes may be evaluated concurrently
/// against the same read-only [`ParameterStore`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Per-node gradients produced by [`Tape::gradients`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, delta: Vec<f64>) {
    match &mut grads[var.0] {
        Some(existing) => existing.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
        slot @ None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Records a constant (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a free leaf that participates in differentiation.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records the named parameter; repeated requests return the same handle so that
    /// gradients from every use accumulate.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?;
        let mut copy = Tensor::from_parts(value.shape().to_vec(), value.data().to_vec());
        copy.set_requires_grad(true);
        let var = self.push(copy, Op::Leaf, true);
        self.params.insert(name.to_string(), var);
        Ok(var)
    }

    /// Names of every parameter read during the forward pass.
    pub fn used_params(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::add(self.value(a), self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::mul(self.value(a), self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let value = ops::scale(self.value(x), factor)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Scale(x, factor), ng))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = ops::add_row(self.value(x), self.value(bias))?;
        let ng = self.needs(&[x, bias]);
        Ok(self.push(value, Op::AddRow(x, bias), ng))
    }

    /// `x·W + b`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = ops::relu(self.value(x))?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Relu(x), ng))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let value = ops::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let (xhat, rstd) = ops::layer_norm_parts(self.value(x), eps)?;
        let ng = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = ops::softmax(self.value(x), axis)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Softmax { x, axis }, ng))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let value = ops::concat(&values, axis)?;
        let ng = self.needs(inputs);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = ops::slice_axis(self.value(x), axis, start, len)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Slice { x, axis, start }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = ops::mean_axis(self.value(x), axis)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::MeanAxis { x, axis }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = ops::sum_all(self.value(x)).check_finite("sum")?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Sum(x), ng))
    }

    /// Adaptive average pooling applied to each of `groups` row blocks.
    pub fn adaptive_avg_pool(&mut self, x: Var, groups: usize, out_len: usize) -> Result<Var> {
        let value = ops::adaptive_avg_pool_grouped(self.value(x), groups, out_len)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Pool { x, groups, out_len }, ng))
    }

    /// Row-block concatenation: for each of `groups` samples, stacks that sample's rows from
    /// every input in order.
    pub fn concat_grouped(&mut self, inputs: &[Var], groups: usize) -> Result<Var> {
        if inputs.len() == 1 {
            return Ok(inputs[0]);
        }
        let mut flat = Vec::with_capacity(inputs.len());
        let mut total_rows = 0;
        let mut width = None;
        for &v in inputs {
            let (rows, cols) = self.value(v).dims2()?;
            if rows % groups != 0 || width.is_some_and(|w| w != cols) {
                return Err(XfiError::shape("concat_grouped", self.shape(inputs[0]), self.shape(v)));
            }
            width = Some(cols);
            total_rows += rows;
            flat.push(self.reshape(v, &[groups, rows / groups * cols])?);
        }
        let joined = self.concat(&flat, 1)?;
        self.reshape(joined, &[total_rows, width.unwrap_or(1)])
    }

    /// Rows `[start, start + len)` of every one of `groups` row blocks.
    pub fn slice_grouped(&mut self, x: Var, groups: usize, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if groups == 0 || rows % groups != 0 {
            return Err(XfiError::InvalidArgument(format!(
                "slice_grouped: {rows} rows cannot be split into {groups} groups"
            )));
        }
        let per = rows / groups;
        if per == len && start == 0 {
            return Ok(x);
        }
        let flat = self.reshape(x, &[groups, per * cols])?;
        let sliced = self.slice(flat, 1, start * cols, len * cols)?;
        self.reshape(sliced, &[groups * len, cols])
    }

    /// Grouped multi-head attention core (no projections). Row block `g` of `q` attends over
    /// row block `g` of `k`/`v`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        groups: usize,
    ) -> Result<Var> {
        let dims = ops::attention_dims(self.value(q), self.value(k), self.value(v), heads, scale, groups)?;
        let (out, probs) = ops::attention_core(self.value(q), self.value(k), self.value(v), dims, scale);
        let value = Tensor::from_parts(vec![dims.groups * dims.lq, dims.d], out).check_finite("attention")?;
        let ng = self.needs(&[q, k, v]);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                dims,
                scale,
                probs,
            },
            ng,
        ))
    }

    /// Elementwise arithmetic mean: inputs are summed in order, then divided by their count.
    pub fn mean_of(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| XfiError::InvalidArgument("mean of zero tensors".into()))?;
        let shape = self.shape(first).to_vec();
        let mut acc = self.value(first).data().to_vec();
        for &v in &inputs[1..] {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(XfiError::shape("mean_of", &shape, t.shape()));
            }
            acc.iter_mut().zip(t.data()).for_each(|(a, b)| *a += b);
        }
        let n = inputs.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        let value = Tensor::from_parts(shape, acc).check_finite("mean_of")?;
        let ng = self.needs(inputs);
        Ok(self.push(value, Op::MeanOf(inputs.to_vec()), ng))
    }

    /// `Σ (pred − target)² / denom` as a scalar.
    pub fn squared_error(&mut self, pred: Var, target: &Tensor, denom: f64) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(XfiError::shape("squared_error", p.shape(), target.shape()));
        }
        if !(denom > 0.0) {
            return Err(XfiError::InvalidArgument("squared_error denominator must be > 0".into()));
        }
        let total: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let value = Tensor::scalar(total / denom).check_finite("squared_error")?;
        let ng = self.needs(&[pred]);
        Ok(self.push(
            value,
            Op::SquaredError {
                pred,
                target: target.data().to_vec(),
                denom,
            },
            ng,
        ))
    }

    /// Mean over rows of `−log softmax(logits_row)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, classes) = self.value(logits).dims2()?;
        if labels.len() != rows {
            return Err(XfiError::shape("cross_entropy", &[rows, classes], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(XfiError::InvalidArgument(format!(
                "class label {bad} out of range for {classes} classes"
            )));
        }
        let probs = ops::softmax(self.value(logits), 1)?;
        let data = self.value(logits).data();
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &data[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let value = Tensor::scalar(total / rows as f64).check_finite("cross_entropy")?;
        let ng = self.needs(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs: probs.into_data(),
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(XfiError::NotScalar(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2()?;
                let (_, n) = bv.dims2()?;
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    ops::gemm(m, n, k, g, (n, 1), bv.data(), (1, n), &mut da, 0.0);
                    accumulate(grads, *a, da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    ops::gemm(k, m, n, av.data(), (1, k), g, (n, 1), &mut db, 0.0);
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let d = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, d);
                }
                if wants(*b) {
                    let d = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::Scale(x, f) => accumulate(grads, *x, g.iter().map(|v| v * f).collect()),
            Op::AddRow(x, b) => {
                if wants(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if wants(*b) {
                    let n = self.value(*b).numel();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Relu(x) => {
                let d = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                accumulate(grads, *x, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = self.value(*gamma).data();
                let n = gam.len();
                if wants(*gamma) {
                    let mut dg = vec![0.0; n];
                    for (grow, xrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += grow[j] * xrow[j];
                        }
                    }
                    accumulate(grads, *gamma, dg);
                }
                if wants(*beta) {
                    let mut db = vec![0.0; n];
                    for grow in g.chunks(n) {
                        db.iter_mut().zip(grow).for_each(|(a, v)| *a += v);
                    }
                    accumulate(grads, *beta, db);
                }
                if wants(*x) {
                    let mut dx = Vec::with_capacity(g.len());
                    for ((grow, xrow), r) in g.chunks(n).zip(xhat.chunks(n)).zip(rstd) {
                        let dxhat: Vec<f64> = grow.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxhat.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        dx.extend(
                            dxhat
                                .iter()
                                .zip(xrow)
                                .map(|(dh, xh)| r * (dh - mean_d - xh * mean_dx)),
                        );
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = ops::axis_split(node.value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                // y_j Σ_k y_k (g_j − g_k): exact zero for constant upstream gradients
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        for j in 0..len {
                            let spread: f64 = (0..len).map(|k| y[idx(k)] * (g[idx(j)] - g[idx(k)])).sum();
                            dx[idx(j)] = y[idx(j)] * spread;
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = ops::axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &inp in inputs {
                    let len = self.value(inp).shape()[*axis];
                    if wants(inp) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g[base..base + len * inner]);
                        }
                        accumulate(grads, inp, d);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let src_shape = self.value(*x).shape();
                let (outer, full, inner) = ops::axis_split(src_shape, *axis);
                let len = node.value.shape()[*axis];
                let mut d = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    d[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(grads, *x, d);
            }
            Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
            Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = ops::axis_split(self.value(*x).shape(), *axis);
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            d[(o * len + j) * inner + i] = g[o * inner + i] / len as f64;
                        }
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::Sum(x) => accumulate(grads, *x, vec![g[0]; self.value(*x).numel()]),
            Op::Pool { x, groups, out_len } => {
                let (rows, d) = self.value(*x).dims2()?;
                let l_in = rows / groups;
                let mut dx = vec![0.0; rows * d];
                for grp in 0..*groups {
                    for j in 0..*out_len {
                        let (start, end) = ops::pool_bin(j, l_in, *out_len);
                        let count = (end - start) as f64;
                        let grow = &g[(grp * out_len + j) * d..(grp * out_len + j + 1) * d];
                        for r in start..end {
                            let dst = &mut dx[(grp * l_in + r) * d..(grp * l_in + r + 1) * d];
                            dst.iter_mut().zip(grow).for_each(|(a, v)| *a += v / count);
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                dims,
                scale,
                probs,
            } => {
                let (dq, dk, dv) = ops::attention_core_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    probs,
                    g,
                    *dims,
                    *scale,
                );
                if wants(*q) {
                    accumulate(grads, *q, dq);
                }
                if wants(*k) {
                    accumulate(grads, *k, dk);
                }
                if wants(*v) {
                    accumulate(grads, *v, dv);
                }
            }
            Op::MeanOf(inputs) => {
                let n = inputs.len() as f64;
                for &inp in inputs {
                    if wants(inp) {
                        accumulate(grads, inp, g.iter().map(|v| v / n).collect());
                    }
                }
            }
            Op::SquaredError { pred, target, denom } => {
                let d = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(p, t)| 2.0 * (p - t) / denom * g[0])
                    .collect();
                accumulate(grads, *pred, d);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let rows = labels.len();
                let classes = probs.len() / rows;
                let mut d = probs.clone();
                for (r, &label) in labels.iter().enumerate() {
                    d[r * classes + label] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= g[0] / rows as f64);
                accumulate(grads, *logits, d);
            }
        }
        Ok(())
    }

    /// Differentiates `loss` and accumulates into every parameter of `store`. Parameters that
    /// were never read (or do not influence the loss) receive zeros.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (name, tensor) in store.iter_mut() {
            tensor.ensure_grad();
            if let Some(g) = self.params.get(name).and_then(|&v| grads.get(v)) {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(XfiError::non_finite(format!("backward ({name})")));
                }
                tensor.accumulate_grad(g);
            }
        }
        Ok(())
    }
}
