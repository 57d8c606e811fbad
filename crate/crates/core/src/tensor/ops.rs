//! Value-level kernels. The tape records these and adds the matching backward rules.

use super::Tensor;
use crate::error::{Result, XfiError};

/// `c = alpha * a·b + beta * c` over raw strided buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass buffers whose extents cover the strided index ranges; every call
    // site below derives the strides from checked tensor shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(XfiError::InvalidArgument(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(XfiError::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), &mut out, 0.0);
    Tensor::from_parts(vec![m, n], out).check_finite("matmul")
}

fn zip_same(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(XfiError::shape(op, a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data).check_finite(op)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same("add", a, b, |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same("mul", a, b, |x, y| x * y)
}

pub fn scale(x: &Tensor, factor: f64) -> Result<Tensor> {
    let data = x.data().iter().map(|v| v * factor).collect();
    Tensor::from_parts(x.shape().to_vec(), data).check_finite("scale")
}

/// Adds a length-`n` bias to every row of an `m × n` matrix.
pub fn add_row(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, n) = x.dims2()?;
    if bias.numel() != n {
        return Err(XfiError::shape("add_row", x.shape(), bias.shape()));
    }
    let b = bias.data();
    let data = x
        .data()
        .chunks(n)
        .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data).check_finite("add_row")
}

/// `x·W + b`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let y = matmul(x, weight)?;
    match bias {
        Some(b) => add_row(&y, b),
        None => Ok(y),
    }
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// Normalized rows plus the per-row reciprocal standard deviations.
pub(crate) fn layer_norm_parts(x: &Tensor, eps: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if eps.is_nan() || eps < 0.0 {
        return Err(XfiError::InvalidArgument(format!("layer_norm eps must be >= 0, got {eps}")));
    }
    let n = *x.shape().last().unwrap_or(&1);
    let mut xhat = Vec::with_capacity(x.numel());
    let mut rstd = Vec::with_capacity(x.numel() / n);
    for row in x.data().chunks(n) {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let r = 1.0 / (var + eps).sqrt();
        if !r.is_finite() {
            return Err(XfiError::non_finite("layer_norm"));
        }
        rstd.push(r);
        xhat.extend(row.iter().map(|v| (v - mean) * r));
    }
    Ok((xhat, rstd))
}

/// Normalizes each row over the last axis, then applies `γ ⊙ x̂ + β`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let n = *x.shape().last().unwrap_or(&1);
    if gamma.numel() != n {
        return Err(XfiError::shape("layer_norm", x.shape(), gamma.shape()));
    }
    if beta.numel() != n {
        return Err(XfiError::shape("layer_norm", x.shape(), beta.shape()));
    }
    let (xhat, _) = layer_norm_parts(x, eps)?;
    let (g, b) = (gamma.data(), beta.data());
    let data = xhat
        .chunks(n)
        .flat_map(|row| row.iter().enumerate().map(move |(j, v)| v * g[j] + b[j]))
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data).check_finite("layer_norm")
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("softmax", x.shape(), axis)?;
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(XfiError::non_finite("softmax"));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (src[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[idx(j)] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Concatenates tensors along `axis`; every other dimension must match.
pub fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| XfiError::InvalidArgument("concat of zero tensors".into()))?;
    check_axis("concat", first.shape(), axis)?;
    for t in &inputs[1..] {
        let same_rank = t.shape().len() == first.shape().len();
        let others_match = same_rank
            && t
                .shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !others_match {
            return Err(XfiError::shape("concat", first.shape(), t.shape()));
        }
    }
    let (outer, _, inner) = axis_split(first.shape(), axis);
    let total_len: usize = inputs.iter().map(|t| t.shape()[axis]).sum();
    let mut data = Vec::with_capacity(outer * total_len * inner);
    for o in 0..outer {
        for t in inputs {
            let chunk = t.shape()[axis] * inner;
            data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total_len;
    Ok(Tensor::from_parts(shape, data))
}

/// Contiguous range `[start, start + len)` along `axis`.
pub fn slice_axis(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    check_axis("slice", x.shape(), axis)?;
    let (outer, full, inner) = axis_split(x.shape(), axis);
    if len == 0 || start + len > full {
        return Err(XfiError::InvalidArgument(format!(
            "slice [{start}, {}) out of range for axis of length {full}",
            start + len
        )));
    }
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, data))
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape.to_vec();
    out.remove(axis);
    if out.is_empty() {
        out.push(1);
    }
    out
}

/// Mean along `axis`; the axis is removed from the shape.
pub fn mean_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("mean", x.shape(), axis)?;
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..len {
            let row = &x.data()[(o * len + j) * inner..(o * len + j + 1) * inner];
            for (acc, v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    data.iter_mut().for_each(|v| *v /= len as f64);
    Ok(Tensor::from_parts(reduced_shape(x.shape(), axis), data))
}

pub fn sum_all(x: &Tensor) -> Tensor {
    Tensor::scalar(x.data().iter().sum())
}

/// Bin `[start, end)` for output row `j` when pooling `l_in` rows down to `l_out`.
pub fn pool_bin(j: usize, l_in: usize, l_out: usize) -> (usize, usize) {
    let start = j * l_in / l_out;
    let end = ((j + 1) * l_in).div_ceil(l_out);
    (start, end)
}

fn check_groups(op: &'static str, x: &Tensor, groups: usize) -> Result<(usize, usize)> {
    let (rows, cols) = x.dims2()?;
    if groups == 0 || rows % groups != 0 {
        return Err(XfiError::InvalidArgument(format!(
            "{op}: {rows} rows cannot be split into {groups} groups"
        )));
    }
    Ok((rows / groups, cols))
}

/// Adaptive average pooling over rows, applied independently to each of `groups`
/// equally sized row blocks.
pub fn adaptive_avg_pool_grouped(x: &Tensor, groups: usize, target_len: usize) -> Result<Tensor> {
    let (l_in, d) = check_groups("adaptive_avg_pool", x, groups)?;
    if target_len == 0 || target_len > l_in {
        return Err(XfiError::InvalidArgument(format!(
            "adaptive_avg_pool: target length {target_len} must be in 1..={l_in}"
        )));
    }
    let src = x.data();
    let mut out = vec![0.0; groups * target_len * d];
    for g in 0..groups {
        for j in 0..target_len {
            let (start, end) = pool_bin(j, l_in, target_len);
            let dst = &mut out[(g * target_len + j) * d..(g * target_len + j + 1) * d];
            for r in start..end {
                let row = &src[(g * l_in + r) * d..(g * l_in + r + 1) * d];
                for (acc, v) in dst.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            let count = (end - start) as f64;
            dst.iter_mut().for_each(|v| *v /= count);
        }
    }
    Ok(Tensor::from_parts(vec![groups * target_len, d], out))
}

/// Adaptive average pooling of an `L_in × d` matrix down to `target_len` rows.
pub fn adaptive_avg_pool(x: &Tensor, target_len: usize) -> Result<Tensor> {
    adaptive_avg_pool_grouped(x, 1, target_len)
}

/// Geometry of a grouped multi-head attention call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnDims {
    pub groups: usize,
    pub lq: usize,
    pub lk: usize,
    pub d: usize,
    pub heads: usize,
}

impl AttnDims {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

pub(crate) fn attention_dims(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    scale: f64,
    groups: usize,
) -> Result<AttnDims> {
    let (lq, d) = check_groups("attention", q, groups)?;
    let (lk, dk) = check_groups("attention", k, groups)?;
    if dk != d {
        return Err(XfiError::shape("attention", q.shape(), k.shape()));
    }
    if v.shape() != k.shape() {
        return Err(XfiError::shape("attention", k.shape(), v.shape()));
    }
    if heads == 0 || d % heads != 0 {
        return Err(XfiError::Config(format!(
            "feature width {d} is not divisible by {heads} heads"
        )));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(XfiError::Config(format!("attention scale must be > 0, got {scale}")));
    }
    Ok(AttnDims {
        groups,
        lq,
        lk,
        d,
        heads,
    })
}

/// Per-head `softmax(Q_h K_hᵀ · scale) V_h` with head outputs concatenated on the feature
/// axis. Returns the output and the attention probabilities laid out as
/// `[group][head][query][key]`.
pub(crate) fn attention_core(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    dims: AttnDims,
    scale: f64,
) -> (Vec<f64>, Vec<f64>) {
    let AttnDims {
        groups,
        lq,
        lk,
        d,
        heads,
    } = dims;
    let hd = dims.head_dim();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0; groups * lq * d];
    let mut probs = vec![0.0; groups * heads * lq * lk];
    let mut logits = vec![0.0; lk];
    for g in 0..groups {
        for h in 0..heads {
            let col = h * hd;
            for i in 0..lq {
                let qrow = &qd[(g * lq + i) * d + col..(g * lq + i) * d + col + hd];
                let mut max = f64::NEG_INFINITY;
                for (j, logit) in logits.iter_mut().enumerate() {
                    let krow = &kd[(g * lk + j) * d + col..(g * lk + j) * d + col + hd];
                    let dot: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                    *logit = dot * scale;
                    max = max.max(*logit);
                }
                let p = &mut probs[((g * heads + h) * lq + i) * lk..((g * heads + h) * lq + i + 1) * lk];
                let mut total = 0.0;
                for (pj, lj) in p.iter_mut().zip(&logits) {
                    *pj = (lj - max).exp();
                    total += *pj;
                }
                p.iter_mut().for_each(|x| *x /= total);
                let orow = &mut out[(g * lq + i) * d + col..(g * lq + i) * d + col + hd];
                for (j, pj) in p.iter().enumerate() {
                    let vrow = &vd[(g * lk + j) * d + col..(g * lk + j) * d + col + hd];
                    for (o, vv) in orow.iter_mut().zip(vrow) {
                        *o += pj * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Gradients of [`attention_core`] with respect to `(q, k, v)`.
pub(crate) fn attention_core_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &[f64],
    grad_out: &[f64],
    dims: AttnDims,
    scale: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let AttnDims {
        groups,
        lq,
        lk,
        d,
        heads,
    } = dims;
    let hd = dims.head_dim();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut dq = vec![0.0; qd.len()];
    let mut dk = vec![0.0; kd.len()];
    let mut dv = vec![0.0; vd.len()];
    let mut dp = vec![0.0; lk];
    for g in 0..groups {
        for h in 0..heads {
            let col = h * hd;
            for i in 0..lq {
                let p = &probs[((g * heads + h) * lq + i) * lk..((g * heads + h) * lq + i + 1) * lk];
                let go = &grad_out[(g * lq + i) * d + col..(g * lq + i) * d + col + hd];
                let mut weighted = 0.0;
                for j in 0..lk {
                    let vrow = &vd[(g * lk + j) * d + col..(g * lk + j) * d + col + hd];
                    dp[j] = go.iter().zip(vrow).map(|(a, b)| a * b).sum();
                    weighted += dp[j] * p[j];
                    let dvrow = &mut dv[(g * lk + j) * d + col..(g * lk + j) * d + col + hd];
                    for (acc, gg) in dvrow.iter_mut().zip(go) {
                        *acc += p[j] * gg;
                    }
                }
                let qbase = (g * lq + i) * d + col;
                for j in 0..lk {
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kbase = (g * lk + j) * d + col;
                    for c in 0..hd {
                        dq[qbase + c] += ds * kd[kbase + c];
                        dk[kbase + c] += ds * qd[qbase + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Multi-head scaled dot-product attention over already projected `q`, `k`, `v`, followed
/// by the `d × d` output projection.
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    scale: f64,
    out_proj: &Tensor,
) -> Result<Tensor> {
    let dims = attention_dims(q, k, v, heads, scale, 1)?;
    if out_proj.shape() != [dims.d, dims.d] {
        return Err(XfiError::shape("multi_head_attention", &[dims.d, dims.d], out_proj.shape()));
    }
    let (out, _) = attention_core(q, k, v, dims, scale);
    let heads_out = Tensor::from_parts(vec![dims.lq, dims.d], out).check_finite("attention")?;
    matmul(&heads_out, out_proj)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let y = relu(&t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn layer_norm_symmetric_pair() {
        let y = layer_norm(&t(&[1, 2], &[1.0, 3.0]), &Tensor::ones(&[2]), &Tensor::zeros(&[2]), 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn layer_norm_constant_row_needs_eps() {
        let x = t(&[1, 2], &[2.0, 2.0]);
        let g = Tensor::ones(&[2]);
        let b = Tensor::zeros(&[2]);
        assert!(matches!(layer_norm(&x, &g, &b, 0.0), Err(XfiError::NonFinite { .. })));
        assert_eq!(layer_norm(&x, &g, &b, 1e-5).unwrap().data(), &[0.0, 0.0]);
        assert!(layer_norm(&x, &g, &b, -1.0).is_err());
    }

    #[test]
    fn linear_identity_plus_bias() {
        let y = linear(&t(&[1, 2], &[1.0, 2.0]), &Tensor::eye(2), Some(&t(&[2], &[1.0, 1.0]))).unwrap();
        assert_eq!(y.data(), &[2.0, 3.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&t(&[2], &[0.0, 0.0]), 0).unwrap().data(), &[0.5, 0.5]);
        assert_eq!(softmax(&t(&[2], &[1000.0, 1000.0]), 0).unwrap().data(), &[0.5, 0.5]);
        let y = softmax(&t(&[2], &[1f64.ln(), 3f64.ln()]), 0).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15 && (y.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_along_first_axis_of_matrix() {
        let y = softmax(&t(&[2, 2], &[0.0, 1.0, 0.0, 3.0]), 0).unwrap();
        assert_eq!(y.data()[0], 0.5);
        assert_eq!(y.data()[2], 0.5);
        assert!((y.data()[1] + y.data()[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn concat_and_slice_along_columns() {
        let a = t(&[2, 1], &[1.0, 2.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        assert_eq!(slice_axis(&c, 1, 1, 2).unwrap(), b);
        assert!(concat(&[&a, &t(&[3, 1], &[0.0; 3])], 1).is_err());
    }

    #[test]
    fn mean_axis_reduces() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(mean_axis(&x, 0).unwrap().data(), &[2.0, 3.0]);
        assert_eq!(mean_axis(&x, 1).unwrap().data(), &[1.5, 3.5]);
    }

    #[test]
    fn pool_examples() {
        let x = t(&[4, 1], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(adaptive_avg_pool(&x, 2).unwrap().data(), &[1.5, 3.5]);
        let x = t(&[3, 1], &[1.0, 2.0, 3.0]);
        assert_eq!(adaptive_avg_pool(&x, 2).unwrap().data(), &[1.5, 2.5]);
        let x = Tensor::new(vec![8, 3], (0..24).map(f64::from).collect()).unwrap();
        assert_eq!(adaptive_avg_pool(&x, 8).unwrap(), x);
        assert!(adaptive_avg_pool(&x, 9).is_err());
    }

    #[test]
    fn grouped_pool_is_per_group() {
        let x = t(&[4, 1], &[1.0, 3.0, 10.0, 30.0]);
        assert_eq!(adaptive_avg_pool_grouped(&x, 2, 1).unwrap().data(), &[2.0, 20.0]);
    }

    #[test]
    fn attention_hand_computed() {
        let q = t(&[1, 2], &[1.0, 0.0]);
        let k = Tensor::eye(2);
        let v = Tensor::eye(2);
        let y = multi_head_attention(&q, &k, &v, 1, 1.0, &Tensor::eye(2)).unwrap();
        let e = std::f64::consts::E;
        assert!((y.data()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((y.data()[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn attention_single_key_returns_value() {
        let q = t(&[1, 4], &[0.3, -2.0, 1.0, 5.0]);
        let k = t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]);
        let v = t(&[1, 4], &[7.0, -1.0, 0.5, 2.0]);
        let y = multi_head_attention(&q, &k, &v, 2, 0.5, &Tensor::eye(4)).unwrap();
        assert_eq!(y.data(), v.data());
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let x = Tensor::zeros(&[2, 6]);
        let err = multi_head_attention(&x, &x, &x, 4, 1.0, &Tensor::eye(6)).unwrap_err();
        assert!(matches!(err, XfiError::Config(_)));
    }
}
