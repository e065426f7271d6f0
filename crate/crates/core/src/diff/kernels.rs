//! Forward kernels shared by the recording tape and the eager executor.
//!
//! Every function validates shapes and returns a fresh tensor. Backward rules
//! live next to the tape, which owns the cached activations they need.

use crate::diff::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Strided read-only matrix view handed to the GEMM kernel.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> View<'a> {
    pub(crate) fn of(data: &'a [f64], rows: usize, cols: usize) -> Self {
        View {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub(crate) fn t(self) -> Self {
        View {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c (+)= a · b` with `c` row-major `[a.rows × b.cols]`.
pub(crate) fn gemm(a: View<'_>, b: View<'_>, c: &mut [f64], accumulate: bool) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    debug_assert_eq!(k, b.rows);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the views cover exactly rows*cols elements reachable through
    // their strides, and `c` holds m*n contiguous row-major elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.is_matrix() {
        Ok(t.dims2())
    } else {
        Err(Error::Contract(format!(
            "{op} needs a matrix, got shape {:?}",
            t.shape()
        )))
    }
}

fn require_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(op, a.shape(), b.shape()))
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix("matmul", a)?;
    let (k2, n) = require_matrix("matmul", b)?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    gemm(View::of(a.data(), m, k), View::of(b.data(), k, n), &mut out, false);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
pub fn matmul_t(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix("matmul_t", a)?;
    let (n, k2) = require_matrix("matmul_t", b)?;
    if k != k2 {
        return Err(Error::shape("matmul_t", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    gemm(
        View::of(a.data(), m, k),
        View::of(b.data(), n, k).t(),
        &mut out,
        false,
    );
    Ok(Tensor::from_parts(vec![m, n], out))
}

fn zip_with(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    require_same(op, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("mul", a, b, |x, y| x * y)
}

/// Adds the vector `bias: [n]` to every row of `a: [m×n]`.
pub fn add_row(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = require_matrix("add_row", a)?;
    if bias.shape() != [n] {
        return Err(Error::shape("add_row", a.shape(), bias.shape()));
    }
    let mut out = a.data().to_vec();
    for row in out.chunks_exact_mut(n) {
        for (x, b) in row.iter_mut().zip(bias.data()) {
            *x += b;
        }
    }
    debug_assert_eq!(out.len(), m * n);
    Ok(Tensor::from_parts(a.shape().to_vec(), out))
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    a.map(|x| c * x)
}

pub fn gelu(a: &Tensor) -> Tensor {
    a.map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn exp(a: &Tensor) -> Tensor {
    a.map(f64::exp)
}

/// `log(1 + eˣ)` without overflow.
pub fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(a: &Tensor) -> Tensor {
    a.map(softplus_scalar)
}

/// Row statistics kept for the layer-norm backward pass.
pub(crate) struct NormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm_cached(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
) -> Result<(Tensor, NormCache)> {
    let (m, d) = require_matrix("layer_norm", x)?;
    if gain.shape() != [d] {
        return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
    }
    if bias.shape() != [d] {
        return Err(Error::shape("layer_norm", x.shape(), bias.shape()));
    }
    let mut xhat = vec![0.0; m * d];
    let mut rstd = vec![0.0; m];
    let mut out = vec![0.0; m * d];
    for i in 0..m {
        let row = &x.data()[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            out[i * d + j] = h * gain.data()[j] + bias.data()[j];
        }
    }
    Ok((Tensor::from_parts(vec![m, d], out), NormCache { xhat, rstd }))
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    layer_norm_cached(x, gain, bias).map(|(t, _)| t)
}

/// Rows of `table: [V×d]` selected by `ids`.
pub fn embedding(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (v, d) = require_matrix("embedding", table)?;
    if ids.is_empty() {
        return Err(Error::Contract("embedding of an empty id list".into()));
    }
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(Error::Contract(format!(
                "embedding id {id} out of range for table with {v} rows"
            )));
        }
        out.extend_from_slice(table.row(id));
    }
    Ok(Tensor::from_parts(vec![ids.len(), d], out))
}

/// Row-wise softmax of a square score matrix where row `i` only sees columns `0..=i`.
pub fn causal_softmax(a: &Tensor) -> Result<Tensor> {
    let (m, n) = require_matrix("causal_softmax", a)?;
    if m != n {
        return Err(Error::shape("causal_softmax", a.shape(), &[m, m]));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &a.data()[i * n..i * n + i + 1];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[i * n..i * n + i + 1];
        let mut total = 0.0;
        for (o, &x) in dst.iter_mut().zip(row) {
            *o = (x - max).exp();
            total += *o;
        }
        for o in dst.iter_mut() {
            *o /= total;
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Log-softmax over the last axis, max-shifted.
pub fn log_softmax(a: &Tensor) -> Tensor {
    let (_, n) = a.dims2();
    let mut out = a.data().to_vec();
    for row in out.chunks_exact_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        for x in row.iter_mut() {
            *x -= lse;
        }
    }
    Tensor::from_parts(a.shape().to_vec(), out)
}

/// Columns `start..start + len` of a matrix.
pub fn cols(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (m, n) = require_matrix("cols", a)?;
    if len == 0 || start + len > n {
        return Err(Error::Contract(format!(
            "column range {start}..{} outside matrix with {n} columns",
            start + len
        )));
    }
    let mut out = Vec::with_capacity(m * len);
    for i in 0..m {
        out.extend_from_slice(&a.data()[i * n + start..i * n + start + len]);
    }
    Ok(Tensor::from_parts(vec![m, len], out))
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
    let (m, _) = require_matrix("concat_cols", first)?;
    let mut total = 0;
    for p in parts {
        let (pm, pn) = require_matrix("concat_cols", p)?;
        if pm != m {
            return Err(Error::shape("concat_cols", first.shape(), p.shape()));
        }
        total += pn;
    }
    let mut out = Vec::with_capacity(m * total);
    for i in 0..m {
        for p in parts {
            out.extend_from_slice(p.row(i));
        }
    }
    Ok(Tensor::from_parts(vec![m, total], out))
}

/// `out[t] = a[t, idx[t]]`.
pub fn gather(a: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (m, n) = require_matrix("gather", a)?;
    if idx.len() != m {
        return Err(Error::shape("gather", a.shape(), &[idx.len()]));
    }
    let mut out = Vec::with_capacity(m);
    for (t, &j) in idx.iter().enumerate() {
        if j >= n {
            return Err(Error::Contract(format!("gather index {j} >= {n}")));
        }
        out.push(a.data()[t * n + j]);
    }
    Ok(Tensor::from_parts(vec![m], out))
}

pub fn row_sum(a: &Tensor) -> Result<Tensor> {
    let (m, n) = require_matrix("row_sum", a)?;
    let out = a.data().chunks_exact(n).map(|r| r.iter().sum()).collect();
    debug_assert_eq!(m, a.numel() / n);
    Ok(Tensor::from_parts(vec![m], out))
}

pub fn sum(a: &Tensor) -> Tensor {
    Tensor::scalar(a.sum())
}

pub fn masked_sum(a: &Tensor, mask: &[bool]) -> Result<Tensor> {
    if a.shape() != [mask.len()] {
        return Err(Error::shape("masked_sum", a.shape(), &[mask.len()]));
    }
    let s = a
        .data()
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(x, _)| x)
        .sum();
    Ok(Tensor::scalar(s))
}

/// Mean of `-log_probs[t, target_t]` over the positions where `mask` is set.
pub fn cross_entropy(log_probs: &Tensor, targets: &[usize], mask: &[bool]) -> Result<Tensor> {
    let (m, v) = require_matrix("cross_entropy", log_probs)?;
    if targets.len() != m || mask.len() != m {
        return Err(Error::shape(
            "cross_entropy",
            log_probs.shape(),
            &[targets.len(), mask.len()],
        ));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 0..m {
        if !mask[t] {
            continue;
        }
        let y = targets[t];
        if y >= v {
            return Err(Error::Contract(format!("target {y} outside vocabulary {v}")));
        }
        total -= log_probs.data()[t * v + y];
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok(Tensor::scalar(total / count as f64))
}
