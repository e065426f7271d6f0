//! Dynamic reverse-mode tape.
//!
//! Nodes are appended in execution order, so every node's inputs precede it
//! and a single reverse sweep is a valid topological traversal.

use crate::diff::kernels::{self, gemm, NormCache, View};
use crate::diff::{Exec, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Exp(Var),
    Softplus(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        cache: NormCache,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CausalSoftmax(Var),
    LogSoftmax(Var),
    Cols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    RowSum(Var),
    Sum(Var),
    MaskedSum {
        x: Var,
        mask: Vec<bool>,
    },
    CrossEntropy {
        log_probs: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        count: usize,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::Exp(a)
            | Op::Softplus(a)
            | Op::CausalSoftmax(a)
            | Op::LogSoftmax(a)
            | Op::RowSum(a)
            | Op::Sum(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Embedding { table, .. } => vec![*table],
            Op::Cols { x, .. } | Op::Gather { x, .. } | Op::MaskedSum { x, .. } => vec![*x],
            Op::ConcatCols(parts) => parts.clone(),
            Op::CrossEntropy { log_probs, .. } => vec![*log_probs],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    trainable: bool,
}

/// Records a computation for one backward sweep (or several; the tape is not
/// consumed by [`Tape::backward`]).
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every trainable leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like `like` when `v` did not influence the root.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    /// Number of nodes the reverse sweep processed.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut [f64] {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf; gradients flow into it.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    fn push_leaf(&mut self, t: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: trainable,
            trainable,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let inputs = op.inputs();
        debug_assert!(inputs.iter().all(|v| v.0 < self.nodes.len()));
        debug_assert!(
            value.is_finite() || inputs.iter().any(|v| !self.nodes[v.0].value.is_finite()),
            "non-finite output from finite inputs"
        );
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            trainable: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_node = self
            .nodes
            .get(root.0)
            .ok_or_else(|| Error::Contract(format!("unknown root {root:?}")))?;
        if root_node.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be a scalar, got shape {:?}",
                root_node.value.shape()
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        let mut visited = 0;

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            visited += 1;
            self.backprop_node(node, &g, &mut grads);
        }

        let mut out = Vec::with_capacity(self.nodes.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            let t = match g {
                Some(data) if node.trainable => {
                    visited += 1;
                    Some(Tensor::from_parts(node.value.shape().to_vec(), data))
                }
                _ => None,
            };
            out.push(t);
        }
        Ok(Gradients {
            grads: out,
            visited,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.val(*a).dims2();
                let n = self.val(*b).dims2().1;
                let gv = View::of(g, m, n);
                if self.wants(*a) {
                    let bv = View::of(self.val(*b).data(), k, n);
                    gemm(gv, bv.t(), accumulate(&mut grads[a.0], m * k), true);
                }
                if self.wants(*b) {
                    let av = View::of(self.val(*a).data(), m, k);
                    gemm(av.t(), gv, accumulate(&mut grads[b.0], k * n), true);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.val(*a).dims2();
                let n = self.val(*b).dims2().0;
                let gv = View::of(g, m, n);
                if self.wants(*a) {
                    let bv = View::of(self.val(*b).data(), n, k);
                    gemm(gv, bv, accumulate(&mut grads[a.0], m * k), true);
                }
                if self.wants(*b) {
                    let av = View::of(self.val(*a).data(), m, k);
                    gemm(gv.t(), av, accumulate(&mut grads[b.0], n * k), true);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    for (d, s) in accumulate(&mut grads[a.0], g.len()).iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if self.wants(*b) {
                    for (d, s) in accumulate(&mut grads[b.0], g.len()).iter_mut().zip(g) {
                        *d += sign * s;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let other = self.val(*b).data();
                    for ((d, s), o) in accumulate(&mut grads[a.0], g.len()).iter_mut().zip(g).zip(other) {
                        *d += s * o;
                    }
                }
                if self.wants(*b) {
                    let other = self.val(*a).data();
                    for ((d, s), o) in accumulate(&mut grads[b.0], g.len()).iter_mut().zip(g).zip(other) {
                        *d += s * o;
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if self.wants(*a) {
                    for (d, s) in accumulate(&mut grads[a.0], g.len()).iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if self.wants(*bias) {
                    let n = self.val(*bias).numel();
                    let gb = accumulate(&mut grads[bias.0], n);
                    for row in g.chunks_exact(n) {
                        for (d, s) in gb.iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                for (d, s) in accumulate(&mut grads[a.0], g.len()).iter_mut().zip(g) {
                    *d += c * s;
                }
            }
            Op::Gelu(a) => {
                let x = self.val(*a).data();
                for ((d, s), &xv) in accumulate(&mut grads[a.0], g.len()).iter_mut().zip(g).zip(x) {
                    *d += s * kernels::gelu_grad(xv);
                }
            }
            Op::Exp(a) => {
                for ((d, s), y) in accumulate(&mut grads[a.0], g.len()).iter_mut().zip(g).zip(out.data()) {
                    *d += s * y;
                }
            }
            Op::Softplus(a) => {
                let x = self.val(*a).data();
                for ((d, s), &xv) in accumulate(&mut grads[a.0], g.len()).iter_mut().zip(g).zip(x) {
                    *d += s * kernels::sigmoid(xv);
                }
            }
            Op::LayerNorm { x, gain, bias, cache } => {
                let (m, dim) = self.val(*x).dims2();
                let gain_v = self.val(*gain).data();
                if self.wants(*x) {
                    let gx = accumulate(&mut grads[x.0], m * dim);
                    let mut dxhat = vec![0.0; dim];
                    for i in 0..m {
                        let gr = &g[i * dim..(i + 1) * dim];
                        let xh = &cache.xhat[i * dim..(i + 1) * dim];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..dim {
                            dxhat[j] = gr[j] * gain_v[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xh[j];
                        }
                        mean_d /= dim as f64;
                        mean_dx /= dim as f64;
                        let r = cache.rstd[i];
                        for j in 0..dim {
                            gx[i * dim + j] += r * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
                if self.wants(*gain) {
                    let gg = accumulate(&mut grads[gain.0], dim);
                    for (gr, xh) in g.chunks_exact(dim).zip(cache.xhat.chunks_exact(dim)) {
                        for j in 0..dim {
                            gg[j] += gr[j] * xh[j];
                        }
                    }
                }
                if self.wants(*bias) {
                    let gb = accumulate(&mut grads[bias.0], dim);
                    for gr in g.chunks_exact(dim) {
                        for j in 0..dim {
                            gb[j] += gr[j];
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let t = self.val(*table);
                let dim = t.dims2().1;
                let gt = accumulate(&mut grads[table.0], t.numel());
                for (pos, &id) in ids.iter().enumerate() {
                    for j in 0..dim {
                        gt[id * dim + j] += g[pos * dim + j];
                    }
                }
            }
            Op::CausalSoftmax(a) => {
                let (m, n) = out.dims2();
                let ga = accumulate(&mut grads[a.0], m * n);
                for i in 0..m {
                    let y = &out.data()[i * n..i * n + i + 1];
                    let gr = &g[i * n..i * n + i + 1];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..=i {
                        ga[i * n + j] += y[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let (_, n) = out.dims2();
                let ga = accumulate(&mut grads[a.0], out.numel());
                for ((dst, gr), y) in ga
                    .chunks_exact_mut(n)
                    .zip(g.chunks_exact(n))
                    .zip(out.data().chunks_exact(n))
                {
                    let total: f64 = gr.iter().sum();
                    for j in 0..n {
                        dst[j] += gr[j] - y[j].exp() * total;
                    }
                }
            }
            Op::Cols { x, start } => {
                let (m, n) = self.val(*x).dims2();
                let len = out.dims2().1;
                let gx = accumulate(&mut grads[x.0], m * n);
                for i in 0..m {
                    for j in 0..len {
                        gx[i * n + start + j] += g[i * len + j];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = out.dims2();
                let mut offset = 0;
                for p in parts {
                    let w = self.val(*p).dims2().1;
                    if self.wants(*p) {
                        let gp = accumulate(&mut grads[p.0], m * w);
                        for i in 0..m {
                            for j in 0..w {
                                gp[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Gather { x, idx } => {
                let (m, n) = self.val(*x).dims2();
                let gx = accumulate(&mut grads[x.0], m * n);
                for (t, &j) in idx.iter().enumerate() {
                    gx[t * n + j] += g[t];
                }
            }
            Op::RowSum(a) => {
                let (m, n) = self.val(*a).dims2();
                let ga = accumulate(&mut grads[a.0], m * n);
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[i];
                    }
                }
            }
            Op::Sum(a) => {
                let n = self.val(*a).numel();
                for d in accumulate(&mut grads[a.0], n) {
                    *d += g[0];
                }
            }
            Op::MaskedSum { x, mask } => {
                let gx = accumulate(&mut grads[x.0], mask.len());
                for (d, &m) in gx.iter_mut().zip(mask) {
                    if m {
                        *d += g[0];
                    }
                }
            }
            Op::CrossEntropy {
                log_probs,
                targets,
                mask,
                count,
            } => {
                let (m, v) = self.val(*log_probs).dims2();
                let gl = accumulate(&mut grads[log_probs.0], m * v);
                let w = -g[0] / *count as f64;
                for t in 0..m {
                    if mask[t] {
                        gl[t * v + targets[t]] += w;
                    }
                }
            }
        }
    }
}

impl Exec for Tape {
    type Value = Var;

    fn leaf(&mut self, t: &Tensor, trainable: bool) -> Var {
        let trainable = trainable || t.requires_grad();
        self.push_leaf(t.clone(), trainable)
    }

    fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.val(*v)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let t = kernels::matmul(self.val(*a), self.val(*b))?;
        Ok(self.push(t, Op::MatMul(*a, *b)))
    }

    fn matmul_t(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let t = kernels::matmul_t(self.val(*a), self.val(*b))?;
        Ok(self.push(t, Op::MatMulT(*a, *b)))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let t = kernels::add(self.val(*a), self.val(*b))?;
        Ok(self.push(t, Op::Add(*a, *b)))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let t = kernels::sub(self.val(*a), self.val(*b))?;
        Ok(self.push(t, Op::Sub(*a, *b)))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let t = kernels::mul(self.val(*a), self.val(*b))?;
        Ok(self.push(t, Op::Mul(*a, *b)))
    }

    fn add_row(&mut self, a: &Var, bias: &Var) -> Result<Var> {
        let t = kernels::add_row(self.val(*a), self.val(*bias))?;
        Ok(self.push(t, Op::AddRow(*a, *bias)))
    }

    fn scale(&mut self, a: &Var, c: f64) -> Var {
        let t = kernels::scale(self.val(*a), c);
        self.push(t, Op::Scale(*a, c))
    }

    fn gelu(&mut self, a: &Var) -> Var {
        let t = kernels::gelu(self.val(*a));
        self.push(t, Op::Gelu(*a))
    }

    fn exp(&mut self, a: &Var) -> Var {
        let t = kernels::exp(self.val(*a));
        self.push(t, Op::Exp(*a))
    }

    fn softplus(&mut self, a: &Var) -> Var {
        let t = kernels::softplus(self.val(*a));
        self.push(t, Op::Softplus(*a))
    }

    fn layer_norm(&mut self, x: &Var, gain: &Var, bias: &Var) -> Result<Var> {
        let (t, cache) = kernels::layer_norm_cached(self.val(*x), self.val(*gain), self.val(*bias))?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x: *x,
                gain: *gain,
                bias: *bias,
                cache,
            },
        ))
    }

    fn embedding(&mut self, table: &Var, ids: &[usize]) -> Result<Var> {
        let t = kernels::embedding(self.val(*table), ids)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table: *table,
                ids: ids.to_vec(),
            },
        ))
    }

    fn causal_softmax(&mut self, a: &Var) -> Result<Var> {
        let t = kernels::causal_softmax(self.val(*a))?;
        Ok(self.push(t, Op::CausalSoftmax(*a)))
    }

    fn log_softmax(&mut self, a: &Var) -> Var {
        let t = kernels::log_softmax(self.val(*a));
        self.push(t, Op::LogSoftmax(*a))
    }

    fn cols(&mut self, a: &Var, start: usize, len: usize) -> Result<Var> {
        let t = kernels::cols(self.val(*a), start, len)?;
        Ok(self.push(t, Op::Cols { x: *a, start }))
    }

    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| self.val(*p)).collect();
        let t = kernels::concat_cols(&refs)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    fn gather(&mut self, a: &Var, idx: &[usize]) -> Result<Var> {
        let t = kernels::gather(self.val(*a), idx)?;
        Ok(self.push(
            t,
            Op::Gather {
                x: *a,
                idx: idx.to_vec(),
            },
        ))
    }

    fn row_sum(&mut self, a: &Var) -> Result<Var> {
        let t = kernels::row_sum(self.val(*a))?;
        Ok(self.push(t, Op::RowSum(*a)))
    }

    fn sum(&mut self, a: &Var) -> Var {
        let t = kernels::sum(self.val(*a));
        self.push(t, Op::Sum(*a))
    }

    fn masked_sum(&mut self, a: &Var, mask: &[bool]) -> Result<Var> {
        let t = kernels::masked_sum(self.val(*a), mask)?;
        Ok(self.push(
            t,
            Op::MaskedSum {
                x: *a,
                mask: mask.to_vec(),
            },
        ))
    }

    fn cross_entropy(&mut self, log_probs: &Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let t = kernels::cross_entropy(self.val(*log_probs), targets, mask)?;
        let count = mask.iter().filter(|&&m| m).count();
        Ok(self.push(
            t,
            Op::CrossEntropy {
                log_probs: *log_probs,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::from_rows(&[&[1.0, -2.0, 3.0], &[0.5, 0.0, 7.0]]).unwrap());
        let s = tape.sum(&p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[1.0; 6]);
        assert_eq!(g.visited(), 2);
    }

    #[test]
    fn zero_scaled_gradient_is_zero() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        let z = tape.scale(&p, 0.0);
        let s = tape.sum(&z);
        let g = tape.backward(s).unwrap();
        assert!(g.get(p).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let e = tape.exp(&p);
        assert!(matches!(tape.backward(e), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let c = tape.constant(Tensor::vector(vec![3.0, 4.0]).unwrap());
        let m = tape.mul(&p, &c).unwrap();
        let s = tape.sum(&m);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn repeated_backward_is_bitwise_stable() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::from_rows(&[&[0.3, -1.2], &[2.0, 0.7]]).unwrap());
        let q = tape.matmul(&p, &p).unwrap();
        let l = tape.log_softmax(&q);
        let s = tape.sum(&l);
        let a = tape.backward(s).unwrap();
        let b = tape.backward(s).unwrap();
        assert!(a.get(p).unwrap().bit_eq(b.get(p).unwrap()));
    }
}
