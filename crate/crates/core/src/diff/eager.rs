use std::rc::Rc;

use crate::diff::{kernels, Exec, Tensor};
use crate::error::Result;

/// Evaluates operations immediately and records nothing.
///
/// Used for the reference (LoRA-disabled) pass, finite-difference oracles and
/// decoding. Intermediate values are dropped as soon as their handles are.
#[derive(Debug, Default)]
pub struct Eager;

impl Eager {
    pub fn new() -> Self {
        Eager
    }
}

fn wrap(t: Tensor) -> Rc<Tensor> {
    Rc::new(t)
}

impl Exec for Eager {
    type Value = Rc<Tensor>;

    fn leaf(&mut self, t: &Tensor, _trainable: bool) -> Rc<Tensor> {
        Rc::new(t.clone())
    }

    fn constant(&mut self, t: Tensor) -> Rc<Tensor> {
        Rc::new(t)
    }

    fn value<'a>(&'a self, v: &'a Rc<Tensor>) -> &'a Tensor {
        v
    }

    fn matmul(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        kernels::matmul(a, b).map(wrap)
    }

    fn matmul_t(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        kernels::matmul_t(a, b).map(wrap)
    }

    fn add(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        kernels::add(a, b).map(wrap)
    }

    fn sub(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        kernels::sub(a, b).map(wrap)
    }

    fn mul(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        kernels::mul(a, b).map(wrap)
    }

    fn add_row(&mut self, a: &Rc<Tensor>, bias: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        kernels::add_row(a, bias).map(wrap)
    }

    fn scale(&mut self, a: &Rc<Tensor>, c: f64) -> Rc<Tensor> {
        wrap(kernels::scale(a, c))
    }

    fn gelu(&mut self, a: &Rc<Tensor>) -> Rc<Tensor> {
        wrap(kernels::gelu(a))
    }

    fn exp(&mut self, a: &Rc<Tensor>) -> Rc<Tensor> {
        wrap(kernels::exp(a))
    }

    fn softplus(&mut self, a: &Rc<Tensor>) -> Rc<Tensor> {
        wrap(kernels::softplus(a))
    }

    fn layer_norm(
        &mut self,
        x: &Rc<Tensor>,
        gain: &Rc<Tensor>,
        bias: &Rc<Tensor>,
    ) -> Result<Rc<Tensor>> {
        kernels::layer_norm(x, gain, bias).map(wrap)
    }

    fn embedding(&mut self, table: &Rc<Tensor>, ids: &[usize]) -> Result<Rc<Tensor>> {
        kernels::embedding(table, ids).map(wrap)
    }

    fn causal_softmax(&mut self, a: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        kernels::causal_softmax(a).map(wrap)
    }

    fn log_softmax(&mut self, a: &Rc<Tensor>) -> Rc<Tensor> {
        wrap(kernels::log_softmax(a))
    }

    fn cols(&mut self, a: &Rc<Tensor>, start: usize, len: usize) -> Result<Rc<Tensor>> {
        kernels::cols(a, start, len).map(wrap)
    }

    fn concat_cols(&mut self, parts: &[Rc<Tensor>]) -> Result<Rc<Tensor>> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| p.as_ref()).collect();
        kernels::concat_cols(&refs).map(wrap)
    }

    fn gather(&mut self, a: &Rc<Tensor>, idx: &[usize]) -> Result<Rc<Tensor>> {
        kernels::gather(a, idx).map(wrap)
    }

    fn row_sum(&mut self, a: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        kernels::row_sum(a).map(wrap)
    }

    fn sum(&mut self, a: &Rc<Tensor>) -> Rc<Tensor> {
        wrap(kernels::sum(a))
    }

    fn masked_sum(&mut self, a: &Rc<Tensor>, mask: &[bool]) -> Result<Rc<Tensor>> {
        kernels::masked_sum(a, mask).map(wrap)
    }

    fn cross_entropy(
        &mut self,
        log_probs: &Rc<Tensor>,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Rc<Tensor>> {
        kernels::cross_entropy(log_probs, targets, mask).map(wrap)
    }
}
