use crate::diff::Tensor;
use crate::error::Result;

/// Executes tensor operations, either recording them for differentiation
/// ([`Tape`](crate::diff::Tape)) or evaluating them directly
/// ([`Eager`](crate::diff::Eager)).
///
/// Model code is written once against this trait; the same forward pass then
/// serves training (recorded) and reference/inference passes (not recorded).
pub trait Exec {
    type Value: Clone;

    /// Introduces a leaf. `trainable` leaves receive gradients when recorded.
    fn leaf(&mut self, t: &Tensor, trainable: bool) -> Self::Value;

    fn constant(&mut self, t: Tensor) -> Self::Value;

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor;

    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    /// `a · bᵀ`.
    fn matmul_t(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn add_row(&mut self, a: &Self::Value, bias: &Self::Value) -> Result<Self::Value>;
    fn scale(&mut self, a: &Self::Value, c: f64) -> Self::Value;
    fn gelu(&mut self, a: &Self::Value) -> Self::Value;
    fn exp(&mut self, a: &Self::Value) -> Self::Value;
    fn softplus(&mut self, a: &Self::Value) -> Self::Value;
    fn layer_norm(
        &mut self,
        x: &Self::Value,
        gain: &Self::Value,
        bias: &Self::Value,
    ) -> Result<Self::Value>;
    fn embedding(&mut self, table: &Self::Value, ids: &[usize]) -> Result<Self::Value>;
    fn causal_softmax(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn log_softmax(&mut self, a: &Self::Value) -> Self::Value;
    fn cols(&mut self, a: &Self::Value, start: usize, len: usize) -> Result<Self::Value>;
    fn concat_cols(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;
    fn gather(&mut self, a: &Self::Value, idx: &[usize]) -> Result<Self::Value>;
    fn row_sum(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn sum(&mut self, a: &Self::Value) -> Self::Value;
    fn masked_sum(&mut self, a: &Self::Value, mask: &[bool]) -> Result<Self::Value>;
    fn cross_entropy(
        &mut self,
        log_probs: &Self::Value,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Self::Value>;
}
