//! Tape-style reverse-mode automatic differentiation.
//!
//! Forward code is written once against [`Exec`]. Running it on a [`Graph`]
//! records every op for [`Graph::backward`]; running it on [`Eager`] only
//! computes values. Both share the kernels in [`kernels`].

mod graph;
pub mod kernels;

pub use graph::{Graph, Var};
pub use kernels::BatchStats;

use crate::error::Result;
use crate::tensor::Tensor;

/// Operation set used by model forward passes.
pub trait Exec {
    type Value: Clone;

    /// Wrap an input that never receives a gradient.
    fn constant(&mut self, t: Tensor) -> Self::Value;
    fn tensor<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor;

    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    /// Elementwise add, or per-channel bias add when `b` is 1-D.
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sum(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn relu(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn conv2d(
        &mut self,
        x: &Self::Value,
        kernel: &Self::Value,
        stride: usize,
        padding: usize,
    ) -> Result<Self::Value>;
    fn avgpool2d(&mut self, x: &Self::Value, k: usize) -> Result<Self::Value>;
    fn flatten(&mut self, x: &Self::Value) -> Result<Self::Value>;
    /// Mean cross-entropy of `softmax(logits)` against integer labels.
    fn softmax_cross_entropy(&mut self, logits: &Self::Value, labels: &[usize])
        -> Result<Self::Value>;
    fn batch_norm_train(
        &mut self,
        x: &Self::Value,
        gamma: &Self::Value,
        beta: &Self::Value,
        eps: f64,
    ) -> Result<(Self::Value, BatchStats)>;
    fn batch_norm_eval(
        &mut self,
        x: &Self::Value,
        gamma: &Self::Value,
        beta: &Self::Value,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Self::Value>;
}

/// Non-recording evaluator.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl Exec for Eager {
    type Value = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn tensor<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }

    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        kernels::matmul(a, b)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        kernels::add(a, b)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        kernels::mul(a, b)
    }

    fn sum(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(kernels::sum(x))
    }

    fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(kernels::relu(x))
    }

    fn conv2d(&mut self, x: &Tensor, k: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        kernels::conv2d(x, k, stride, padding)
    }

    fn avgpool2d(&mut self, x: &Tensor, k: usize) -> Result<Tensor> {
        kernels::avgpool2d(x, k)
    }

    fn flatten(&mut self, x: &Tensor) -> Result<Tensor> {
        kernels::flatten(x)
    }

    fn softmax_cross_entropy(&mut self, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
        kernels::softmax_cross_entropy(logits, labels).map(|(loss, _)| loss)
    }

    fn batch_norm_train(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<(Tensor, BatchStats)> {
        kernels::batch_norm_train(x, gamma, beta, eps).map(|(y, _, stats)| (y, stats))
    }

    fn batch_norm_eval(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Tensor> {
        kernels::batch_norm_eval(x, gamma, beta, mean, var, eps).map(|(y, _)| y)
    }
}

/// Evaluate `f` without recording anything.
pub fn no_grad_eval<F>(f: F, inputs: &[Tensor]) -> Result<Tensor>
where
    F: FnOnce(&mut Eager, Vec<Tensor>) -> Result<Tensor>,
{
    f(&mut Eager, inputs.to_vec())
}
