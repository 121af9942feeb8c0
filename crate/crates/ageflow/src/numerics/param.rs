//! Learnable tensor plus its accumulated gradient.

use super::scalar::Scalar;
use super::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Param<F> {
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

impl<F: Scalar> Param<F> {
    pub fn new(value: Tensor<F>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Param { value: Tensor::zeros(shape), grad: Tensor::zeros(shape) }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    pub fn accumulate(&mut self, g: &Tensor<F>) {
        self.grad.add_assign(g);
    }
}

/// Ordered list of (name, parameter) pairs; the traversal order is fixed by
/// construction so checkpoints and optimizer passes are deterministic.
pub type ParamRefs<'a, F> = Vec<(String, &'a mut Param<F>)>;

pub fn prefixed<'a, F>(prefix: &str, items: Vec<(&str, &'a mut Param<F>)>) -> ParamRefs<'a, F> {
    items
        .into_iter()
        .map(|(name, p)| (format!("{prefix}/{name}"), p))
        .collect()
}
