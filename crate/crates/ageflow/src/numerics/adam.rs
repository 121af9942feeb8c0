//! Adam update rule with bias correction, plus the optimizer that applies
//! it across a named parameter set with gradient accumulation.

use std::collections::HashMap;

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates and step counter for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub m: Tensor<F>,
    pub v: Tensor<F>,
    pub t: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(shape: &[usize]) -> Self {
        AdamState { m: Tensor::zeros(shape), v: Tensor::zeros(shape), t: 0 }
    }
}

/// One bias-corrected Adam step. Returns the updated parameter and state.
pub fn adam_update<F: Scalar>(
    param: &Tensor<F>,
    grad: &Tensor<F>,
    state: &AdamState<F>,
    lr: f64,
    name: &str,
) -> Result<(Tensor<F>, AdamState<F>)> {
    if param.shape() != grad.shape() {
        return Err(Error::shape(format!(
            "adam_update {name}: param {:?} vs grad {:?}",
            param.shape(),
            grad.shape()
        )));
    }
    grad.ensure_finite(name)?;

    let b1 = F::from_f64(ADAM_BETA1);
    let b2 = F::from_f64(ADAM_BETA2);
    let eps = F::from_f64(ADAM_EPS);
    let t = state.t + 1;
    let m = state.m.zip_map(grad, |m, g| b1 * m + (F::one() - b1) * g);
    let v = state.v.zip_map(grad, |v, g| b2 * v + (F::one() - b2) * g * g);
    let corr1 = F::from_f64(1.0 - ADAM_BETA1.powi(t as i32));
    let corr2 = F::from_f64(1.0 - ADAM_BETA2.powi(t as i32));
    let lr_f = F::from_f64(lr);

    let mut new_param = param.clone();
    for ((p, &mi), &vi) in new_param.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
        let m_hat = mi / corr1;
        let v_hat = vi / corr2;
        *p = *p - lr_f * m_hat / (v_hat.sqrt() + eps);
    }
    Ok((new_param, AdamState { m, v, t }))
}

/// Adam across a set of named parameters; state keyed by name.
pub struct AdamOptimizer<F> {
    lr: f64,
    states: HashMap<String, AdamState<F>>,
}

impl<F: Scalar> AdamOptimizer<F> {
    pub fn new(lr: f64) -> Self {
        AdamOptimizer { lr, states: HashMap::new() }
    }

    /// Apply one step to every visited parameter. `grad_scale` folds the
    /// accumulation count into the gradient (1/num_micro_batches).
    pub fn step(
        &mut self,
        params: Vec<(String, &mut super::param::Param<F>)>,
        grad_scale: f64,
    ) -> Result<()> {
        let scale = F::from_f64(grad_scale);
        for (name, param) in params {
            let grad = param.grad.scale(scale);
            let state = self
                .states
                .entry(name.clone())
                .or_insert_with(|| AdamState::new(param.value.shape()));
            let (new_value, new_state) = adam_update(&param.value, &grad, state, self.lr, &name)?;
            param.value = new_value;
            *state = new_state;
            param.grad.fill(F::zero());
        }
        Ok(())
    }
}
