//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::param::ParamStore;
use crate::numerics::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug)]
pub struct AdamState<F: Real> {
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState { m: zeros(), v: zeros() }
    }
}

/// Applies one Adam update at `step` (1-based) with learning rate `lr`,
/// then zeroes all gradients. Fails without touching any parameter if a
/// gradient is non-finite.
pub fn adam_step<F: Real>(
    store: &mut ParamStore<F>,
    state: &mut AdamState<F>,
    hyper: &AdamHyper,
    lr: f64,
    step: u64,
) -> Result<()> {
    if step == 0 {
        return Err(Error::InvalidArgument("adam step counter starts at 1".into()));
    }
    if state.m.len() != store.len() {
        return Err(Error::InvalidArgument("optimizer state does not match parameter set".into()));
    }
    if let Some(p) = store.iter().find(|p| !p.grad.all_finite()) {
        return Err(Error::NonFiniteGradient(p.name.clone()));
    }
    let (b1, b2) = (F::of(hyper.beta1), F::of(hyper.beta2));
    let bc1 = F::of(1.0 - hyper.beta1.powi(step as i32));
    let bc2 = F::of(1.0 - hyper.beta2.powi(step as i32));
    let lr = F::of(lr);
    let eps = F::of(hyper.eps);
    for (i, p) in store.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let grad = p.grad.data_mut();
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let g = grad[j];
            m[j] = b1 * m[j] + (F::one() - b1) * g;
            v[j] = b2 * v[j] + (F::one() - b2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
            grad[j] = F::zero();
        }
    }
    Ok(())
}
