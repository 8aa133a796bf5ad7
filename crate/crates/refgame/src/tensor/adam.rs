//! Adam with bias correction, one state per parameter tensor.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers and the shared step counter for one tensor.
#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    m: Vec<S>,
    v: Vec<S>,
    step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![S::zero(); len],
            v: vec![S::zero(); len],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update of `params` in place.
///
/// The whole gradient is checked for finiteness first and nothing is
/// written on failure, so a diverged step can never corrupt the parameters
/// or the optimizer state. With `lr == 0` the parameters are untouched
/// (the moment buffers still advance).
pub fn adam_step<S: Scalar>(
    params: &mut [S],
    grad: &[S],
    state: &mut AdamState<S>,
    hyper: &AdamHyper,
) -> Result<()> {
    if params.len() != grad.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam buffers disagree: {} params, {} grads, {} moments",
            params.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::numeric("adam", "non-finite gradient"));
    }
    let b1 = S::from_real(hyper.beta1);
    let b2 = S::from_real(hyper.beta2);
    let eps = S::from_real(hyper.eps);
    state.step += 1;
    let t = state.step as i32;
    let corr1 = S::one() - b1.powi(t);
    let corr2 = S::one() - b2.powi(t);
    let lr = S::from_real(hyper.lr);
    for ((p, &g), (m, v)) in params
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = b1 * *m + (S::one() - b1) * g;
        *v = b2 * *v + (S::one() - b2) * g * g;
        let mhat = *m / corr1;
        let vhat = *v / corr2;
        *p = *p - lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}
