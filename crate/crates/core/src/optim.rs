//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros = || {
            params
                .ids()
                .map(|id| Tensor::zeros(params.value(id).dims()))
                .collect::<Vec<_>>()
        };
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Apply one update from the accumulated gradients, then zero them.
///
/// A parameter whose gradient is identically zero this step is skipped
/// entirely, moments included, so unused parameters stay put.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    if state.first.len() != params.len() {
        return Err(Error::Shape(format!(
            "optimizer tracks {} parameters, store has {}",
            state.first.len(),
            params.len()
        )));
    }
    for id in params.ids() {
        if !params.grad(id).is_finite() {
            return Err(Error::Divergence {
                param: params.name(id).to_string(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for id in params.ids() {
        if params.grad(id).data().iter().all(|&g| g == 0.0) {
            continue;
        }
        let grad = params.grad(id).clone();
        let m = state.first[id].data_mut();
        let v = state.second[id].data_mut();
        let w = params.value_mut(id).data_mut();
        for k in 0..grad.len() {
            let g = grad.data()[k];
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g;
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g * g;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            w[k] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    params.zero_grads();
    Ok(())
}

/// Rescale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params
        .ids()
        .map(|id| params.grad(id).data().iter().map(|g| g * g).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm.is_finite() && norm > max_norm {
        params.scale_grads(max_norm / norm);
    }
    norm
}
