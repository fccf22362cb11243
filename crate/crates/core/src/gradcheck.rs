//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::ParamStore;

/// Denominator floor so near-zero gradients are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Largest relative error between the tape gradient and
/// `(f(w+ε) − f(w−ε)) / 2ε`, over every element of every parameter.
/// The store is restored before returning.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new();
        let loss = f(&tape, store)?;
        let grads = loss.backward();
        store.zero_grads();
        store.accumulate(&grads);
        store
            .ids()
            .map(|id| store.grad(id).clone())
            .collect::<Vec<_>>()
    };
    store.zero_grads();

    let eval = |store: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        Ok(f(&tape, store)?.item())
    };

    let mut worst = 0.0f64;
    for id in store.ids().collect::<Vec<_>>() {
        for k in 0..store.value(id).len() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + eps;
            let plus = eval(store);
            store.value_mut(id).data_mut()[k] = orig - eps;
            let minus = eval(store);
            store.value_mut(id).data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[id].data()[k], numeric));
        }
    }
    Ok(worst)
}
