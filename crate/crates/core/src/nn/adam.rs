use ndarray::Zip;

use super::{Gradients, NetworkParams};
use crate::error::{Error, Result};

/// Moment estimates and coefficients for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: NetworkParams,
    pub v: NetworkParams,
    pub t: u64,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Fresh state with the usual coefficients (0.9, 0.999, 1e-8).
    pub fn new(params: &NetworkParams, alpha: f64) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            alpha,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam step that *descends* along `grads`.
pub fn adam_step(params: &mut NetworkParams, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&state.m) || !params.same_shape(&state.v) {
        return Err(Error::Shape("adam: parameter, gradient and moment shapes differ".into()));
    }
    state.t += 1;
    let (b1, b2, eps, alpha) = (state.beta1, state.beta2, state.epsilon, state.alpha);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);

    let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= alpha * m_hat / (v_hat.sqrt() + eps);
    };
    for (((p, g), m), v) in params
        .layers_mut()
        .zip(grads.layers())
        .zip(state.m.layers_mut())
        .zip(state.v.layers_mut())
    {
        Zip::from(&mut p.weight)
            .and(&mut m.weight)
            .and(&mut v.weight)
            .and(&g.weight)
            .for_each(|p, m, v, &g| update(p, m, v, g));
        Zip::from(&mut p.bias)
            .and(&mut m.bias)
            .and(&mut v.bias)
            .and(&g.bias)
            .for_each(|p, m, v, &g| update(p, m, v, g));
    }
    Ok(())
}
