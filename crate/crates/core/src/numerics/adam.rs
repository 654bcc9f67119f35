//! Adam optimizer as a pure function of (params, gradient, state).

use crate::error::{Error, Result};
use crate::numerics::ParamVector;

/// Step size and moment decay settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update. Returns the new parameters and state
/// without mutating the inputs, so identical inputs always produce
/// bit-identical outputs.
pub fn adam_step(
    params: &ParamVector,
    grad: &[f64],
    state: &AdamState,
    hyper: &AdamHyper,
) -> Result<(ParamVector, AdamState)> {
    if grad.len() != params.len() {
        return Err(Error::ShapeMismatch {
            expected: params.len(),
            got: grad.len(),
            context: "adam_step gradient",
        });
    }
    if state.len() != params.len() {
        return Err(Error::ShapeMismatch {
            expected: params.len(),
            got: state.len(),
            context: "adam_step state",
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient passed to adam_step".into()));
    }

    let t = state.t + 1;
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);

    let mut m = Vec::with_capacity(params.len());
    let mut v = Vec::with_capacity(params.len());
    let mut values = Vec::with_capacity(params.len());
    for ((&p, &g), (&m0, &v0)) in params
        .values()
        .iter()
        .zip(grad)
        .zip(state.m.iter().zip(&state.v))
    {
        let mi = hyper.beta1 * m0 + (1.0 - hyper.beta1) * g;
        let vi = hyper.beta2 * v0 + (1.0 - hyper.beta2) * g * g;
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        let next = p - hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        m.push(mi);
        v.push(vi);
        values.push(next);
    }

    if values.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("parameters after adam_step".into()));
    }

    let new_params = params.with_values(values)?;
    Ok((new_params, AdamState { m, v, t }))
}
