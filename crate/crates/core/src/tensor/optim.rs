//! SGD and Adam updates over a `ParamSet`.
//!
//! Only `requires_grad` parameters are touched; frozen parameters stay
//! bit-identical across any number of steps.

use crate::error::{CoreError, Result};
use crate::tensor::ParamSet;

/// Plain SGD: p -= lr * g. Parameters without an accumulated gradient are
/// left unchanged (zero gradient).
pub fn sgd_step(params: &mut ParamSet, lr: f32) -> Result<()> {
    if lr <= 0.0 || !lr.is_finite() {
        return Err(CoreError::contract(format!("sgd: lr must be > 0, got {lr}")));
    }
    for (_, t) in params.iter_mut() {
        if !t.requires_grad() {
            continue;
        }
        let Some(g) = t.grad() else { continue };
        let g = g.to_vec();
        for (p, gv) in t.data_mut().iter_mut().zip(&g) {
            *p -= lr * gv;
        }
    }
    Ok(())
}

/// First/second moment buffers for Adam, aligned with a specific `ParamSet`.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u32,
    beta1: f32,
    beta2: f32,
    eps: f32,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState::with_betas(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &ParamSet, beta1: f32, beta2: f32, eps: f32) -> Self {
        let m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamState {
            m,
            v,
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One bias-corrected Adam step. Gradients are read from the parameter
/// tensors' accumulated `grad` buffers.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, lr: f32) -> Result<()> {
    if lr <= 0.0 || !lr.is_finite() {
        return Err(CoreError::contract(format!(
            "adam: lr must be > 0, got {lr}"
        )));
    }
    if state.m.len() != params.len() {
        return Err(CoreError::contract(
            "adam: moment state misaligned with parameter set",
        ));
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (idx, (_, t)) in params.iter_mut().enumerate() {
        if !t.requires_grad() {
            continue;
        }
        let Some(g) = t.grad() else { continue };
        if g.len() != state.m[idx].len() {
            return Err(CoreError::contract(
                "adam: gradient length misaligned with moment state",
            ));
        }
        let g = g.to_vec();
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for (i, p) in t.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
