use serde::{Deserialize, Serialize};

use super::loss::Gradients;
use super::model::SiameseModel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(model: &SiameseModel) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One bias-corrected Adam update of `params` in place. `t` is the
/// 1-based step number.
pub fn adam_update(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], t: u64, h: &AdamHyper) {
    let bc1 = 1.0 - h.beta1.powi(t as i32);
    let bc2 = 1.0 - h.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
    }
}

/// Adam step over every model parameter. Updated weights are rounded to
/// `f32` so the saved model reproduces them exactly.
pub fn optimizer_step(model: &mut SiameseModel, grads: &Gradients, state: &mut AdamState, h: &AdamHyper) -> Result<()> {
    let shapes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let shaped = |t: &[Vec<f64>]| t.len() == shapes.len() && t.iter().zip(&shapes).all(|(g, &n)| g.len() == n);
    if !shaped(&grads.tensors) || !shaped(&state.m) || !shaped(&state.v) {
        return Err(Error::ShapeMismatch("gradients or optimizer state do not match model parameters".into()));
    }
    state.t += 1;
    for (i, p) in model.params_mut().into_iter().enumerate() {
        adam_update(p, &grads.tensors[i], &mut state.m[i], &mut state.v[i], state.t, h);
        p.iter_mut().for_each(|w| *w = *w as f32 as f64);
    }
    Ok(())
}
