use serde::Serialize;

use super::loss::{batch_loss, loss_and_grad, Gradients, LossConfig};
use super::model::SiameseModel;
use crate::error::{Error, Result};
use crate::patches::SamplePair;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCheck {
    pub layer: String,
    pub params: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tol: f64,
    pub layers: Vec<LayerCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.layers.iter().fold(0.0, |m, l| m.max(l.max_rel_error))
    }

    pub fn layer(&self, name: &str) -> Option<&LayerCheck> {
        self.layers.iter().find(|l| l.layer == name)
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compares analytic gradients with central differences over every
/// parameter.
pub fn grad_check(
    model: &SiameseModel,
    batch: &[SamplePair],
    cfg: &LossConfig,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = loss_and_grad(model, batch, cfg)?;
    grad_check_against(model, batch, cfg, step, tol, &analytic)
}

/// As [`grad_check`], but checks the supplied gradients instead of
/// computing them.
pub fn grad_check_against(
    model: &SiameseModel,
    batch: &[SamplePair],
    cfg: &LossConfig,
    step: f64,
    tol: f64,
    analytic: &Gradients,
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(Error::InvalidParameter(format!("step {step} must be > 0")));
    }
    let shapes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    if analytic.tensors.len() != shapes.len() || analytic.tensors.iter().zip(&shapes).any(|(g, &n)| g.len() != n) {
        return Err(Error::ShapeMismatch("gradients do not match model parameters".into()));
    }
    let names = model.param_layer_names();
    let mut probe = model.clone();
    let mut layers: Vec<LayerCheck> = Vec::new();
    for (ti, &len) in shapes.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for j in 0..len {
            let orig = probe.params()[ti][j];
            probe.params_mut()[ti][j] = orig + step;
            let up = batch_loss(&probe, batch, cfg)?;
            probe.params_mut()[ti][j] = orig - step;
            let down = batch_loss(&probe, batch, cfg)?;
            probe.params_mut()[ti][j] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(analytic.tensors[ti][j], numeric));
        }
        match layers.last_mut() {
            Some(l) if l.layer == names[ti] => {
                l.params += len;
                l.max_rel_error = l.max_rel_error.max(worst);
            }
            _ => layers.push(LayerCheck { layer: names[ti].clone(), params: len, max_rel_error: worst, passed: false }),
        }
    }
    for l in &mut layers {
        l.passed = l.max_rel_error < tol;
    }
    let passed = layers.iter().all(|l| l.passed);
    Ok(GradCheckReport { step, tol, layers, passed })
}
