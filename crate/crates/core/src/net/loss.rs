use serde::{Deserialize, Serialize};

use super::layers::sigmoid;
use super::model::SiameseModel;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::patches::SamplePair;

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the contrastive energy term; 0 gives pure classification.
    pub lambda_contrastive: f64,
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_contrastive: 0.1, margin: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_contrastive >= 0.0 && self.lambda_contrastive.is_finite()) {
            return Err(Error::InvalidParameter(format!("lambda_contrastive {} must be >= 0", self.lambda_contrastive)));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::InvalidParameter(format!("margin {} must be > 0", self.margin)));
        }
        Ok(())
    }
}

/// Gradients laid out like [`SiameseModel::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &SiameseModel) -> Self {
        Self { tensors: model.params().iter().map(|p| vec![0.0; p.len()]).collect() }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Binary cross-entropy on a clamped probability.
pub fn bce(p: f64, label: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

/// `y E^2 + (1 - y) max(0, margin - E)^2`.
pub fn contrastive(energy: f64, label: f64, margin: f64) -> f64 {
    let hinge = (margin - energy).max(0.0);
    label * energy * energy + (1.0 - label) * hinge * hinge
}

fn check_batch(batch: &[SamplePair]) -> Result<(usize, usize)> {
    let first = batch.first().ok_or_else(|| Error::Empty("batch".into()))?;
    let size = (first.patch_a.width, first.patch_a.height);
    for s in batch {
        for p in [&s.patch_a, &s.patch_b] {
            if (p.width, p.height) != size {
                return Err(Error::ShapeMismatch(format!(
                    "mixed patch sizes in batch: {}x{} and {}x{}",
                    size.0, size.1, p.width, p.height
                )));
            }
        }
    }
    Ok(size)
}

/// Mean batch loss without gradients.
pub fn batch_loss(model: &SiameseModel, batch: &[SamplePair], cfg: &LossConfig) -> Result<f64> {
    check_batch(batch)?;
    model.check_patch(&batch[0].patch_a)?;
    let mut total = 0.0;
    for s in batch {
        let (e1, _) = model.tower_forward(Tensor::from_patch(&s.patch_a));
        let (e2, _) = model.tower_forward(Tensor::from_patch(&s.patch_b));
        let (z, _) = model.head_forward(&e1, &e2);
        let y = s.label as f64;
        let e = super::model::energy(&e1, &e2)?;
        total += bce(sigmoid(z), y) + cfg.lambda_contrastive * contrastive(e, y, cfg.margin);
    }
    Ok(total / batch.len() as f64)
}

/// Mean batch loss and its exact gradient. Both branches backpropagate into
/// the same tower gradient storage; samples are reduced in batch order.
pub fn loss_and_grad(model: &SiameseModel, batch: &[SamplePair], cfg: &LossConfig) -> Result<(f64, Gradients)> {
    loss_grad_probs(model, batch, cfg).map(|(l, g, _)| (l, g))
}

/// [`loss_and_grad`] plus each sample's match probability.
pub fn loss_grad_probs(
    model: &SiameseModel,
    batch: &[SamplePair],
    cfg: &LossConfig,
) -> Result<(f64, Gradients, Vec<f64>)> {
    check_batch(batch)?;
    model.check_patch(&batch[0].patch_a)?;
    let mut grads = Gradients::zeros_like(model);
    let inv_n = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut probs = Vec::with_capacity(batch.len());
    for s in batch {
        let (e1, c1) = model.tower_forward(Tensor::from_patch(&s.patch_a));
        let (e2, c2) = model.tower_forward(Tensor::from_patch(&s.patch_b));
        let (z, hc) = model.head_forward(&e1, &e2);
        let y = s.label as f64;
        let p = sigmoid(z);
        probs.push(p);
        let energy = super::model::energy(&e1, &e2)?;
        total += bce(p, y) + cfg.lambda_contrastive * contrastive(energy, y, cfg.margin);

        // d BCE / dz is p - y unless the clamp is active.
        let dz = if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) { (p - y) * inv_n } else { 0.0 };
        let (mut g1, mut g2) = model.head_backward(&e1, &e2, &hc, dz, &mut grads.tensors);

        let d_energy_sq = if y > 0.5 {
            cfg.lambda_contrastive * y
        } else if energy < cfg.margin && energy > 0.0 {
            // d/dE (m - E)^2 = -2 (m - E), and dE/de = (e1 - e2) / E.
            -cfg.lambda_contrastive * (1.0 - y) * (cfg.margin - energy) / energy
        } else {
            0.0
        };
        if d_energy_sq != 0.0 {
            for ((a, b), (ga, gb)) in e1.iter().zip(&e2).zip(g1.iter_mut().zip(g2.iter_mut())) {
                let g = 2.0 * d_energy_sq * (a - b) * inv_n;
                *ga += g;
                *gb -= g;
            }
        }
        model.tower_backward(&c1, &g1, &mut grads.tensors);
        model.tower_backward(&c2, &g2, &mut grads.tensors);
    }
    Ok((total * inv_n, grads, probs))
}
