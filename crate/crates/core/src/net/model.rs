use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    global_avg_pool, global_avg_pool_backward, maxpool2, maxpool2_backward, relu_backward, relu_in_place, sigmoid,
    Conv2d, Dense,
};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::patches::Patch;

pub const MIN_PATCH_SIDE: usize = 8;

/// Layer widths of the Siamese network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Output channels of each 3x3 conv; every conv but the last is
    /// followed by 2x2 max pooling.
    pub conv_channels: Vec<usize>,
    pub embed_dim: usize,
    pub head_hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { conv_channels: vec![8, 16, 32], embed_dim: 64, head_hidden: 32 }
    }
}

impl ArchConfig {
    /// Reduced widths for gradient checking.
    pub fn tiny() -> Self {
        Self { conv_channels: vec![2, 2, 2], embed_dim: 4, head_hidden: 3 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) || self.embed_dim == 0 || self.head_hidden == 0 {
            return Err(Error::InvalidParameter(format!("invalid architecture {self:?}")));
        }
        if self.conv_channels.len() > 4 {
            return Err(Error::InvalidParameter("at most 4 conv layers (8 px patches must survive pooling)".into()));
        }
        Ok(())
    }
}

/// Shared branch `G_w`: conv stack, global average pooling, projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Tower {
    pub convs: Vec<Conv2d>,
    pub proj: Dense,
}

/// Metric head on `|e1 - e2|`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub hidden: Dense,
    pub out: Dense,
}

/// Both branches run through the single `tower`; there is no second copy
/// of the branch weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SiameseModel {
    arch: ArchConfig,
    pub tower: Tower,
    pub head: Head,
}

/// Intermediate values of one tower pass, kept for backpropagation.
pub(crate) struct TowerCache {
    conv_inputs: Vec<Tensor>,
    conv_outputs: Vec<Tensor>,
    pool_args: Vec<Vec<usize>>,
    pooled_features: Vec<f64>,
}

pub(crate) struct HeadCache {
    diff: Vec<f64>,
    hidden: Vec<f64>,
}

impl SiameseModel {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut c_in = 1;
        for &c in &arch.conv_channels {
            convs.push(Conv2d::init(c_in, c, &mut rng));
            c_in = c;
        }
        let proj = Dense::init(c_in, arch.embed_dim, &mut rng);
        let hidden = Dense::init(arch.embed_dim, arch.head_hidden, &mut rng);
        let out = Dense::init(arch.head_hidden, 1, &mut rng);
        Ok(Self { arch, tower: Tower { convs, proj }, head: Head { hidden, out } })
    }

    /// All weights and biases zero.
    pub fn zeros(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        let mut convs = Vec::new();
        let mut c_in = 1;
        for &c in &arch.conv_channels {
            convs.push(Conv2d::zeros(c_in, c));
            c_in = c;
        }
        Ok(Self {
            tower: Tower { convs, proj: Dense::zeros(c_in, arch.embed_dim) },
            head: Head { hidden: Dense::zeros(arch.embed_dim, arch.head_hidden), out: Dense::zeros(arch.head_hidden, 1) },
            arch,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn embed_dim(&self) -> usize {
        self.arch.embed_dim
    }

    /// Parameter tensors in declaration order: each conv (weight, bias),
    /// tower projection, head hidden, head output.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::new();
        for c in &self.tower.convs {
            v.push(&c.weight);
            v.push(&c.bias);
        }
        for d in [&self.tower.proj, &self.head.hidden, &self.head.out] {
            v.push(&d.weight);
            v.push(&d.bias);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        for c in &mut self.tower.convs {
            v.push(&mut c.weight);
            v.push(&mut c.bias);
        }
        for d in [&mut self.tower.proj, &mut self.head.hidden, &mut self.head.out] {
            v.push(&mut d.weight);
            v.push(&mut d.bias);
        }
        v
    }

    /// Layer name for each entry of [`params`](Self::params).
    pub fn param_layer_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.tower.convs.len() {
            names.push(format!("conv{}", i + 1));
            names.push(format!("conv{}", i + 1));
        }
        for n in ["tower.dense", "head.hidden", "head.out"] {
            names.push(n.to_string());
            names.push(n.to_string());
        }
        names
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Rounds every parameter to the nearest `f32`, the precision of the
    /// model file.
    pub fn round_to_f32(&mut self) {
        for p in self.params_mut() {
            p.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub(crate) fn check_patch(&self, patch: &Patch) -> Result<()> {
        if patch.width < MIN_PATCH_SIDE || patch.height < MIN_PATCH_SIDE {
            return Err(Error::ImageTooSmall(format!(
                "patch {}x{} below the {MIN_PATCH_SIDE} px minimum",
                patch.width, patch.height
            )));
        }
        Ok(())
    }

    /// Embedding `G_w(patch)`; length `embed_dim` for any patch size.
    pub fn embed(&self, patch: &Patch) -> Result<Vec<f64>> {
        self.check_patch(patch)?;
        Ok(self.tower_forward(Tensor::from_patch(patch)).0)
    }

    pub(crate) fn tower_forward(&self, input: Tensor) -> (Vec<f64>, TowerCache) {
        let n = self.tower.convs.len();
        let mut cache = TowerCache {
            conv_inputs: Vec::with_capacity(n),
            conv_outputs: Vec::with_capacity(n),
            pool_args: Vec::with_capacity(n),
            pooled_features: Vec::new(),
        };
        let mut x = input;
        for (i, conv) in self.tower.convs.iter().enumerate() {
            let mut y = conv.forward(&x);
            relu_in_place(y.data_mut());
            let next = if i + 1 < n {
                let (pooled, arg) = maxpool2(&y);
                cache.pool_args.push(arg);
                pooled
            } else {
                cache.pooled_features = global_avg_pool(&y);
                Tensor::zeros(vec![0])
            };
            cache.conv_inputs.push(std::mem::replace(&mut x, next));
            cache.conv_outputs.push(y);
        }
        let e = self.tower.proj.forward(&cache.pooled_features);
        (e, cache)
    }

    /// Backpropagates `grad_e` through one tower pass, accumulating into
    /// the tower slots of `grads`.
    pub(crate) fn tower_backward(&self, cache: &TowerCache, grad_e: &[f64], grads: &mut [Vec<f64>]) {
        let n = self.tower.convs.len();
        let (gw, gb) = pair_mut(grads, 2 * n);
        let gfeat = self.tower.proj.backward(&cache.pooled_features, grad_e, gw, gb);
        let mut g = global_avg_pool_backward(cache.conv_outputs[n - 1].shape(), &gfeat);
        for i in (0..n).rev() {
            if i + 1 < n {
                g = maxpool2_backward(cache.conv_outputs[i].shape(), &cache.pool_args[i], &g);
            }
            relu_backward(cache.conv_outputs[i].data(), g.data_mut());
            let (gw, gb) = pair_mut(grads, 2 * i);
            let gin = self.tower.convs[i].backward(&cache.conv_inputs[i], &g, gw, gb);
            g = gin;
        }
    }

    pub(crate) fn head_forward(&self, e1: &[f64], e2: &[f64]) -> (f64, HeadCache) {
        let diff: Vec<f64> = e1.iter().zip(e2).map(|(a, b)| (a - b).abs()).collect();
        let mut hidden = self.head.hidden.forward(&diff);
        relu_in_place(&mut hidden);
        let z = self.head.out.forward(&hidden)[0];
        (z, HeadCache { diff, hidden })
    }

    /// Backpropagates `dz` (gradient w.r.t. the head logit) into head
    /// gradients, returning the gradients w.r.t. `e1` and `e2`.
    pub(crate) fn head_backward(
        &self,
        e1: &[f64],
        e2: &[f64],
        cache: &HeadCache,
        dz: f64,
        grads: &mut [Vec<f64>],
    ) -> (Vec<f64>, Vec<f64>) {
        let base = 2 * self.tower.convs.len() + 2;
        let (gw, gb) = pair_mut(grads, base + 2);
        let mut gh = self.head.out.backward(&cache.hidden, &[dz], gw, gb);
        relu_backward(&cache.hidden, &mut gh);
        let (gw, gb) = pair_mut(grads, base);
        let gdiff = self.head.hidden.backward(&cache.diff, &gh, gw, gb);
        let mut g1 = Vec::with_capacity(e1.len());
        let mut g2 = Vec::with_capacity(e1.len());
        for ((a, b), g) in e1.iter().zip(e2).zip(&gdiff) {
            let s = if a > b {
                1.0
            } else if a < b {
                -1.0
            } else {
                0.0
            };
            g1.push(g * s);
            g2.push(-g * s);
        }
        (g1, g2)
    }

    /// Match probability from the metric head applied to `|e1 - e2|`.
    pub fn decide(&self, e1: &[f64], e2: &[f64]) -> f64 {
        sigmoid(self.head_forward(e1, e2).0)
    }

    /// `decide(embed(a), embed(b))`.
    pub fn score_pair(&self, a: &Patch, b: &Patch) -> Result<f64> {
        Ok(self.decide(&self.embed(a)?, &self.embed(b)?))
    }
}

fn pair_mut(grads: &mut [Vec<f64>], i: usize) -> (&mut [f64], &mut [f64]) {
    let (lo, hi) = grads.split_at_mut(i + 1);
    (&mut lo[i], &mut hi[0])
}

/// Euclidean distance between two embeddings.
pub fn energy(e1: &[f64], e2: &[f64]) -> Result<f64> {
    if e1.len() != e2.len() {
        return Err(Error::ShapeMismatch(format!("embedding lengths {} and {}", e1.len(), e2.len())));
    }
    Ok(e1.iter().zip(e2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}
