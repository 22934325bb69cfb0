//! Minibatch training, self-supervised pretraining on whole survey images,
//! and classification metrics.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detect::{Keypoint, KeypointSource};
use crate::error::{Error, Result};
use crate::imagecore::{apply_intensity_curve, GrayImage, IntensityCurve};
use crate::net::{batch_loss, loss_grad_probs, optimizer_step, AdamHyper, AdamState, LossConfig, SiameseModel};
use crate::patches::{augment_sample, extract_patch, jitter_patch, AugmentConfig, PatchJitter, SamplePair};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `gamma` every `every` epochs.
    Step { every: usize, gamma: f64 },
    /// Cosine decay from the base rate to `base * min_factor` over the run.
    Cosine { min_factor: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Step { every, gamma } => base * gamma.powi((epoch / every.max(1)) as i32),
            LrSchedule::Cosine { min_factor } => {
                let t = if epochs > 1 { epoch as f64 / (epochs - 1) as f64 } else { 0.0 };
                let f = min_factor + (1.0 - min_factor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
                base * f
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    /// Share of correspondence groups held out for validation. 0 trains on
    /// everything and records no validation accuracy.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            seed: 42,
            lr: 1e-3,
            schedule: LrSchedule::Constant,
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidParameter(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning rate {}", self.lr)));
        }
        if let LrSchedule::Step { gamma, .. } = self.schedule {
            if !(gamma > 0.0) {
                return Err(Error::InvalidParameter("step schedule gamma must be > 0".into()));
            }
        }
        self.loss.validate()?;
        self.augment.validate()
    }
}

const SPLIT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean minibatch loss over the epoch.
    pub loss: f64,
    /// Accuracy of the epoch's own (augmented) training predictions.
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Weights after the last epoch.
    pub model: SiameseModel,
    /// Snapshot with the highest validation accuracy (earliest on ties);
    /// `None` without a validation split.
    pub best: Option<(usize, SiameseModel)>,
    pub history: Vec<EpochRecord>,
    pub train_size: usize,
    pub val_size: usize,
}

impl TrainOutcome {
    /// Best-validation snapshot if there is one, else the final model.
    pub fn selected(&self) -> &SiameseModel {
        self.best.as_ref().map_or(&self.model, |(_, m)| m)
    }

    /// `epoch,loss,val_acc` rows with a header line.
    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,loss,val_acc\n");
        for r in &self.history {
            let val = r.val_acc.map_or(String::new(), |v| format!("{v:.6}"));
            s.push_str(&format!("{},{:.8},{}\n", r.epoch, r.loss, val));
        }
        s
    }
}

/// Splits samples into (train, validation) by [`SamplePair::group_key`] so a
/// positive and the negative sharing its A patch land on the same side.
pub fn split_by_group(dataset: &[SamplePair], val_fraction: f64, seed: u64) -> (Vec<SamplePair>, Vec<SamplePair>) {
    let mut keys: Vec<u64> = dataset.iter().map(|s| s.group_key()).collect::<BTreeSet<_>>().into_iter().collect();
    let n_val = if val_fraction > 0.0 && keys.len() > 1 {
        ((keys.len() as f64 * val_fraction).round() as usize).clamp(1, keys.len() - 1)
    } else {
        0
    };
    keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
    let val_keys: BTreeSet<u64> = keys[..n_val].iter().copied().collect();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for s in dataset {
        if val_keys.contains(&s.group_key()) {
            val.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    (train, val)
}

fn check_labels(dataset: &[SamplePair]) -> Result<()> {
    if dataset.len() < 2 {
        return Err(Error::DegenerateDataset(format!("{} sample(s); need >= 2", dataset.len())));
    }
    let pos = dataset.iter().filter(|s| s.is_positive()).count();
    if pos == 0 || pos == dataset.len() {
        return Err(Error::DegenerateDataset("dataset contains a single class".into()));
    }
    Ok(())
}

/// Trains `model` with Adam on shuffled, augmented minibatches. Fully
/// determined by `cfg.seed`.
pub fn train_model(model: SiameseModel, dataset: &[SamplePair], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_labels(dataset)?;
    let (train, val) = split_by_group(dataset, cfg.val_fraction, cfg.seed);
    if train.is_empty() {
        return Err(Error::DegenerateDataset("validation split left no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = model;
    let mut state = AdamState::new(&model);
    let mut best: Option<(usize, SiameseModel, f64)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let augment = !cfg.augment.is_identity();

    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.rate(cfg.lr, epoch, cfg.epochs);
        let hyper = AdamHyper::with_lr(lr);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<SamplePair> = chunk
                .iter()
                .map(|&i| if augment { augment_sample(&train[i], &cfg.augment, &mut rng) } else { train[i].clone() })
                .collect();
            let (loss, grads, probs) = loss_grad_probs(&model, &batch, &cfg.loss)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}")));
            }
            loss_sum += loss * batch.len() as f64;
            correct += probs.iter().zip(&batch).filter(|(&p, s)| (p >= 0.5) == s.is_positive()).count();
            optimizer_step(&mut model, &grads, &mut state, &hyper)?;
        }
        let val_acc = if val.is_empty() { None } else { Some(evaluate_model(&model, &val, 0.5)?.accuracy) };
        if let Some(acc) = val_acc {
            if best.as_ref().is_none_or(|b| acc > b.2) {
                best = Some((epoch, model.clone(), acc));
            }
        }
        history.push(EpochRecord {
            epoch,
            lr,
            loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_acc,
        });
    }
    Ok(TrainOutcome {
        model,
        best: best.map(|(e, m, _)| (e, m)),
        history,
        train_size: train.len(),
        val_size: val.len(),
    })
}

/// Mean loss of `model` over `dataset` without augmentation.
pub fn dataset_loss(model: &SiameseModel, dataset: &[SamplePair], loss: &LossConfig) -> Result<f64> {
    batch_loss(model, dataset, loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    /// Side of the square crops.
    pub patch_size: usize,
    /// Positive pairs drawn per image (an equal number of negatives).
    pub pairs_per_image: usize,
    /// Each crop gets an independent gamma in `[1/(1+j), 1+j]`.
    pub gamma_jitter: f64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self { patch_size: 32, pairs_per_image: 64, gamma_jitter: 0.8 }
    }
}

fn crop_at(img: &GrayImage, x: f64, y: f64, half: usize) -> Result<crate::patches::Patch> {
    let kp = Keypoint { x, y, scale: 1.0, response: 0.0, source: KeypointSource::Mapped };
    extract_patch(img, &kp, half, half, 0)
}

fn photometric(patch: &crate::patches::Patch, jitter: f64, rng: &mut ChaCha8Rng) -> crate::patches::Patch {
    if jitter <= 0.0 {
        return patch.clone();
    }
    let g = (1.0 + jitter).powf(rng.random_range(-1.0..=1.0));
    let img = GrayImage::new(patch.width, patch.height, patch.data.clone()).expect("patch invariants hold");
    let mut out = patch.clone();
    out.data = apply_intensity_curve(&img, &IntensityCurve::Gamma { gamma: g }).into_data();
    out
}

/// Self-supervised crop pairs cut from whole survey images: positives are
/// two independently augmented crops of one location, negatives pair crops
/// of locations at least two patch widths apart.
pub fn pretrain_corpus(
    waterfalls: &[GrayImage],
    opts: &PretrainOptions,
    augment: &AugmentConfig,
    seed: u64,
) -> Result<Vec<SamplePair>> {
    if waterfalls.is_empty() {
        return Err(Error::Empty("no images to pretrain on".into()));
    }
    if opts.patch_size < 8 || opts.patch_size % 2 != 0 || opts.pairs_per_image == 0 {
        return Err(Error::InvalidParameter(format!("invalid pretrain options {opts:?}")));
    }
    let p = opts.patch_size;
    let half = p / 2;
    let min_sep = 2.0 * p as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * opts.pairs_per_image * waterfalls.len());
    for img in waterfalls {
        let (w, h) = (img.width(), img.height());
        // Centres live in [half, size - half - 1]; the two extreme corners
        // must be at least `min_sep` apart.
        let span = |n: usize| n.saturating_sub(p + 1) as f64;
        if w < p + 1 || h < p + 1 || span(w).hypot(span(h)) < min_sep {
            return Err(Error::ImageTooSmall(format!(
                "{w}x{h} image cannot hold two {p} px crops {min_sep} px apart"
            )));
        }
        let centre = |rng: &mut ChaCha8Rng| {
            (rng.random_range(half..w - half) as f64, rng.random_range(half..h - half) as f64)
        };
        for _ in 0..opts.pairs_per_image {
            let (x, y) = centre(&mut rng);
            let base = crop_at(img, x, y, half)?;
            let view = |rng: &mut ChaCha8Rng, src: &crate::patches::Patch| {
                let j = PatchJitter::draw(augment, rng);
                let q = jitter_patch(src, &j, rng);
                photometric(&q, opts.gamma_jitter, rng)
            };
            let a = view(&mut rng, &base);
            let b = view(&mut rng, &base);
            out.push(SamplePair { patch_a: a.clone(), patch_b: b, label: 1 });
            let far = loop {
                let (u, v) = centre(&mut rng);
                if (u - x).hypot(v - y) >= min_sep {
                    break (u, v);
                }
            };
            let other = crop_at(img, far.0, far.1, half)?;
            out.push(SamplePair { patch_a: a, patch_b: view(&mut rng, &other), label: 0 });
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// Builds the crop-pair corpus from `waterfalls` and trains on it; the
/// returned weights warm-start fine-tuning.
pub fn pretrain(
    model: SiameseModel,
    waterfalls: &[GrayImage],
    cfg: &TrainConfig,
    opts: &PretrainOptions,
) -> Result<TrainOutcome> {
    let corpus = pretrain_corpus(waterfalls, opts, &cfg.augment, cfg.seed)?;
    train_model(model, &corpus, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub auc: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub threshold: f64,
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting
/// one half. 0.5 when either class is absent.
pub fn rank_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return 0.5;
    }
    // Sum of midranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * mid;
        i = j + 1;
    }
    (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

/// Metrics for precomputed scores; a score equal to `threshold` counts as
/// a positive prediction.
pub fn evaluate_scores(scores: &[f64], labels: &[bool], threshold: f64) -> Result<EvalReport> {
    if scores.is_empty() {
        return Err(Error::Empty("nothing to evaluate".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(EvalReport {
        accuracy: ratio(tp + tn, scores.len()),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        auc: rank_auc(scores, labels),
        tp,
        fp,
        tn,
        fn_,
        threshold,
    })
}

pub fn score_dataset(model: &SiameseModel, dataset: &[SamplePair]) -> Result<Vec<f64>> {
    dataset.iter().map(|s| model.score_pair(&s.patch_a, &s.patch_b)).collect()
}

pub fn evaluate_model(model: &SiameseModel, dataset: &[SamplePair], threshold: f64) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Empty("nothing to evaluate".into()));
    }
    let scores = score_dataset(model, dataset)?;
    let labels: Vec<bool> = dataset.iter().map(|s| s.is_positive()).collect();
    evaluate_scores(&scores, &labels, threshold)
}
