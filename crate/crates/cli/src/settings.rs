//! Flat `key = value` configuration shared by every subcommand.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use sonarmatch::detect::DetectorConfig;
use sonarmatch::experiment::ExperimentConfig;
use sonarmatch::matching::MatchConfig;
use sonarmatch::net::LossConfig;
use sonarmatch::patches::AugmentConfig;
use sonarmatch::train::{LrSchedule, TrainConfig};

use crate::CliError;

/// Every tunable with its default. Config files override defaults, command
/// line flags override config files.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub patch_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_step_every: usize,
    pub lr_step_gamma: f64,
    pub lambda_contrastive: f64,
    pub margin: f64,
    pub val_fraction: f64,
    pub augment: bool,
    pub threshold: f64,
    pub ransac_iterations: usize,
    pub inlier_tol: f64,
    pub min_inliers: usize,
    pub dedup_radius: f64,
    pub max_per_detector: usize,
    pub dog_octaves: usize,
    pub dog_scales: usize,
    pub dog_sigma: f64,
    pub dog_contrast: f64,
    pub dog_edge: f64,
    pub fast_threshold: f64,
    pub fast_arc: usize,
    pub fast_nms: usize,
    pub max_correspondences: usize,
    pub hard_negatives: bool,
    pub d_ratio: f64,
    pub pairs: usize,
    pub train_pairs: usize,
    pub size: usize,
    pub image_margin: usize,
    pub rotation: f64,
    pub gamma_a: f64,
    pub gamma_b: f64,
    pub speckle: f64,
    pub noise: f64,
    pub pretrain_epochs: usize,
    pub pretrain_pairs: usize,
}

impl Default for Settings {
    fn default() -> Self {
        let exp = ExperimentConfig::default();
        let train = TrainConfig::default();
        let mat = MatchConfig::default();
        let det = DetectorConfig::default();
        Self {
            seed: 42,
            patch_size: 2 * exp.half,
            epochs: train.epochs,
            batch_size: train.batch_size,
            lr: train.lr,
            lr_step_every: 0,
            lr_step_gamma: 0.5,
            lambda_contrastive: train.loss.lambda_contrastive,
            margin: train.loss.margin,
            val_fraction: train.val_fraction,
            augment: true,
            threshold: mat.threshold,
            ransac_iterations: mat.ransac_iterations,
            inlier_tol: mat.inlier_tol,
            min_inliers: mat.min_inliers,
            dedup_radius: mat.dedup_radius,
            max_per_detector: exp.detector.max_per_detector.unwrap_or(0),
            dog_octaves: det.dog.octaves,
            dog_scales: det.dog.scales_per_octave,
            dog_sigma: det.dog.base_sigma,
            dog_contrast: det.dog.contrast_threshold,
            dog_edge: det.dog.edge_threshold,
            fast_threshold: det.fast.threshold,
            fast_arc: det.fast.arc_length,
            fast_nms: det.fast.nms_radius,
            max_correspondences: exp.max_correspondences,
            hard_negatives: false,
            d_ratio: exp.d_ratio,
            pairs: exp.pairs,
            train_pairs: exp.train_pairs,
            size: exp.size,
            image_margin: exp.margin,
            rotation: exp.max_rotation,
            gamma_a: exp.gamma_a,
            gamma_b: exp.gamma_b,
            speckle: exp.speckle,
            noise: exp.noise_sigma,
            pretrain_epochs: 0,
            pretrain_pairs: exp.pretrain.pairs_per_image,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| CliError::Usage(format!("config key `{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(CliError::Usage(format!("config key `{key}`: expected a boolean, got `{value}`"))),
    }
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are
/// ignored, a repeated key keeps its last value.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

impl Settings {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut s = Self::default();
        s.apply(&parse_config(&text)?)?;
        Ok(s)
    }

    pub fn apply(&mut self, map: &BTreeMap<String, String>) -> Result<(), CliError> {
        for (k, v) in map {
            let v = v.as_str();
            match k.as_str() {
                "seed" => self.seed = parse(k, v)?,
                "patch_size" => self.patch_size = parse(k, v)?,
                "epochs" => self.epochs = parse(k, v)?,
                "batch_size" => self.batch_size = parse(k, v)?,
                "lr" => self.lr = parse(k, v)?,
                "lr_step_every" => self.lr_step_every = parse(k, v)?,
                "lr_step_gamma" => self.lr_step_gamma = parse(k, v)?,
                "lambda_contrastive" => self.lambda_contrastive = parse(k, v)?,
                "margin" => self.margin = parse(k, v)?,
                "val_fraction" => self.val_fraction = parse(k, v)?,
                "augment" => self.augment = parse_bool(k, v)?,
                "threshold" => self.threshold = parse(k, v)?,
                "ransac_iterations" => self.ransac_iterations = parse(k, v)?,
                "inlier_tol" => self.inlier_tol = parse(k, v)?,
                "min_inliers" => self.min_inliers = parse(k, v)?,
                "dedup_radius" => self.dedup_radius = parse(k, v)?,
                "max_per_detector" => self.max_per_detector = parse(k, v)?,
                "dog_octaves" => self.dog_octaves = parse(k, v)?,
                "dog_scales" => self.dog_scales = parse(k, v)?,
                "dog_sigma" => self.dog_sigma = parse(k, v)?,
                "dog_contrast" => self.dog_contrast = parse(k, v)?,
                "dog_edge" => self.dog_edge = parse(k, v)?,
                "fast_threshold" => self.fast_threshold = parse(k, v)?,
                "fast_arc" => self.fast_arc = parse(k, v)?,
                "fast_nms" => self.fast_nms = parse(k, v)?,
                "max_correspondences" => self.max_correspondences = parse(k, v)?,
                "hard_negatives" => self.hard_negatives = parse_bool(k, v)?,
                "d_ratio" => self.d_ratio = parse(k, v)?,
                "pairs" => self.pairs = parse(k, v)?,
                "train_pairs" => self.train_pairs = parse(k, v)?,
                "size" => self.size = parse(k, v)?,
                "image_margin" => self.image_margin = parse(k, v)?,
                "rotation" => self.rotation = parse(k, v)?,
                "gamma_a" => self.gamma_a = parse(k, v)?,
                "gamma_b" => self.gamma_b = parse(k, v)?,
                "speckle" => self.speckle = parse(k, v)?,
                "noise" => self.noise = parse(k, v)?,
                "pretrain_epochs" => self.pretrain_epochs = parse(k, v)?,
                "pretrain_pairs" => self.pretrain_pairs = parse(k, v)?,
                _ => return Err(CliError::Usage(format!("unknown config key `{k}`"))),
            }
        }
        Ok(())
    }

    pub fn half(&self) -> Result<usize, CliError> {
        if self.patch_size < 8 || self.patch_size % 2 != 0 {
            return Err(CliError::Usage(format!("patch size {} must be even and >= 8", self.patch_size)));
        }
        Ok(self.patch_size / 2)
    }

    pub fn detector(&self) -> DetectorConfig {
        let mut d = DetectorConfig::default();
        d.dog.octaves = self.dog_octaves;
        d.dog.scales_per_octave = self.dog_scales;
        d.dog.base_sigma = self.dog_sigma;
        d.dog.contrast_threshold = self.dog_contrast;
        d.dog.edge_threshold = self.dog_edge;
        d.fast.threshold = self.fast_threshold;
        d.fast.arc_length = self.fast_arc;
        d.fast.nms_radius = self.fast_nms;
        d.max_per_detector = (self.max_per_detector > 0).then_some(self.max_per_detector);
        d
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            lr: self.lr,
            schedule: if self.lr_step_every > 0 {
                LrSchedule::Step { every: self.lr_step_every, gamma: self.lr_step_gamma }
            } else {
                LrSchedule::Constant
            },
            loss: LossConfig { lambda_contrastive: self.lambda_contrastive, margin: self.margin },
            augment: if self.augment { AugmentConfig::default() } else { AugmentConfig::none() },
            val_fraction: self.val_fraction,
        }
    }

    pub fn matching(&self) -> Result<MatchConfig, CliError> {
        let half = self.half()?;
        Ok(MatchConfig {
            m: half,
            n: half,
            threshold: self.threshold,
            ransac_iterations: self.ransac_iterations,
            inlier_tol: self.inlier_tol,
            min_inliers: self.min_inliers,
            seed: self.seed,
            detector: self.detector(),
            dedup_radius: self.dedup_radius,
        })
    }

    pub fn experiment(&self) -> Result<ExperimentConfig, CliError> {
        let mut e = ExperimentConfig {
            seed: self.seed,
            pairs: self.pairs,
            train_pairs: self.train_pairs,
            size: self.size,
            margin: self.image_margin,
            max_rotation: self.rotation,
            gamma_a: self.gamma_a,
            gamma_b: self.gamma_b,
            speckle: self.speckle,
            noise_sigma: self.noise,
            half: self.half()?,
            max_correspondences: self.max_correspondences,
            train: self.train(),
            pretrain_epochs: self.pretrain_epochs,
            detector: self.detector(),
            dedup_radius: self.dedup_radius,
            threshold: self.threshold,
            d_ratio: self.d_ratio,
            inlier_tol: self.inlier_tol,
            ..ExperimentConfig::default()
        };
        e.pretrain.pairs_per_image = self.pretrain_pairs;
        Ok(e)
    }
}
