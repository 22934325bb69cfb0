//! End-to-end synthetic reproduction: generate survey pairs, build
//! datasets on the training pairs, train, then classify and match the
//! held-out pairs against the ratio-test baseline.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detect::{cross_map_fuse, detect_combined, DetectorConfig, FusedKeypoints};
use crate::error::{Error, Result};
use crate::imagecore::{save_pgm, AffineTransform, IntensityCurve};
use crate::matching::{
    baseline_ratio_match, ground_truth_inliers, match_fused, matches_csv, render_overlay, MatchConfig,
};
use crate::net::{save_model, ArchConfig, SiameseModel};
use crate::patches::{build_dataset, save_dataset, DatasetOptions, SamplePair};
use crate::synth::{gen_seafloor, make_survey_pair, Shading, SurveyConfig, SurveyPair};
use crate::train::{evaluate_model, pretrain, train_model, EvalReport, PretrainOptions, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub pairs: usize,
    pub train_pairs: usize,
    /// Side of each survey image.
    pub size: usize,
    /// Extra seafloor around the survey window; B's offset is drawn from
    /// `[margin / 2, margin]` per axis.
    pub margin: usize,
    /// Degrees, symmetric.
    pub max_rotation: f64,
    pub gamma_a: f64,
    pub gamma_b: f64,
    pub speckle: f64,
    pub noise_sigma: f64,
    /// Patch half size.
    pub half: usize,
    /// Correspondences kept per pair when building datasets.
    pub max_correspondences: usize,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    /// Epochs of crop-pair pretraining on the training images; 0 skips it.
    pub pretrain_epochs: usize,
    pub pretrain: PretrainOptions,
    pub detector: DetectorConfig,
    pub dedup_radius: f64,
    pub threshold: f64,
    pub d_ratio: f64,
    pub inlier_tol: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            pairs: 20,
            train_pairs: 16,
            size: 256,
            margin: 64,
            max_rotation: 3.0,
            gamma_a: 0.7,
            gamma_b: 1.6,
            speckle: 0.3,
            noise_sigma: 0.01,
            half: 16,
            max_correspondences: 80,
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            pretrain_epochs: 0,
            pretrain: PretrainOptions::default(),
            detector: DetectorConfig { max_per_detector: Some(300), ..DetectorConfig::default() },
            dedup_radius: 4.0,
            threshold: 0.5,
            d_ratio: 0.85,
            inlier_tol: 2.0,
        }
    }
}

impl ExperimentConfig {
    /// A few small pairs and epochs; for smoke tests.
    pub fn quick(seed: u64) -> Self {
        Self {
            seed,
            pairs: 3,
            train_pairs: 2,
            size: 128,
            margin: 32,
            half: 8,
            max_correspondences: 16,
            train: TrainConfig { epochs: 2, seed, ..TrainConfig::default() },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_pairs == 0 || self.train_pairs >= self.pairs {
            return Err(Error::InvalidParameter(format!(
                "need 0 < train_pairs < pairs, got {} of {}",
                self.train_pairs, self.pairs
            )));
        }
        if self.size < 4 * self.half || self.half < 4 {
            return Err(Error::InvalidParameter(format!("size {} too small for half {}", self.size, self.half)));
        }
        self.train.validate()?;
        self.arch.validate()?;
        self.match_config().validate()
    }

    pub fn match_config(&self) -> MatchConfig {
        MatchConfig {
            m: self.half,
            n: self.half,
            threshold: self.threshold,
            inlier_tol: self.inlier_tol,
            seed: self.seed,
            detector: self.detector.clone(),
            dedup_radius: self.dedup_radius,
            ..MatchConfig::default()
        }
    }

    /// Survey settings of pair `index`; shading alternates sides.
    pub fn survey(&self, index: usize, rng: &mut ChaCha8Rng) -> SurveyConfig {
        let angle = rng.random_range(-self.max_rotation..=self.max_rotation).to_radians();
        let lo = self.margin as f64 / 2.0;
        let hi = self.margin as f64;
        let (dx, dy) = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
        let c = self.size as f64 / 2.0;
        SurveyConfig {
            seed: rng.random(),
            width: self.size,
            height: self.size,
            transform: AffineTransform::similarity(angle, 1.0, (c, c), (-dx, -dy)),
            curve_a: IntensityCurve::Gamma { gamma: self.gamma_a },
            curve_b: IntensityCurve::Gamma { gamma: self.gamma_b },
            speckle_strength: self.speckle,
            shading: if index % 2 == 0 { Shading::Left } else { Shading::Right },
            noise_sigma: self.noise_sigma,
        }
    }
}

/// Survey pairs of the experiment, deterministic in `cfg.seed`.
pub fn generate_pairs(cfg: &ExperimentConfig) -> Result<Vec<SurveyPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let side = cfg.size + cfg.margin;
    (0..cfg.pairs)
        .map(|i| {
            let base = gen_seafloor(rng.random(), side, side)?;
            make_survey_pair(&base, &cfg.survey(i, &mut rng))
        })
        .collect()
}

pub fn fuse_pair(pair: &SurveyPair, detector: &DetectorConfig, dedup_radius: f64) -> Result<FusedKeypoints> {
    let ka = detect_combined(&pair.a, detector)?;
    let kb = detect_combined(&pair.b, detector)?;
    cross_map_fuse(&ka, &kb, &pair.truth, dedup_radius, (pair.a.width(), pair.a.height()), (pair.b.width(), pair.b.height()))
}

fn pair_dataset(pair: &SurveyPair, fused: &FusedKeypoints, cfg: &ExperimentConfig, seed: u64) -> Result<Vec<SamplePair>> {
    let opts = DatasetOptions {
        max_correspondences: Some(cfg.max_correspondences),
        ..DatasetOptions::new(cfg.half, cfg.half, seed)
    };
    build_dataset(&pair.a, &pair.b, &fused.a, &fused.b, &opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub pair: usize,
    pub fused: usize,
    pub model_accepted: usize,
    pub model_gt_inliers: usize,
    pub model_ransac_inliers: usize,
    pub baseline_accepted: usize,
    pub baseline_gt_inliers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub seed: u64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub best_epoch: Option<usize>,
    pub final_train_loss: f64,
    /// Held-out patch-pair classification.
    pub classification: EvalReport,
    /// Accepted model matches within tolerance of the true transform,
    /// over all held-out pairs.
    pub model_inlier_rate: Option<f64>,
    /// Accepted over scored fused pairs.
    pub model_acceptance_rate: f64,
    pub baseline_inlier_rate: Option<f64>,
    pub per_pair: Vec<PairSummary>,
}

impl ExperimentSummary {
    pub fn margin_over_baseline(&self) -> Option<f64> {
        Some(self.model_inlier_rate? - self.baseline_inlier_rate.unwrap_or(0.0))
    }
}

/// Runs the whole pipeline and writes `model.smdl`, `history.csv`,
/// `train.smp`, per held-out pair `matches_<i>.csv`, `baseline_<i>.csv`,
/// `overlay_<i>.pgm`, and `summary.json` into `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let pairs = generate_pairs(cfg)?;
    let fused: Vec<FusedKeypoints> =
        pairs.iter().map(|p| fuse_pair(p, &cfg.detector, cfg.dedup_radius)).collect::<Result<_>>()?;

    let mut train_set = Vec::new();
    for (i, (p, f)) in pairs.iter().zip(&fused).enumerate().take(cfg.train_pairs) {
        train_set.extend(pair_dataset(p, f, cfg, cfg.seed.wrapping_add(i as u64))?);
    }
    let mut test_set = Vec::new();
    for (i, (p, f)) in pairs.iter().zip(&fused).enumerate().skip(cfg.train_pairs) {
        test_set.extend(pair_dataset(p, f, cfg, cfg.seed.wrapping_add(i as u64))?);
    }
    save_dataset(&train_set, out_dir.join("train.smp"))?;

    let mut model = SiameseModel::new(cfg.arch.clone(), cfg.seed)?;
    if cfg.pretrain_epochs > 0 {
        let waterfalls: Vec<_> = pairs[..cfg.train_pairs].iter().flat_map(|p| [p.a.clone(), p.b.clone()]).collect();
        let pre_cfg = TrainConfig { epochs: cfg.pretrain_epochs, val_fraction: 0.0, ..cfg.train.clone() };
        let opts = PretrainOptions { patch_size: 2 * cfg.half, ..cfg.pretrain.clone() };
        model = pretrain(model, &waterfalls, &pre_cfg, &opts)?.model;
    }
    let trained = train_model(model, &train_set, &cfg.train)?;
    let model = trained.selected().clone();
    save_model(&model, out_dir.join("model.smdl"))?;
    std::fs::write(out_dir.join("history.csv"), trained.history_csv())?;

    let classification = evaluate_model(&model, &test_set, cfg.threshold)?;
    let mcfg = cfg.match_config();
    let (mut scored, mut acc, mut gt, mut b_acc, mut b_gt) = (0, 0, 0, 0, 0);
    let mut per_pair = Vec::new();
    for (i, (p, f)) in pairs.iter().zip(&fused).enumerate().skip(cfg.train_pairs) {
        let ours = match_fused(&p.a, &p.b, &f.a, &f.b, &model, &mcfg)?;
        let base = baseline_ratio_match(&p.a, &p.b, &mcfg, cfg.d_ratio)?;
        std::fs::write(out_dir.join(format!("matches_{i}.csv")), matches_csv(&ours.matches))?;
        std::fs::write(out_dir.join(format!("baseline_{i}.csv")), matches_csv(&base.matches))?;
        save_pgm(&render_overlay(&p.a, &p.b, &ours.matches), out_dir.join(format!("overlay_{i}.pgm")))?;
        let summary = PairSummary {
            pair: i,
            fused: ours.matches.len(),
            model_accepted: ours.accepted(),
            model_gt_inliers: ground_truth_inliers(&ours.matches, &p.truth, cfg.inlier_tol),
            model_ransac_inliers: ours.inliers(),
            baseline_accepted: base.accepted(),
            baseline_gt_inliers: ground_truth_inliers(&base.matches, &p.truth, cfg.inlier_tol),
        };
        scored += summary.fused;
        acc += summary.model_accepted;
        gt += summary.model_gt_inliers;
        b_acc += summary.baseline_accepted;
        b_gt += summary.baseline_gt_inliers;
        per_pair.push(summary);
    }
    let rate = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let summary = ExperimentSummary {
        seed: cfg.seed,
        train_samples: trained.train_size + trained.val_size,
        test_samples: test_set.len(),
        best_epoch: trained.best.as_ref().map(|b| b.0),
        final_train_loss: trained.history.last().map_or(f64::NAN, |r| r.loss),
        classification,
        model_inlier_rate: rate(gt, acc),
        model_acceptance_rate: rate(acc, scored).unwrap_or(0.0),
        baseline_inlier_rate: rate(b_gt, b_acc),
        per_pair,
    };
    std::fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}
