use proptest::prelude::*;
use sonarmatch::detect::{Keypoint, KeypointSource};
use sonarmatch::imagecore::{AffineTransform, GrayImage, IntensityCurve};
use sonarmatch::net::{ArchConfig, LossConfig, SiameseModel};
use sonarmatch::patches::{build_dataset, AugmentConfig, DatasetOptions, SamplePair};
use sonarmatch::synth::{gen_seafloor, make_survey_pair, Shading, SurveyConfig};
use sonarmatch::train::*;
use sonarmatch::Error;

/// Samples from a gamma-gapped survey pair, keypoints on a jittered grid
/// carried across by the true transform.
fn survey_samples(seed: u64, correspondences: usize, half: usize) -> Vec<SamplePair> {
    let base = gen_seafloor(seed, 160, 160).unwrap();
    let truth = AffineTransform::similarity(0.03, 1.0, (64.0, 64.0), (-12.0, -9.0));
    let cfg = SurveyConfig {
        transform: truth,
        curve_a: IntensityCurve::Gamma { gamma: 0.7 },
        curve_b: IntensityCurve::Gamma { gamma: 1.6 },
        speckle_strength: 0.3,
        shading: Shading::Left,
        noise_sigma: 0.01,
        ..SurveyConfig::clean(seed, 128, 128)
    };
    let pair = make_survey_pair(&base, &cfg).unwrap();
    let mut ka = Vec::new();
    let step = 12.0;
    let mut y = 20.0;
    while y < 108.0 {
        let mut x = 20.0;
        while x < 108.0 {
            ka.push(Keypoint { x, y, scale: 1.6, response: 1.0, source: KeypointSource::Dog });
            x += step;
        }
        y += step;
    }
    let kb: Vec<Keypoint> = ka
        .iter()
        .map(|k| {
            let (x, y) = truth.apply(k.x, k.y);
            Keypoint { x, y, source: KeypointSource::Mapped, ..*k }
        })
        .collect();
    let opts = DatasetOptions { max_correspondences: Some(correspondences), ..DatasetOptions::new(half, half, seed) };
    build_dataset(&pair.a, &pair.b, &ka, &kb, &opts).unwrap()
}

fn overfit_config() -> TrainConfig {
    TrainConfig {
        epochs: 500,
        batch_size: 8,
        seed: 7,
        augment: AugmentConfig::none(),
        val_fraction: 0.0,
        ..TrainConfig::default()
    }
}

#[test]
fn overfits_eight_pairs() {
    let data = survey_samples(1, 4, 8);
    assert_eq!(data.len(), 8);
    let model = SiameseModel::new(ArchConfig::default(), 3).unwrap();
    let out = train_model(model, &data, &overfit_config()).unwrap();
    let last = out.history.last().unwrap();
    let final_loss = dataset_loss(&out.model, &data, &LossConfig::default()).unwrap();
    let acc = evaluate_model(&out.model, &data, 0.5).unwrap().accuracy;
    assert!(last.loss < 0.05 && final_loss < 0.05, "epoch loss {} / final loss {final_loss}", last.loss);
    assert_eq!(acc, 1.0);

    // 20-epoch block means never rise.
    let blocks: Vec<f64> =
        out.history.chunks(20).map(|c| c.iter().map(|r| r.loss).sum::<f64>() / c.len() as f64).collect();
    for w in blocks.windows(2) {
        assert!(w[1] <= w[0], "smoothed loss rose: {blocks:?}");
    }
}

#[test]
fn training_is_bit_reproducible() {
    let data = survey_samples(2, 12, 8);
    let cfg = TrainConfig { epochs: 4, batch_size: 5, seed: 11, ..TrainConfig::default() };
    let run = || train_model(SiameseModel::new(ArchConfig::default(), 5).unwrap(), &data, &cfg).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_eq!(a.history.len(), 4);
    assert!(a.best.is_some());
    assert!(a.history.iter().all(|r| r.val_acc.is_some()));
    let csv = a.history_csv();
    assert!(csv.starts_with("epoch,loss,val_acc\n"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn single_class_dataset_is_rejected() {
    let data: Vec<SamplePair> = survey_samples(3, 4, 8).into_iter().filter(|s| s.is_positive()).collect();
    let model = SiameseModel::new(ArchConfig::default(), 1).unwrap();
    assert!(matches!(train_model(model, &data, &TrainConfig::default()), Err(Error::DegenerateDataset(_))));
}

#[test]
fn invalid_config_is_rejected() {
    let data = survey_samples(3, 4, 8);
    let model = SiameseModel::new(ArchConfig::default(), 1).unwrap();
    let cfg = TrainConfig { val_fraction: 1.0, ..TrainConfig::default() };
    assert!(matches!(train_model(model.clone(), &data, &cfg), Err(Error::InvalidParameter(_))));
    let cfg = TrainConfig { batch_size: 0, ..TrainConfig::default() };
    assert!(matches!(train_model(model, &data, &cfg), Err(Error::InvalidParameter(_))));
}

#[test]
fn validation_split_keeps_groups_together() {
    let data = survey_samples(4, 20, 8);
    let (train, val) = split_by_group(&data, 0.2, 9);
    assert_eq!(train.len() + val.len(), data.len());
    assert_eq!(val.len(), 8);
    for v in &val {
        assert!(train.iter().all(|t| t.group_key() != v.group_key()));
    }
}

#[test]
fn evaluation_examples() {
    let labels = [true, false, true, false, true, false];
    let oracle: Vec<f64> = labels.iter().map(|&l| l as u8 as f64).collect();
    let r = evaluate_scores(&oracle, &labels, 0.5).unwrap();
    assert_eq!((r.accuracy, r.auc), (1.0, 1.0));
    let constant = vec![0.5; 6];
    let r = evaluate_scores(&constant, &labels, 0.5).unwrap();
    assert_eq!(r.accuracy, 0.5);
    assert_eq!((r.tp, r.fp, r.tn, r.fn_), (3, 3, 0, 0));
    assert!(matches!(evaluate_scores(&[], &[], 0.5), Err(Error::Empty(_))));
    let model = SiameseModel::new(ArchConfig::default(), 1).unwrap();
    assert!(matches!(evaluate_model(&model, &[], 0.5), Err(Error::Empty(_))));
}

fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut good = 0.0;
    let mut total = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                total += 1.0;
                if si > sj {
                    good += 1.0;
                } else if si == sj {
                    good += 0.5;
                }
            }
        }
    }
    good / total
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn auc_matches_pair_count(
        data in prop::collection::vec((0u8..20, any::<bool>()), 2..200),
    ) {
        let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 20.0).collect();
        let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let r = evaluate_scores(&scores, &labels, 0.4).unwrap();
        prop_assert!((r.auc - brute_force_auc(&scores, &labels)).abs() < 1e-12);
        prop_assert_eq!(r.tp + r.fp + r.tn + r.fn_, scores.len());
        for v in [r.accuracy, r.precision, r.recall, r.auc] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn pretrain_rejects_bad_inputs() {
    let model = SiameseModel::new(ArchConfig::default(), 1).unwrap();
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    let opts = PretrainOptions { patch_size: 16, pairs_per_image: 4, ..PretrainOptions::default() };
    assert!(matches!(pretrain(model.clone(), &[], &cfg, &opts), Err(Error::Empty(_))));
    let tiny = GrayImage::filled(30, 30, 0.5);
    assert!(matches!(pretrain(model, &[tiny], &cfg, &opts), Err(Error::ImageTooSmall(_))));
}

#[test]
fn pretrain_corpus_has_separated_negatives() {
    let img = gen_seafloor(8, 128, 128).unwrap();
    let opts = PretrainOptions { patch_size: 16, pairs_per_image: 10, ..PretrainOptions::default() };
    let corpus = pretrain_corpus(&[img.clone()], &opts, &AugmentConfig::default(), 3).unwrap();
    assert_eq!(corpus.len(), 20);
    assert_eq!(corpus.iter().filter(|s| s.is_positive()).count(), 10);
    assert!(corpus.iter().all(|s| s.patch_a.width == 16 && s.patch_b.height == 16));

    let model = SiameseModel::new(ArchConfig::default(), 1).unwrap();
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    let out = pretrain(model.clone(), &[img], &cfg, &opts).unwrap();
    assert_eq!(out.model.arch(), model.arch());
}

/// Epochs until validation accuracy first reaches `target`.
fn epochs_to(out: &TrainOutcome, target: f64) -> Option<usize> {
    out.history.iter().find(|r| r.val_acc.unwrap_or(0.0) >= target).map(|r| r.epoch + 1)
}

#[test]
fn pretraining_does_not_slow_fine_tuning() {
    let data: Vec<SamplePair> = (0..5).flat_map(|s| survey_samples(20 + s, 20, 8)).collect();
    assert_eq!(data.len(), 200);
    let cfg = TrainConfig { epochs: 30, seed: 5, ..TrainConfig::default() };
    let target = 0.8;

    let scratch = train_model(SiameseModel::new(ArchConfig::default(), 9).unwrap(), &data, &cfg).unwrap();

    let waterfalls: Vec<GrayImage> = (0..3).map(|s| gen_seafloor(100 + s, 160, 160).unwrap()).collect();
    let opts = PretrainOptions { patch_size: 16, pairs_per_image: 60, ..PretrainOptions::default() };
    let pre_cfg = TrainConfig { epochs: 15, seed: 6, ..TrainConfig::default() };
    let warm = pretrain(SiameseModel::new(ArchConfig::default(), 9).unwrap(), &waterfalls, &pre_cfg, &opts).unwrap();
    let tuned = train_model(warm.model, &data, &cfg).unwrap();

    let (s, t) = (epochs_to(&scratch, target), epochs_to(&tuned, target));
    eprintln!("epochs to {target}: scratch {s:?}, pretrained {t:?}");
    assert!(t.is_some(), "pretrained run never reached {target}");
    assert!(t.unwrap() <= s.unwrap_or(usize::MAX));
}
