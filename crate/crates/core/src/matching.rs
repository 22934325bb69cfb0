//! Prediction stage: score index-aligned patch pairs, threshold, remove false
//! matches with RANSAC, and the normalized-patch ratio-test baseline.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detect::{cross_map_fuse, dedup_keypoints, detect_combined, DetectorConfig, Keypoint};
use crate::error::{Error, Result};
use crate::imagecore::{AffineTransform, GrayImage};
use crate::net::SiameseModel;
use crate::patches::{extract_patch, Patch};

/// Anything that scores a patch pair in `[0, 1]`.
pub trait PairScorer {
    fn score(&self, a: &Patch, b: &Patch) -> Result<f64>;
}

impl PairScorer for SiameseModel {
    fn score(&self, a: &Patch, b: &Patch) -> Result<f64> {
        self.score_pair(a, b)
    }
}

/// Normalized cross-correlation clamped to `[0, 1]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct NccScorer;

pub fn ncc(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

impl PairScorer for NccScorer {
    fn score(&self, a: &Patch, b: &Patch) -> Result<f64> {
        if a.data.len() != b.data.len() {
            return Err(Error::ShapeMismatch("patches differ in size".into()));
        }
        Ok(ncc(&a.data, &b.data).clamp(0.0, 1.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    /// Patch half-width and half-height.
    pub m: usize,
    pub n: usize,
    pub threshold: f64,
    pub ransac_iterations: usize,
    /// Pixels.
    pub inlier_tol: f64,
    pub min_inliers: usize,
    pub seed: u64,
    pub detector: DetectorConfig,
    pub dedup_radius: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            m: 16,
            n: 16,
            threshold: 0.5,
            ransac_iterations: 1000,
            inlier_tol: 2.0,
            min_inliers: 3,
            seed: 42,
            detector: DetectorConfig::default(),
            dedup_radius: 4.0,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidParameter(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if !(self.inlier_tol > 0.0) {
            return Err(Error::InvalidParameter("inlier tolerance must be > 0".into()));
        }
        if self.min_inliers < 3 || self.ransac_iterations == 0 {
            return Err(Error::InvalidParameter("need min_inliers >= 3 and >= 1 RANSAC iteration".into()));
        }
        if self.m < 4 || self.n < 4 {
            return Err(Error::InvalidParameter("patch half sizes must be >= 4".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Position in the fused correspondence list (A keypoint index for the
    /// baseline).
    pub index: usize,
    pub kp_a: Keypoint,
    pub kp_b: Keypoint,
    pub score: f64,
    pub accepted: bool,
    pub inlier: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    /// Score descending, index ascending on ties.
    pub matches: Vec<MatchResult>,
    /// RANSAC estimate of the A -> B transform, when one was found.
    pub estimate: Option<AffineTransform>,
}

impl MatchOutcome {
    pub fn accepted(&self) -> usize {
        self.matches.iter().filter(|m| m.accepted).count()
    }

    pub fn inliers(&self) -> usize {
        self.matches.iter().filter(|m| m.inlier).count()
    }
}

fn sort_matches(matches: &mut [MatchResult]) {
    matches.sort_by(|p, q| q.score.total_cmp(&p.score).then(p.index.cmp(&q.index)));
}

/// Detects, cross-maps and fuses keypoints, scores every index-aligned
/// patch pair, thresholds, and flags RANSAC inliers among accepted
/// matches. Too few accepted matches for RANSAC leaves every inlier flag
/// false and no estimate.
pub fn match_images(
    img_a: &GrayImage,
    img_b: &GrayImage,
    t_align: &AffineTransform,
    scorer: &dyn PairScorer,
    cfg: &MatchConfig,
) -> Result<MatchOutcome> {
    cfg.validate()?;
    let kps_a = detect_combined(img_a, &cfg.detector)?;
    let kps_b = detect_combined(img_b, &cfg.detector)?;
    let fused = cross_map_fuse(
        &kps_a,
        &kps_b,
        t_align,
        cfg.dedup_radius,
        (img_a.width(), img_a.height()),
        (img_b.width(), img_b.height()),
    )?;
    match_fused(img_a, img_b, &fused.a, &fused.b, scorer, cfg)
}

/// [`match_images`] on already fused, index-aligned keypoints.
pub fn match_fused(
    img_a: &GrayImage,
    img_b: &GrayImage,
    fused_a: &[Keypoint],
    fused_b: &[Keypoint],
    scorer: &dyn PairScorer,
    cfg: &MatchConfig,
) -> Result<MatchOutcome> {
    cfg.validate()?;
    let mut matches = Vec::new();
    for (index, (ka, kb)) in fused_a.iter().zip(fused_b).enumerate() {
        let pa = match extract_patch(img_a, ka, cfg.m, cfg.n, index) {
            Ok(p) => p,
            Err(Error::OutOfBounds) => continue,
            Err(e) => return Err(e),
        };
        let pb = match extract_patch(img_b, kb, cfg.m, cfg.n, index) {
            Ok(p) => p,
            Err(Error::OutOfBounds) => continue,
            Err(e) => return Err(e),
        };
        let score = scorer.score(&pa, &pb)?;
        matches.push(MatchResult { index, kp_a: *ka, kp_b: *kb, score, accepted: score >= cfg.threshold, inlier: false });
    }
    if matches.is_empty() {
        return Err(Error::InsufficientCorrespondences("no keypoint pair survives fusion and patch extraction".into()));
    }
    let estimate = reject_outliers(&mut matches, cfg).ok();
    sort_matches(&mut matches);
    Ok(MatchOutcome { matches, estimate })
}

/// Exact affine through three point pairs; `None` when collinear.
pub fn affine_from_three(src: [(f64, f64); 3], dst: [(f64, f64); 3]) -> Option<AffineTransform> {
    let m = Matrix3::new(src[0].0, src[0].1, 1.0, src[1].0, src[1].1, 1.0, src[2].0, src[2].1, 1.0);
    let area = (src[1].0 - src[0].0) * (src[2].1 - src[0].1) - (src[2].0 - src[0].0) * (src[1].1 - src[0].1);
    if area.abs() < 1e-6 {
        return None;
    }
    let inv = m.try_inverse()?;
    let r1 = inv * Vector3::new(dst[0].0, dst[1].0, dst[2].0);
    let r2 = inv * Vector3::new(dst[0].1, dst[1].1, dst[2].1);
    Some(AffineTransform::new(r1[0], r1[1], r1[2], r2[0], r2[1], r2[2]))
}

/// Least-squares affine over `pairs` (at least three, not all collinear).
pub fn affine_least_squares(pairs: &[((f64, f64), (f64, f64))]) -> Result<AffineTransform> {
    if pairs.len() < 3 {
        return Err(Error::InsufficientMatches(format!("{} point pairs; need >= 3", pairs.len())));
    }
    let a = DMatrix::from_fn(pairs.len(), 3, |r, c| match c {
        0 => pairs[r].0 .0,
        1 => pairs[r].0 .1,
        _ => 1.0,
    });
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.min() <= 1e-10 * smax.max(1.0) {
        return Err(Error::SingularTransform(0.0));
    }
    let u = DVector::from_iterator(pairs.len(), pairs.iter().map(|p| p.1 .0));
    let v = DVector::from_iterator(pairs.len(), pairs.iter().map(|p| p.1 .1));
    let solve = |b: &DVector<f64>| svd.solve(b, 1e-12).map_err(|e| Error::InvalidParameter(e.to_string()));
    let (r1, r2) = (solve(&u)?, solve(&v)?);
    Ok(AffineTransform::new(r1[0], r1[1], r1[2], r2[0], r2[1], r2[2]))
}

fn residual(t: &AffineTransform, m: &MatchResult) -> f64 {
    let (x, y) = t.apply(m.kp_a.x, m.kp_a.y);
    (x - m.kp_b.x).hypot(y - m.kp_b.y)
}

/// RANSAC over 3-point affine hypotheses on the accepted matches, then a
/// least-squares refit on the best consensus set. Inlier flags are set from
/// the refit transform; rejected matches are never inliers.
pub fn reject_outliers(matches: &mut [MatchResult], cfg: &MatchConfig) -> Result<AffineTransform> {
    matches.iter_mut().for_each(|m| m.inlier = false);
    let accepted: Vec<usize> = (0..matches.len()).filter(|&i| matches[i].accepted).collect();
    if accepted.len() < 3 {
        return Err(Error::InsufficientMatches(format!("{} accepted matches; need >= 3", accepted.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, AffineTransform)> = None;
    for _ in 0..cfg.ransac_iterations {
        let pick = sample(&mut rng, accepted.len(), 3);
        let idx = [accepted[pick.index(0)], accepted[pick.index(1)], accepted[pick.index(2)]];
        let src = idx.map(|i| (matches[i].kp_a.x, matches[i].kp_a.y));
        let dst = idx.map(|i| (matches[i].kp_b.x, matches[i].kp_b.y));
        let Some(t) = affine_from_three(src, dst) else { continue };
        let support = accepted.iter().filter(|&&i| residual(&t, &matches[i]) <= cfg.inlier_tol).count();
        // Strictly better only: the earliest hypothesis wins ties.
        if best.as_ref().is_none_or(|b| support > b.0) {
            best = Some((support, t));
        }
    }
    let (support, hypothesis) = best.ok_or(Error::NoConsensus { best: 0, required: cfg.min_inliers })?;
    if support < cfg.min_inliers {
        return Err(Error::NoConsensus { best: support, required: cfg.min_inliers });
    }
    let consensus: Vec<((f64, f64), (f64, f64))> = accepted
        .iter()
        .filter(|&&i| residual(&hypothesis, &matches[i]) <= cfg.inlier_tol)
        .map(|&i| ((matches[i].kp_a.x, matches[i].kp_a.y), (matches[i].kp_b.x, matches[i].kp_b.y)))
        .collect();
    let refit = affine_least_squares(&consensus).unwrap_or(hypothesis);
    for &i in &accepted {
        matches[i].inlier = residual(&refit, &matches[i]) <= cfg.inlier_tol;
    }
    Ok(refit)
}

/// `d1 < d_ratio * d2`.
pub fn ratio_test(d1: f64, d2: f64, d_ratio: f64) -> bool {
    d1 < d_ratio * d2
}

fn descriptor(p: &Patch) -> Vec<f64> {
    let n = p.data.len() as f64;
    let mean = p.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mut d: Vec<f64> = p.data.iter().map(|&v| v as f64 - mean).collect();
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        d.iter_mut().for_each(|v| *v /= norm);
    }
    d
}

fn described(img: &GrayImage, kps: &[Keypoint], cfg: &MatchConfig) -> Result<Vec<(Keypoint, Vec<f64>)>> {
    let mut out = Vec::new();
    for (i, kp) in kps.iter().enumerate() {
        match extract_patch(img, kp, cfg.m, cfg.n, i) {
            Ok(p) => out.push((*kp, descriptor(&p))),
            Err(Error::OutOfBounds) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Classical stand-in: independent detections in both images, unit-norm
/// mean-free patch descriptors, 2-NN ratio test. One result per described
/// A keypoint (paired with its nearest B keypoint), `score = 1 - d1 / 2`.
pub fn baseline_ratio_match(
    img_a: &GrayImage,
    img_b: &GrayImage,
    cfg: &MatchConfig,
    d_ratio: f64,
) -> Result<MatchOutcome> {
    cfg.validate()?;
    let kps_a = dedup_keypoints(&detect_combined(img_a, &cfg.detector)?, cfg.dedup_radius);
    let kps_b = dedup_keypoints(&detect_combined(img_b, &cfg.detector)?, cfg.dedup_radius);
    baseline_on_keypoints(img_a, img_b, &kps_a, &kps_b, cfg, d_ratio)
}

/// [`baseline_ratio_match`] on given keypoints.
pub fn baseline_on_keypoints(
    img_a: &GrayImage,
    img_b: &GrayImage,
    kps_a: &[Keypoint],
    kps_b: &[Keypoint],
    cfg: &MatchConfig,
    d_ratio: f64,
) -> Result<MatchOutcome> {
    let da = described(img_a, kps_a, cfg)?;
    let db = described(img_b, kps_b, cfg)?;
    if da.is_empty() || db.len() < 2 {
        return Err(Error::InsufficientCorrespondences(format!(
            "{} A and {} B describable keypoints; need >= 1 and >= 2",
            da.len(),
            db.len()
        )));
    }
    let mut matches = Vec::with_capacity(da.len());
    for (index, (ka, fa)) in da.iter().enumerate() {
        let (mut best, mut second) = ((f64::INFINITY, 0usize), f64::INFINITY);
        for (j, (_, fb)) in db.iter().enumerate() {
            let d = fa.iter().zip(fb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            if d < best.0 {
                second = best.0;
                best = (d, j);
            } else if d < second {
                second = d;
            }
        }
        matches.push(MatchResult {
            index,
            kp_a: *ka,
            kp_b: db[best.1].0,
            score: (1.0 - best.0 / 2.0).clamp(0.0, 1.0),
            accepted: ratio_test(best.0, second, d_ratio),
            inlier: false,
        });
    }
    let estimate = reject_outliers(&mut matches, cfg).ok();
    sort_matches(&mut matches);
    Ok(MatchOutcome { matches, estimate })
}

/// Accepted matches whose B point lies within `tol` of the true image of
/// its A point.
pub fn ground_truth_inliers(matches: &[MatchResult], truth: &AffineTransform, tol: f64) -> usize {
    matches.iter().filter(|m| m.accepted && residual(truth, m) <= tol).count()
}

/// Share of accepted matches whose B point lies within `tol` of the true
/// image of its A point; `None` without accepted matches.
pub fn ground_truth_inlier_rate(matches: &[MatchResult], truth: &AffineTransform, tol: f64) -> Option<f64> {
    let accepted: Vec<&MatchResult> = matches.iter().filter(|m| m.accepted).collect();
    if accepted.is_empty() {
        return None;
    }
    let good = accepted.iter().filter(|m| residual(truth, m) <= tol).count();
    Some(good as f64 / accepted.len() as f64)
}

pub const INLIER_INTENSITY: f32 = 1.0;
pub const OUTLIER_INTENSITY: f32 = 0.6;

/// A and B side by side with a line per accepted match, drawn at
/// [`INLIER_INTENSITY`] for inliers and [`OUTLIER_INTENSITY`] otherwise.
pub fn render_overlay(img_a: &GrayImage, img_b: &GrayImage, matches: &[MatchResult]) -> GrayImage {
    let (wa, w) = (img_a.width(), img_a.width() + img_b.width());
    let h = img_a.height().max(img_b.height());
    let mut out = GrayImage::filled(w, h, 0.0);
    for y in 0..img_a.height() {
        for x in 0..wa {
            out.set(x, y, img_a.get(x, y));
        }
    }
    for y in 0..img_b.height() {
        for x in 0..img_b.width() {
            out.set(wa + x, y, img_b.get(x, y));
        }
    }
    // Outliers first so inlier lines stay on top.
    for pass_inliers in [false, true] {
        for m in matches.iter().filter(|m| m.accepted && m.inlier == pass_inliers) {
            let value = if m.inlier { INLIER_INTENSITY } else { OUTLIER_INTENSITY };
            draw_line(&mut out, (m.kp_a.x, m.kp_a.y), (m.kp_b.x + wa as f64, m.kp_b.y), value);
        }
    }
    out
}

fn draw_line(img: &mut GrayImage, p: (f64, f64), q: (f64, f64), value: f32) {
    let steps = (q.0 - p.0).abs().max((q.1 - p.1).abs()).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = (p.0 + t * (q.0 - p.0)).round();
        let y = (p.1 + t * (q.1 - p.1)).round();
        if x >= 0.0 && y >= 0.0 && (x as usize) < img.width() && (y as usize) < img.height() {
            img.set(x as usize, y as usize, value);
        }
    }
}

/// `xa,ya,xb,yb,score,accepted,inlier` with a header line.
pub fn matches_csv(matches: &[MatchResult]) -> String {
    let mut s = String::from("xa,ya,xb,yb,score,accepted,inlier\n");
    for m in matches {
        s.push_str(&format!(
            "{:.3},{:.3},{:.3},{:.3},{:.6},{},{}\n",
            m.kp_a.x, m.kp_a.y, m.kp_b.x, m.kp_b.y, m.score, m.accepted as u8, m.inlier as u8
        ));
    }
    s
}
