//! Self-labelled training pairs: patches cut around index-aligned
//! keypoints, derangement negatives, augmentation, and the `SMP1` dataset
//! file.

use std::fs;
use std::io::ErrorKind;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detect::Keypoint;
use crate::error::{Error, Result};
use crate::imagecore::{clamp_unit, AffineTransform, GrayImage};

const DATASET_MAGIC: &[u8; 4] = b"SMP1";

/// Rectangular crop of `width x height` intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
    /// Index of the keypoint (correspondence) the patch was cut around.
    pub origin: usize,
}

impl Patch {
    pub fn new(width: usize, height: usize, data: Vec<f32>, origin: usize) -> Result<Self> {
        if width < 8 || height < 8 || width % 2 != 0 || height % 2 != 0 {
            return Err(Error::InvalidParameter(format!("patch must be even and >= 8, got {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::PixelCountMismatch { expected: width * height, found: data.len() });
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidImage("patch intensity outside [0,1]".into()));
        }
        Ok(Self { width, height, data, origin })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    fn as_image(&self) -> GrayImage {
        GrayImage::new(self.width, self.height, self.data.clone()).expect("patch invariants hold")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub patch_a: Patch,
    pub patch_b: Patch,
    /// 1 for a match, 0 otherwise.
    pub label: u8,
}

impl SamplePair {
    pub fn is_positive(&self) -> bool {
        self.label == 1
    }

    /// Key shared by a positive and the negative built from the same A
    /// patch (hash of the A-patch pixels). Survives the `SMP1` round trip,
    /// which does not store correspondence indices.
    pub fn group_key(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for v in &self.patch_a.data {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

/// Copies the `2m x 2n` window centred on the rounded keypoint; the
/// keypoint lands on patch pixel `(m, n)`.
pub fn extract_patch(img: &GrayImage, kp: &Keypoint, m: usize, n: usize, origin: usize) -> Result<Patch> {
    if m < 4 || n < 4 {
        return Err(Error::InvalidParameter(format!("half extents must be >= 4, got m={m} n={n}")));
    }
    let cx = kp.x.round();
    let cy = kp.y.round();
    let x0 = cx - m as f64;
    let y0 = cy - n as f64;
    if !(x0 >= 0.0 && y0 >= 0.0 && cx + m as f64 <= img.width() as f64 && cy + n as f64 <= img.height() as f64) {
        return Err(Error::OutOfBounds);
    }
    let cropped = img.crop(x0 as usize, y0 as usize, 2 * m, 2 * n)?;
    Ok(Patch { width: 2 * m, height: 2 * n, data: cropped.into_data(), origin })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetOptions {
    pub m: usize,
    pub n: usize,
    pub seed: u64,
    /// Pair A_i with a B patch 1-3 patch widths away from B_i instead of a
    /// deranged partner, when that window fits.
    pub hard_negatives: bool,
    /// Randomly keep at most this many correspondences.
    pub max_correspondences: Option<usize>,
}

impl DatasetOptions {
    pub fn new(m: usize, n: usize, seed: u64) -> Self {
        Self { m, n, seed, hard_negatives: false, max_correspondences: None }
    }
}

/// Builds a balanced, shuffled set of positive and negative pairs from
/// index-aligned keypoints.
///
/// Every correspondence whose windows fit in both images yields the
/// positive `(A_i, B_i)`; negatives pair `A_i` with `B_sigma(i)` for a
/// random derangement `sigma` of the surviving indices.
pub fn build_dataset(
    img_a: &GrayImage,
    img_b: &GrayImage,
    fused_a: &[Keypoint],
    fused_b: &[Keypoint],
    opts: &DatasetOptions,
) -> Result<Vec<SamplePair>> {
    if fused_a.len() != fused_b.len() {
        return Err(Error::ShapeMismatch(format!(
            "fused keypoint lists differ in length: {} vs {}",
            fused_a.len(),
            fused_b.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut survivors: Vec<(Patch, Patch, usize)> = Vec::new();
    for (i, (ka, kb)) in fused_a.iter().zip(fused_b).enumerate() {
        match (extract_patch(img_a, ka, opts.m, opts.n, i), extract_patch(img_b, kb, opts.m, opts.n, i)) {
            (Ok(pa), Ok(pb)) => survivors.push((pa, pb, i)),
            (Err(Error::OutOfBounds), _) | (_, Err(Error::OutOfBounds)) => continue,
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    if let Some(cap) = opts.max_correspondences {
        if survivors.len() > cap {
            survivors.shuffle(&mut rng);
            survivors.truncate(cap);
            survivors.sort_by_key(|s| s.2);
        }
    }
    if survivors.len() < 2 {
        return Err(Error::InsufficientCorrespondences(format!(
            "{} correspondence(s) survive patch extraction; need >= 2",
            survivors.len()
        )));
    }

    let sigma = random_derangement(survivors.len(), &mut rng);
    let mut samples = Vec::with_capacity(2 * survivors.len());
    for (slot, (pa, pb, i)) in survivors.iter().enumerate() {
        samples.push(SamplePair { patch_a: pa.clone(), patch_b: pb.clone(), label: 1 });
        let hard = if opts.hard_negatives { hard_negative(img_b, &fused_b[*i], opts, *i, &mut rng) } else { None };
        let negative_b = hard.unwrap_or_else(|| survivors[sigma[slot]].1.clone());
        samples.push(SamplePair { patch_a: pa.clone(), patch_b: negative_b, label: 0 });
    }
    samples.shuffle(&mut rng);
    Ok(samples)
}

/// Uniform random permutation with no fixed points (rejection sampling).
pub fn random_derangement(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    assert!(n >= 2, "no derangement of fewer than 2 elements");
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

fn hard_negative(img_b: &GrayImage, kb: &Keypoint, opts: &DatasetOptions, origin: usize, rng: &mut ChaCha8Rng) -> Option<Patch> {
    let side = (2 * opts.m.max(opts.n)) as f64;
    for _ in 0..8 {
        let dist = side * rng.random_range(1.0..=3.0);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let shifted = Keypoint { x: kb.x + dist * angle.cos(), y: kb.y + dist * angle.sin(), ..*kb };
        if let Ok(p) = extract_patch(img_b, &shifted, opts.m, opts.n, origin) {
            return Some(p);
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub noise_sigma: f64,
    /// Degrees.
    pub max_rotation: f64,
    /// Pixels, per axis.
    pub max_translation: f64,
    pub scale_range: (f64, f64),
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self { noise_sigma: 0.0, max_rotation: 0.0, max_translation: 0.0, scale_range: (1.0, 1.0) }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        let ok = self.noise_sigma >= 0.0
            && self.max_rotation >= 0.0
            && self.max_translation >= 0.0
            && lo > 0.0
            && lo <= 1.0
            && 1.0 <= hi;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid augmentation config {self:?}")))
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::none()
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { noise_sigma: 0.02, max_rotation: 10.0, max_translation: 1.0, scale_range: (0.9, 1.1) }
    }
}

/// One concrete draw of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchJitter {
    pub rotation_deg: f64,
    pub shift: (f64, f64),
    pub scale: f64,
    pub noise_sigma: f64,
}

impl PatchJitter {
    pub fn draw(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let sym = |rng: &mut dyn rand::RngCore, a: f64| if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
        let (lo, hi) = cfg.scale_range;
        Self {
            rotation_deg: sym(rng, cfg.max_rotation),
            shift: (sym(rng, cfg.max_translation), sym(rng, cfg.max_translation)),
            scale: if hi > lo { rng.random_range(lo..=hi) } else { lo },
            noise_sigma: cfg.noise_sigma,
        }
    }
}

/// Warps a patch about its keypoint centre `(w/2, h/2)` and adds clamped
/// Gaussian noise.
pub fn jitter_patch(patch: &Patch, j: &PatchJitter, rng: &mut impl Rng) -> Patch {
    let mut out = patch.clone();
    if j.rotation_deg != 0.0 || j.shift != (0.0, 0.0) || j.scale != 1.0 {
        let center = ((patch.width / 2) as f64, (patch.height / 2) as f64);
        let t = AffineTransform::similarity(j.rotation_deg.to_radians(), j.scale, center, j.shift);
        let warped = crate::imagecore::warp_affine(&patch.as_image(), &t, patch.width, patch.height)
            .expect("similarity with positive scale is invertible");
        out.data = warped.into_data();
    }
    if j.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, j.noise_sigma).expect("finite sigma");
        for v in &mut out.data {
            *v = clamp_unit(*v + normal.sample(rng) as f32);
        }
    }
    out
}

/// Independently perturbs both patches; the label is untouched.
pub fn augment_sample(s: &SamplePair, cfg: &AugmentConfig, rng: &mut impl Rng) -> SamplePair {
    let ja = PatchJitter::draw(cfg, rng);
    let patch_a = jitter_patch(&s.patch_a, &ja, rng);
    let jb = PatchJitter::draw(cfg, rng);
    let patch_b = jitter_patch(&s.patch_b, &jb, rng);
    SamplePair { patch_a, patch_b, label: s.label }
}

/// `SMP1` little-endian layout: magic, `u32` count, `u32` width, `u32`
/// height, then per sample a label byte and both patches as `f32`.
pub fn encode_dataset(samples: &[SamplePair]) -> Result<Vec<u8>> {
    let (w, h) = samples.first().map_or((0, 0), |s| (s.patch_a.width, s.patch_a.height));
    let mut out = Vec::with_capacity(16 + samples.len() * (1 + 8 * w * h));
    out.extend_from_slice(DATASET_MAGIC);
    for v in [samples.len(), w, h] {
        out.extend_from_slice(&u32::try_from(v).map_err(|_| Error::DatasetFormat("size exceeds u32".into()))?.to_le_bytes());
    }
    for s in samples {
        for p in [&s.patch_a, &s.patch_b] {
            if p.width != w || p.height != h {
                return Err(Error::ShapeMismatch("all patches in a dataset file must share one size".into()));
            }
        }
        out.push(s.label);
        for p in [&s.patch_a, &s.patch_b] {
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<SamplePair>> {
    if bytes.len() < 16 || &bytes[..4] != DATASET_MAGIC {
        return Err(Error::DatasetFormat("missing SMP1 header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (count, w, h) = (word(0), word(1), word(2));
    let per = 1 + 8 * w * h;
    let expected = count
        .checked_mul(per)
        .and_then(|n| n.checked_add(16))
        .ok_or_else(|| Error::DatasetFormat("size overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::DatasetFormat(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let rec = &bytes[16 + i * per..16 + (i + 1) * per];
        let label = rec[0];
        if label > 1 {
            return Err(Error::DatasetFormat(format!("label {label} is not 0/1")));
        }
        let read = |off: usize| -> Result<Vec<f32>> {
            let data: Vec<f32> = rec[off..off + 4 * w * h]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(data)
        };
        let patch_a = Patch::new(w, h, read(1)?, i)?;
        let patch_b = Patch::new(w, h, read(1 + 4 * w * h)?, i)?;
        samples.push(SamplePair { patch_a, patch_b, label });
    }
    Ok(samples)
}

pub fn save_dataset(samples: &[SamplePair], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_dataset(samples)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<SamplePair>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode_dataset(&bytes)
}
