//! Synthetic side-scan-style survey pairs with a known ground-truth
//! transform and controllable tonal differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{apply_intensity_curve, clamp_unit, warp_affine, AffineTransform, GrayImage, IntensityCurve};

const OCTAVES: usize = 4;
const PERSISTENCE: f32 = 0.5;
const BASE_CELL: usize = 32;
/// Peak gain deviation of the insonification ramp.
const SHADING_AMPLITUDE: f32 = 0.3;

/// Direction the insonification ramp is brightest toward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shading {
    Left,
    Right,
    None,
}

impl Shading {
    pub fn opposite(self) -> Self {
        match self {
            Shading::Left => Shading::Right,
            Shading::Right => Shading::Left,
            Shading::None => Shading::None,
        }
    }

    fn gain(self, x: usize, width: usize) -> f32 {
        let u = if width > 1 { x as f32 / (width - 1) as f32 } else { 0.5 };
        match self {
            Shading::Left => 1.0 + SHADING_AMPLITUDE * (1.0 - 2.0 * u),
            Shading::Right => 1.0 - SHADING_AMPLITUDE * (1.0 - 2.0 * u),
            Shading::None => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Maps image-A pixel coordinates onto image-B pixel coordinates.
    pub transform: AffineTransform,
    pub curve_a: IntensityCurve,
    pub curve_b: IntensityCurve,
    pub speckle_strength: f64,
    /// Shading of image A; image B receives the opposite ramp.
    pub shading: Shading,
    pub noise_sigma: f64,
}

impl SurveyConfig {
    /// Noise-free, shading-free identity pair of the given size.
    pub fn clean(seed: u64, width: usize, height: usize) -> Self {
        Self {
            seed,
            width,
            height,
            transform: AffineTransform::IDENTITY,
            curve_a: IntensityCurve::identity(),
            curve_b: IntensityCurve::identity(),
            speckle_strength: 0.0,
            shading: Shading::None,
            noise_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.speckle_strength >= 0.0 && self.speckle_strength.is_finite()) {
            return Err(Error::InvalidParameter("speckle_strength must be >= 0".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidParameter("noise_sigma must be >= 0".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParameter("survey images must be non-empty".into()));
        }
        self.curve_a.validate()?;
        self.curve_b.validate()?;
        self.transform.inverse()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SurveyPair {
    pub a: GrayImage,
    pub b: GrayImage,
    /// Exact A -> B ground truth.
    pub truth: AffineTransform,
}

/// Deterministic seafloor texture: multi-octave value noise with bright
/// targets casting dark acoustic shadows.
pub fn gen_seafloor(seed: u64, width: usize, height: usize) -> Result<GrayImage> {
    if width < 16 || height < 16 {
        return Err(Error::ImageTooSmall(format!("seafloor needs >= 16x16, got {width}x{height}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field = vec![0.0f32; width * height];
    let mut amplitude = 1.0f32;
    let mut total = 0.0f32;
    for octave in 0..OCTAVES {
        let cell = (BASE_CELL >> octave).max(1);
        add_value_noise(&mut field, width, height, cell, amplitude, &mut rng);
        total += amplitude;
        amplitude *= PERSISTENCE;
    }
    for v in &mut field {
        *v = 0.12 + 0.55 * (*v / total);
    }

    let targets = (width * height / 1400).max(3);
    for _ in 0..targets {
        let cx = rng.random_range(0.0..width as f32);
        let cy = rng.random_range(0.0..height as f32);
        let sigma = rng.random_range(2.0f32..4.5);
        let amp = rng.random_range(0.25f32..0.55);
        let shadow_len = sigma * rng.random_range(3.0f32..7.0);
        let dir = if rng.random_bool(0.5) { 1.0f32 } else { -1.0 };
        let reach = (3.0 * sigma + shadow_len).ceil() as i64 + 1;
        let (x0, x1) = ((cx as i64 - reach).max(0), (cx as i64 + reach).min(width as i64 - 1));
        let (y0, y1) = ((cy as i64 - reach).max(0), (cy as i64 + reach).min(height as i64 - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = x as f32 - cx;
                let dy = y as f32 - cy;
                let v = &mut field[y as usize * width + x as usize];
                *v += amp * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                // Shadow: soft band behind the target along the range axis.
                let along = (dx * dir - sigma) / shadow_len;
                if along > -0.2 && along < 1.0 {
                    let onset = ((along + 0.2) / 0.3).clamp(0.0, 1.0);
                    let lateral = (-(dy / (1.2 * sigma)).powi(4)).exp();
                    *v *= 1.0 - 0.7 * onset * onset * (1.0 - along.max(0.0)) * lateral;
                }
            }
        }
    }
    let data = field.into_iter().map(clamp_unit).collect();
    GrayImage::new(width, height, data)
}

fn add_value_noise(field: &mut [f32], width: usize, height: usize, cell: usize, amp: f32, rng: &mut ChaCha8Rng) {
    let gw = width / cell + 2;
    let gh = height / cell + 2;
    let lattice: Vec<f32> = (0..gw * gh).map(|_| rng.random::<f32>()).collect();
    let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
    for y in 0..height {
        let gy = y / cell;
        let ty = smooth((y % cell) as f32 / cell as f32);
        for x in 0..width {
            let gx = x / cell;
            let tx = smooth((x % cell) as f32 / cell as f32);
            let l = |i: usize, j: usize| lattice[j * gw + i];
            let top = l(gx, gy) * (1.0 - tx) + l(gx + 1, gy) * tx;
            let bottom = l(gx, gy + 1) * (1.0 - tx) + l(gx + 1, gy + 1) * tx;
            field[y * width + x] += amp * (top * (1.0 - ty) + bottom * ty);
        }
    }
}

/// Produces two looks at the same seafloor.
///
/// Image A is the top-left `width x height` window of `base`; image B is
/// `base` resampled through `cfg.transform`, so B at `T(p)` depicts the
/// same ground as A at `p`. Each look then gets its own tone curve,
/// shading ramp, speckle and additive noise.
pub fn make_survey_pair(base: &GrayImage, cfg: &SurveyConfig) -> Result<SurveyPair> {
    cfg.validate()?;
    if base.width() < cfg.width || base.height() < cfg.height {
        return Err(Error::ImageTooSmall(format!(
            "base {}x{} smaller than survey {}x{}",
            base.width(),
            base.height(),
            cfg.width,
            cfg.height
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let a_geo = base.crop(0, 0, cfg.width, cfg.height)?;
    let b_geo = warp_affine(base, &cfg.transform, cfg.width, cfg.height)?;
    let a = degrade(&a_geo, &cfg.curve_a, cfg.shading, cfg, &mut rng)?;
    let b = degrade(&b_geo, &cfg.curve_b, cfg.shading.opposite(), cfg, &mut rng)?;
    Ok(SurveyPair { a, b, truth: cfg.transform })
}

fn degrade(
    img: &GrayImage,
    curve: &IntensityCurve,
    shading: Shading,
    cfg: &SurveyConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GrayImage> {
    let mut out = apply_intensity_curve(img, curve);
    if shading != Shading::None {
        shade(&mut out, shading);
    }
    if cfg.speckle_strength > 0.0 {
        apply_speckle(&mut out, cfg.speckle_strength, rng)?;
    }
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let (w, h) = (out.width(), out.height());
        for y in 0..h {
            for x in 0..w {
                let v = out.get(x, y) + normal.sample(rng) as f32;
                out.set(x, y, v);
            }
        }
    }
    Ok(out)
}

fn shade(img: &mut GrayImage, shading: Shading) {
    let (w, h) = (img.width(), img.height());
    for y in 0..h {
        for x in 0..w {
            let v = img.get(x, y) * shading.gain(x, w);
            img.set(x, y, v);
        }
    }
}

/// Multiplicative speckle with unit mean and standard deviation
/// `strength` (Gamma distributed, shape `1/strength^2`; exponential at
/// strength 1).
pub fn apply_speckle(img: &mut GrayImage, strength: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    let shape = 1.0 / (strength * strength);
    let gamma = Gamma::new(shape, 1.0 / shape).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let (w, h) = (img.width(), img.height());
    for y in 0..h {
        for x in 0..w {
            let v = img.get(x, y) * gamma.sample(rng) as f32;
            img.set(x, y, v);
        }
    }
    Ok(())
}
