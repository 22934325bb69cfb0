//! Grayscale rasters, PGM IO, affine warping and monotone intensity curves.
//!
//! Intensities are stored as `f32` normalized to `[0, 1]`. Pixel `(x, y)`
//! sits at the continuous coordinate `(x, y)`; keypoints, transforms and
//! warps all share that convention.

use std::fs;
use std::io::ErrorKind;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Single-channel image with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!("zero dimension {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::PixelCountMismatch {
                expected: width * height,
                found: data.len(),
            });
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!("intensity {v} outside [0,1]")));
        }
        Ok(Self { width, height, data })
    }

    /// Builds an image from arbitrary values, clamping each into `[0, 1]`
    /// (NaN becomes 0).
    pub fn from_fn_clamped(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        assert!(width > 0 && height > 0, "zero image dimension");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(clamp_unit(f(x, y)));
            }
        }
        Self { width, height, data }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self::from_fn_clamped(width, height, |_, _| value)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Sets a pixel, clamping the value into `[0, 1]`.
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f32) {
        self.data[y * self.width + x] = clamp_unit(value);
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Bilinear sample at a continuous position. Neighbours that fall
    /// outside the raster contribute zero.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let px = |xi: i64, yi: i64| -> f64 {
            if xi < 0 || yi < 0 || xi >= self.width as i64 || yi >= self.height as i64 {
                0.0
            } else {
                self.data[yi as usize * self.width + xi as usize] as f64
            }
        };
        let mut v = px(x0, y0) * (1.0 - fx) * (1.0 - fy);
        if fx != 0.0 {
            v += px(x0 + 1, y0) * fx * (1.0 - fy);
        }
        if fy != 0.0 {
            v += px(x0, y0 + 1) * (1.0 - fx) * fy;
            if fx != 0.0 {
                v += px(x0 + 1, y0 + 1) * fx * fy;
            }
        }
        v as f32
    }

    /// Copies the `w x h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height || w == 0 || h == 0 {
            return Err(Error::OutOfBounds);
        }
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        Ok(Self { width: w, height: h, data })
    }
}

#[inline]
pub(crate) fn clamp_unit(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// `(x, y) -> (a x + b y + tx, c x + d y + ty)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub c: f64,
    pub d: f64,
    pub ty: f64,
}

impl AffineTransform {
    pub const IDENTITY: Self = Self { a: 1.0, b: 0.0, tx: 0.0, c: 0.0, d: 1.0, ty: 0.0 };

    pub fn new(a: f64, b: f64, tx: f64, c: f64, d: f64, ty: f64) -> Self {
        Self { a, b, tx, c, d, ty }
    }

    pub fn from_coeffs(c: [f64; 6]) -> Self {
        Self::new(c[0], c[1], c[2], c[3], c[4], c[5])
    }

    pub fn coeffs(&self) -> [f64; 6] {
        [self.a, self.b, self.tx, self.c, self.d, self.ty]
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self { tx, ty, ..Self::IDENTITY }
    }

    /// Rotation by `angle` radians and uniform `scale` about `center`,
    /// followed by a translation.
    pub fn similarity(angle: f64, scale: f64, center: (f64, f64), shift: (f64, f64)) -> Self {
        let (s, c) = angle.sin_cos();
        let a = scale * c;
        let b = -scale * s;
        let cc = scale * s;
        let d = scale * c;
        let (cx, cy) = center;
        Self {
            a,
            b,
            tx: cx - a * cx - b * cy + shift.0,
            c: cc,
            d,
            ty: cy - cc * cx - d * cy + shift.1,
        }
    }

    pub fn determinant(&self) -> f64 {
        self.a * self.d - self.b * self.c
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.a * x + self.b * y + self.tx, self.c * x + self.d * y + self.ty)
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.determinant();
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(Error::SingularTransform(det));
        }
        let a = self.d / det;
        let b = -self.b / det;
        let c = -self.c / det;
        let d = self.a / det;
        Ok(Self {
            a,
            b,
            tx: -(a * self.tx + b * self.ty),
            c,
            d,
            ty: -(c * self.tx + d * self.ty),
        })
    }

    /// `self ∘ first`: applies `first`, then `self`.
    pub fn compose(&self, first: &Self) -> Self {
        Self {
            a: self.a * first.a + self.b * first.c,
            b: self.a * first.b + self.b * first.d,
            tx: self.a * first.tx + self.b * first.ty + self.tx,
            c: self.c * first.a + self.d * first.c,
            d: self.c * first.b + self.d * first.d,
            ty: self.c * first.tx + self.d * first.ty + self.ty,
        }
    }

    pub fn max_coeff_diff(&self, other: &Self) -> f64 {
        self.coeffs()
            .iter()
            .zip(other.coeffs())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max)
    }
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Monotone non-decreasing tone curve on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IntensityCurve {
    /// `v -> v^gamma`
    Gamma { gamma: f64 },
    /// Linear interpolation between knots `(x, y)`, with `x` strictly
    /// increasing from 0 to 1.
    PiecewiseLinear { knots: Vec<(f64, f64)> },
    /// Logistic `1 / (1 + exp(-gain (v - midpoint)))` rescaled so that
    /// 0 maps to 0 and 1 maps to 1.
    Logistic { gain: f64, midpoint: f64 },
}

impl IntensityCurve {
    pub fn identity() -> Self {
        IntensityCurve::Gamma { gamma: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            IntensityCurve::Gamma { gamma } => {
                if !(gamma.is_finite() && *gamma > 0.0) {
                    return Err(Error::InvalidParameter(format!("gamma must be > 0, got {gamma}")));
                }
            }
            IntensityCurve::PiecewiseLinear { knots } => {
                if knots.len() < 2 {
                    return Err(Error::InvalidParameter("piecewise curve needs >= 2 knots".into()));
                }
                if knots[0].0 != 0.0 || knots[knots.len() - 1].0 != 1.0 {
                    return Err(Error::InvalidParameter("piecewise knots must span x = 0..1".into()));
                }
                for w in knots.windows(2) {
                    if w[1].0 <= w[0].0 || w[1].1 < w[0].1 {
                        return Err(Error::InvalidParameter("piecewise knots must be monotone".into()));
                    }
                }
                if knots.iter().any(|k| !(0.0..=1.0).contains(&k.1)) {
                    return Err(Error::InvalidParameter("piecewise knot values must lie in [0,1]".into()));
                }
            }
            IntensityCurve::Logistic { gain, midpoint } => {
                if !(gain.is_finite() && *gain > 0.0 && midpoint.is_finite()) {
                    return Err(Error::InvalidParameter("logistic gain must be > 0".into()));
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, v: f64) -> f64 {
        let v = v.clamp(0.0, 1.0);
        let out = match self {
            IntensityCurve::Gamma { gamma } => {
                if *gamma == 1.0 {
                    v
                } else {
                    v.powf(*gamma)
                }
            }
            IntensityCurve::PiecewiseLinear { knots } => {
                let i = knots.partition_point(|k| k.0 <= v).clamp(1, knots.len() - 1);
                let (x0, y0) = knots[i - 1];
                let (x1, y1) = knots[i];
                y0 + (y1 - y0) * (v - x0) / (x1 - x0)
            }
            IntensityCurve::Logistic { gain, midpoint } => {
                let s = |t: f64| 1.0 / (1.0 + (-gain * (t - midpoint)).exp());
                let lo = s(0.0);
                let hi = s(1.0);
                (s(v) - lo) / (hi - lo)
            }
        };
        out.clamp(0.0, 1.0)
    }
}

pub fn apply_intensity_curve(img: &GrayImage, curve: &IntensityCurve) -> GrayImage {
    let data = img.data.iter().map(|&v| clamp_unit(curve.eval(v as f64) as f32)).collect();
    GrayImage { width: img.width, height: img.height, data }
}

/// Resamples `img` so that output pixel `p` takes the source value at
/// `t^-1(p)`. Samples outside the source are zero.
pub fn warp_affine(img: &GrayImage, t: &AffineTransform, out_w: usize, out_h: usize) -> Result<GrayImage> {
    let inv = t.inverse()?;
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidParameter("warp output must be non-empty".into()));
    }
    let mut data = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        for x in 0..out_w {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            data.push(clamp_unit(img.sample_bilinear(sx, sy)));
        }
    }
    Ok(GrayImage { width: out_w, height: out_h, data })
}

/// Parses a P2 or P5 PGM with `maxval <= 255`.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut pos = 0usize;
    let magic = next_token(bytes, &mut pos).ok_or_else(|| Error::MalformedHeader("missing magic".into()))?;
    let binary = match magic.as_slice() {
        b"P5" => true,
        b"P2" => false,
        other => {
            return Err(Error::MalformedHeader(format!(
                "unsupported magic {:?}",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let mut header = [0usize; 3];
    for (slot, name) in header.iter_mut().zip(["width", "height", "maxval"]) {
        let tok = next_token(bytes, &mut pos).ok_or_else(|| Error::MalformedHeader(format!("missing {name}")))?;
        *slot = std::str::from_utf8(&tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::MalformedHeader(format!("bad {name} {:?}", String::from_utf8_lossy(&tok))))?;
    }
    let [width, height, maxval] = header;
    if width == 0 || height == 0 {
        return Err(Error::MalformedHeader(format!("zero dimension {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::MalformedHeader(format!("maxval {maxval} not in 1..=255")));
    }
    let expected = width * height;
    let scale = maxval as f32;
    let mut data = Vec::with_capacity(expected);
    if binary {
        // Exactly one whitespace byte separates maxval from the raster.
        pos += 1;
        let raster = bytes.get(pos..).unwrap_or(&[]);
        if raster.len() != expected {
            return Err(Error::PixelCountMismatch { expected, found: raster.len() });
        }
        for &b in raster {
            if b as usize > maxval {
                return Err(Error::InvalidImage(format!("sample {b} exceeds maxval {maxval}")));
            }
            data.push(b as f32 / scale);
        }
    } else {
        while let Some(tok) = next_token(bytes, &mut pos) {
            let v: usize = std::str::from_utf8(&tok)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::InvalidImage(format!("bad sample {:?}", String::from_utf8_lossy(&tok))))?;
            if v > maxval {
                return Err(Error::InvalidImage(format!("sample {v} exceeds maxval {maxval}")));
            }
            data.push(v as f32 / scale);
        }
        if data.len() != expected {
            return Err(Error::PixelCountMismatch { expected, found: data.len() });
        }
    }
    Ok(GrayImage { width, height, data })
}

/// Whitespace-delimited token, skipping `#` comments. Leaves `pos` on the
/// delimiter that ended the token.
fn next_token(bytes: &[u8], pos: &mut usize) -> Option<Vec<u8>> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    (*pos > start).then(|| bytes[start..*pos].to_vec())
}

/// Binary P5, maxval 255, round half up.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| quantize(v)));
    out
}

#[inline]
pub(crate) fn quantize(v: f32) -> u8 {
    (clamp_unit(v) as f64 * 255.0 + 0.5).floor().min(255.0) as u8
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode_pgm(&bytes)
}

pub fn save_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_pgm(img))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(w: usize, h: usize) -> GrayImage {
        GrayImage::from_fn_clamped(w, h, |x, y| ((x * 7 + y * 13) % 97) as f32 / 96.0)
    }

    #[test]
    fn decode_p2_normalizes() {
        let img = decode_pgm(b"P2\n# comment\n2 2\n255\n0 255\n128 64\n").unwrap();
        assert_eq!(img.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn decode_rejects_bad_magic_and_counts() {
        assert!(matches!(decode_pgm(b"P7\n2 2\n255\n"), Err(Error::MalformedHeader(_))));
        assert!(matches!(decode_pgm(b"P5\n2 2\n300\n"), Err(Error::MalformedHeader(_))));
        assert!(matches!(
            decode_pgm(b"P5\n2 2\n255\n\x00\x01\x02"),
            Err(Error::PixelCountMismatch { expected: 4, found: 3 })
        ));
        assert!(matches!(
            decode_pgm(b"P2\n2 2\n255\n0 1 2"),
            Err(Error::PixelCountMismatch { expected: 4, found: 3 })
        ));
    }

    #[test]
    fn missing_file_is_reported() {
        let err = load_pgm("/nonexistent/definitely/missing.pgm").unwrap_err();
        assert!(matches!(err, Error::FileNotFound(_)));
    }

    #[test]
    fn encode_zero_image_and_half_rounding() {
        let bytes = encode_pgm(&GrayImage::filled(4, 4, 0.0));
        let header = b"P5\n4 4\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0u8; 16]);
        assert_eq!(quantize(0.5), 128);
    }

    #[test]
    fn warp_identity_is_exact() {
        let img = ramp(23, 17);
        assert_eq!(warp_affine(&img, &AffineTransform::IDENTITY, 23, 17).unwrap(), img);
    }

    #[test]
    fn warp_integer_translation() {
        let img = ramp(20, 10);
        let out = warp_affine(&img, &AffineTransform::translation(3.0, 0.0), 20, 10).unwrap();
        for y in 0..10 {
            for x in 0..20 {
                let expect = if x >= 3 { img.get(x - 3, y) } else { 0.0 };
                assert_eq!(out.get(x, y), expect);
            }
        }
    }

    #[test]
    fn bilinear_midpoint() {
        let img = GrayImage::new(2, 1, vec![0.0, 1.0]).unwrap();
        assert!((img.sample_bilinear(0.5, 0.0) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn singular_warp_rejected() {
        let t = AffineTransform::new(1.0, 2.0, 0.0, 2.0, 4.0, 0.0);
        assert!(matches!(warp_affine(&ramp(4, 4), &t, 4, 4), Err(Error::SingularTransform(_))));
    }

    #[test]
    fn curves() {
        let img = GrayImage::filled(3, 3, 0.5);
        assert_eq!(apply_intensity_curve(&img, &IntensityCurve::identity()), img);
        let sq = apply_intensity_curve(&img, &IntensityCurve::Gamma { gamma: 2.0 });
        assert!(sq.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
        let logistic = IntensityCurve::Logistic { gain: 8.0, midpoint: 0.4 };
        assert!(logistic.eval(0.0).abs() < 1e-12 && (logistic.eval(1.0) - 1.0).abs() < 1e-12);
        let pw = IntensityCurve::PiecewiseLinear { knots: vec![(0.0, 0.1), (0.5, 0.2), (1.0, 0.9)] };
        pw.validate().unwrap();
        assert!((pw.eval(0.75) - 0.55).abs() < 1e-12);
        assert!(IntensityCurve::Gamma { gamma: -1.0 }.validate().is_err());
    }

    #[test]
    fn inverse_and_compose() {
        let t = AffineTransform::similarity(0.3, 1.2, (10.0, 5.0), (3.0, -2.0));
        let id = t.compose(&t.inverse().unwrap());
        assert!(id.max_coeff_diff(&AffineTransform::IDENTITY) < 1e-12);
    }

    fn arb_image() -> impl Strategy<Value = GrayImage> {
        (1usize..12, 1usize..12).prop_flat_map(|(w, h)| {
            proptest::collection::vec(0.0f32..=1.0, w * h)
                .prop_map(move |d| GrayImage::new(w, h, d).unwrap())
        })
    }

    fn arb_curve() -> impl Strategy<Value = IntensityCurve> {
        prop_oneof![
            (0.1f64..5.0).prop_map(|gamma| IntensityCurve::Gamma { gamma }),
            (0.5f64..20.0, -0.5f64..1.5).prop_map(|(gain, midpoint)| IntensityCurve::Logistic { gain, midpoint }),
            (0.0f64..0.5, 0.0f64..0.5).prop_map(|(y0, dy)| IntensityCurve::PiecewiseLinear {
                knots: vec![(0.0, y0), (0.3, y0 + dy * 0.5), (1.0, y0 + dy)]
            }),
        ]
    }

    proptest! {
        #[test]
        fn pgm_round_trip_within_quantization(img in arb_image()) {
            let back = decode_pgm(&encode_pgm(&img)).unwrap();
            prop_assert_eq!(back.width(), img.width());
            for (a, b) in img.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= 1.0 / 510.0 + 1e-6);
            }
        }

        #[test]
        fn curves_stay_in_range_and_preserve_order(img in arb_image(), curve in arb_curve()) {
            let out = apply_intensity_curve(&img, &curve);
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
            for i in 0..img.data().len() {
                for j in 0..img.data().len() {
                    if img.data()[i] <= img.data()[j] {
                        prop_assert!(out.data()[i] <= out.data()[j]);
                    }
                }
            }
        }

        #[test]
        fn warp_round_trip_interior(angle in -0.3f64..0.3, scale in 0.9f64..1.1, tx in -2.0f64..2.0, ty in -2.0f64..2.0) {
            // Smooth content keeps bilinear resampling error small.
            let img = GrayImage::from_fn_clamped(40, 40, |x, y| {
                (0.5 + 0.4 * ((x as f32) * 0.15).sin() * ((y as f32) * 0.11).cos()) as f32
            });
            let t = AffineTransform::similarity(angle, scale, (20.0, 20.0), (tx, ty));
            let fwd = warp_affine(&img, &t, 40, 40).unwrap();
            let back = warp_affine(&fwd, &t.inverse().unwrap(), 40, 40).unwrap();
            // Interior: points whose round trip stays >= 2 px inside both rasters.
            for y in 0..40 {
                for x in 0..40 {
                    let (fx, fy) = t.apply(x as f64, y as f64);
                    let inside = |u: f64, v: f64| u >= 2.0 && v >= 2.0 && u <= 37.0 && v <= 37.0;
                    if inside(x as f64, y as f64) && inside(fx, fy) {
                        prop_assert!((img.get(x, y) - back.get(x, y)).abs() <= 0.05);
                    }
                }
            }
        }
    }
}
