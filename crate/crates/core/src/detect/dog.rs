use serde::{Deserialize, Serialize};

use super::blur::gaussian_blur;
use super::{Keypoint, KeypointSource};
use crate::error::{Error, Result};
use crate::imagecore::GrayImage;

/// Blur already present in the input raster.
const ASSUMED_INPUT_SIGMA: f64 = 0.5;
/// Candidates below this fraction of the contrast threshold are not refined.
const PREFILTER: f64 = 0.5;
const BORDER: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DogParams {
    pub octaves: usize,
    pub scales_per_octave: usize,
    pub base_sigma: f64,
    pub contrast_threshold: f64,
    /// Principal-curvature ratio limit `r`.
    pub edge_threshold: f64,
}

impl Default for DogParams {
    fn default() -> Self {
        Self {
            octaves: 3,
            scales_per_octave: 3,
            base_sigma: 1.6,
            contrast_threshold: 0.015,
            edge_threshold: 10.0,
        }
    }
}

impl DogParams {
    pub fn validate(&self) -> Result<()> {
        if self.octaves == 0 || self.scales_per_octave == 0 {
            return Err(Error::InvalidParameter("DoG octaves and scales must be positive".into()));
        }
        for (name, v) in [
            ("base_sigma", self.base_sigma),
            ("contrast_threshold", self.contrast_threshold),
            ("edge_threshold", self.edge_threshold),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

struct Layer {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Layer {
    #[inline]
    fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.w + x]
    }
}

/// Scale-space extrema of the difference-of-Gaussians pyramid, sorted by
/// |response| descending.
pub fn detect_dog(img: &GrayImage, p: &DogParams) -> Result<Vec<Keypoint>> {
    p.validate()?;
    if img.width().min(img.height()) < 32 {
        return Err(Error::ImageTooSmall(format!(
            "DoG needs min side >= 32, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    let s = p.scales_per_octave;
    let k = 2f64.powf(1.0 / s as f64);
    let input_sigma = 2.0 * ASSUMED_INPUT_SIGMA;
    let pre = (p.base_sigma * p.base_sigma - input_sigma * input_sigma).max(0.0).sqrt();

    // The first octave runs on a 2x upsampled copy so that blobs near the
    // base sigma still have a finer DoG layer below them.
    let (mut base, mut w, mut h) = upsample2(img);
    base = gaussian_blur(&base, w, h, pre);

    let mut keypoints = Vec::new();
    for octave in 0..p.octaves {
        if w.min(h) < 2 * BORDER + 3 {
            break;
        }
        let mut gauss = vec![base];
        for i in 1..s + 3 {
            let prev = p.base_sigma * k.powi(i as i32 - 1);
            let total = prev * k;
            let inc = (total * total - prev * prev).sqrt();
            let next = gaussian_blur(&gauss[i - 1], w, h, inc);
            gauss.push(next);
        }
        let dogs: Vec<Layer> = gauss
            .windows(2)
            .map(|g| Layer { w, h, data: g[1].iter().zip(&g[0]).map(|(a, b)| a - b).collect() })
            .collect();

        let factor = 2f64.powi(octave as i32 - 1);
        for l in 1..=s {
            scan_layer(&dogs, l, p, |x, y, ds, response| {
                let sigma = p.base_sigma * 2f64.powf(octave as f64 - 1.0 + (l as f64 + ds) / s as f64);
                let bx = (x * factor).clamp(0.0, img.width() as f64 - 1.0);
                let by = (y * factor).clamp(0.0, img.height() as f64 - 1.0);
                keypoints.push(Keypoint { x: bx, y: by, scale: sigma, response, source: KeypointSource::Dog });
            });
        }

        // Next octave starts from the image at twice the base sigma.
        let src = &gauss[s];
        let (nw, nh) = (w / 2, h / 2);
        let mut next = Vec::with_capacity(nw * nh);
        for y in 0..nh {
            for x in 0..nw {
                next.push(src[2 * y * w + 2 * x]);
            }
        }
        base = next;
        w = nw;
        h = nh;
    }
    keypoints.sort_by(|a, b| b.response.abs().total_cmp(&a.response.abs()));
    Ok(keypoints)
}

fn upsample2(img: &GrayImage) -> (Vec<f64>, usize, usize) {
    let (w, h) = (img.width(), img.height());
    let (uw, uh) = (2 * w, 2 * h);
    let px = |x: usize, y: usize| img.get(x.min(w - 1), y.min(h - 1)) as f64;
    let mut out = Vec::with_capacity(uw * uh);
    for y in 0..uh {
        let (y0, fy) = (y / 2, if y % 2 == 1 { 0.5 } else { 0.0 });
        for x in 0..uw {
            let (x0, fx) = (x / 2, if x % 2 == 1 { 0.5 } else { 0.0 });
            let top = px(x0, y0) * (1.0 - fx) + px(x0 + 1, y0) * fx;
            let bottom = px(x0, y0 + 1) * (1.0 - fx) + px(x0 + 1, y0 + 1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    (out, uw, uh)
}

fn scan_layer(dogs: &[Layer], l: usize, p: &DogParams, mut emit: impl FnMut(f64, f64, f64, f64)) {
    let (below, cur, above) = (&dogs[l - 1], &dogs[l], &dogs[l + 1]);
    let (w, h) = (cur.w, cur.h);
    let r = p.edge_threshold;
    let edge_limit = (r + 1.0) * (r + 1.0) / r;
    for y in BORDER..h - BORDER {
        for x in BORDER..w - BORDER {
            let v = cur.at(x, y);
            if v.abs() < PREFILTER * p.contrast_threshold {
                continue;
            }
            if !is_strict_extremum(v, x, y, [below, cur, above]) {
                continue;
            }
            let dx = 0.5 * (cur.at(x + 1, y) - cur.at(x - 1, y));
            let dy = 0.5 * (cur.at(x, y + 1) - cur.at(x, y - 1));
            let ds = 0.5 * (above.at(x, y) - below.at(x, y));
            let dxx = cur.at(x + 1, y) + cur.at(x - 1, y) - 2.0 * v;
            let dyy = cur.at(x, y + 1) + cur.at(x, y - 1) - 2.0 * v;
            let dss = above.at(x, y) + below.at(x, y) - 2.0 * v;
            let dxy = 0.25 * (cur.at(x + 1, y + 1) - cur.at(x - 1, y + 1) - cur.at(x + 1, y - 1) + cur.at(x - 1, y - 1));
            let dxs = 0.25 * (above.at(x + 1, y) - above.at(x - 1, y) - below.at(x + 1, y) + below.at(x - 1, y));
            let dys = 0.25 * (above.at(x, y + 1) - above.at(x, y - 1) - below.at(x, y + 1) + below.at(x, y - 1));

            let hess = nalgebra::Matrix3::new(dxx, dxy, dxs, dxy, dyy, dys, dxs, dys, dss);
            let grad = nalgebra::Vector3::new(dx, dy, ds);
            let offset = hess
                .try_inverse()
                .map(|inv| -(inv * grad))
                .unwrap_or_else(nalgebra::Vector3::zeros)
                .map(|o| if o.is_finite() { o.clamp(-0.5, 0.5) } else { 0.0 });
            let response = v + 0.5 * grad.dot(&offset);
            if response.abs() < p.contrast_threshold {
                continue;
            }
            let tr = dxx + dyy;
            let det = dxx * dyy - dxy * dxy;
            if det <= 0.0 || tr * tr >= edge_limit * det {
                continue;
            }
            emit(x as f64 + offset[0], y as f64 + offset[1], offset[2], response);
        }
    }
}

#[inline]
fn is_strict_extremum(v: f64, x: usize, y: usize, layers: [&Layer; 3]) -> bool {
    let is_max = v > 0.0;
    for (li, layer) in layers.iter().enumerate() {
        for ny in y - 1..=y + 1 {
            for nx in x - 1..=x + 1 {
                if li == 1 && nx == x && ny == y {
                    continue;
                }
                let n = layer.at(nx, ny);
                if (is_max && n >= v) || (!is_max && n <= v) {
                    return false;
                }
            }
        }
    }
    true
}
