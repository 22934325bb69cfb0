use serde::{Deserialize, Serialize};

use super::{Keypoint, KeypointSource};
use crate::error::{Error, Result};
use crate::imagecore::GrayImage;

/// Bresenham circle of radius 3, clockwise from 12 o'clock.
pub const CIRCLE: [(i32, i32); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

const MARGIN: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FastParams {
    /// Intensity margin `t` a circle pixel must clear.
    pub threshold: f64,
    /// Minimum contiguous run on the 16-pixel circle.
    pub arc_length: usize,
    pub nms_radius: usize,
}

impl Default for FastParams {
    fn default() -> Self {
        Self { threshold: 0.08, arc_length: 9, nms_radius: 4 }
    }
}

impl FastParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidParameter(format!("FAST threshold must be in (0,1), got {}", self.threshold)));
        }
        if !(1..=16).contains(&self.arc_length) {
            return Err(Error::InvalidParameter(format!("FAST arc length must be 1..=16, got {}", self.arc_length)));
        }
        Ok(())
    }
}

/// Segment test at `(x, y)`; returns the corner score when some run of at
/// least `arc_length` circle pixels is entirely brighter than `I + t` or
/// entirely darker than `I - t`. The score is the largest sum of absolute
/// differences over a qualifying run. `(x, y)` must be >= 3 px from every
/// border.
pub fn segment_test(img: &GrayImage, x: usize, y: usize, threshold: f64, arc_length: usize) -> Option<f64> {
    let center = img.get(x, y) as f64;
    let mut diffs = [0.0f64; 16];
    for (d, (dx, dy)) in diffs.iter_mut().zip(CIRCLE) {
        *d = img.get((x as i32 + dx) as usize, (y as i32 + dy) as usize) as f64 - center;
    }
    let bright = best_run(&diffs, |d| d > threshold, arc_length);
    let dark = best_run(&diffs, |d| d < -threshold, arc_length);
    match (bright, dark) {
        (Some(a), Some(b)) => Some(a.max(b)),
        (a, b) => a.or(b),
    }
}

fn best_run(diffs: &[f64; 16], pass: impl Fn(f64) -> bool, arc_length: usize) -> Option<f64> {
    let flags: Vec<bool> = diffs.iter().map(|&d| pass(d)).collect();
    if flags.iter().all(|&f| f) {
        return Some(diffs.iter().map(|d| d.abs()).sum());
    }
    // Start scanning just after a failing pixel so no run wraps the start.
    let start = flags.iter().position(|&f| !f)? + 1;
    let mut best: Option<f64> = None;
    let (mut len, mut sum) = (0usize, 0.0f64);
    for i in 0..16 {
        let idx = (start + i) % 16;
        if flags[idx] {
            len += 1;
            sum += diffs[idx].abs();
        } else {
            len = 0;
            sum = 0.0;
        }
        if len >= arc_length {
            best = Some(best.map_or(sum, |b: f64| b.max(sum)));
        }
    }
    best
}

/// FAST corners with radius non-maximum suppression, sorted by score
/// descending (raster order breaks ties).
pub fn detect_fast(img: &GrayImage, p: &FastParams) -> Result<Vec<Keypoint>> {
    p.validate()?;
    let (w, h) = (img.width(), img.height());
    if w.min(h) < 8 {
        return Err(Error::ImageTooSmall(format!("FAST needs min side >= 8, got {w}x{h}")));
    }
    let mut scores = vec![f64::NAN; w * h];
    let mut corners = Vec::new();
    for y in MARGIN..h - MARGIN {
        for x in MARGIN..w - MARGIN {
            if let Some(s) = segment_test(img, x, y, p.threshold, p.arc_length) {
                scores[y * w + x] = s;
                corners.push((x, y, s));
            }
        }
    }

    let r = p.nms_radius as i64;
    let mut kept: Vec<(usize, usize, f64)> = corners
        .into_iter()
        .filter(|&(x, y, s)| {
            let own = y * w + x;
            for dy in -r..=r {
                for dx in -r..=r {
                    if (dx == 0 && dy == 0) || dx * dx + dy * dy > r * r {
                        continue;
                    }
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let idx = ny as usize * w + nx as usize;
                    let other = scores[idx];
                    if other > s || (other == s && idx < own) {
                        return false;
                    }
                }
            }
            true
        })
        .collect();
    kept.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.1, a.0).cmp(&(b.1, b.0))));
    Ok(kept
        .into_iter()
        .map(|(x, y, s)| Keypoint { x: x as f64, y: y as f64, scale: 1.0, response: s, source: KeypointSource::Fast })
        .collect())
}
