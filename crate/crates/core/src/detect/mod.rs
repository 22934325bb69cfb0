//! Keypoint detection: difference-of-Gaussians blobs, FAST corners and
//! cross-mapping fusion of two aligned detections.

mod blur;
mod dog;
mod fast;
mod fuse;

use serde::{Deserialize, Serialize};

use crate::imagecore::GrayImage;

pub use blur::gaussian_blur;
pub use dog::{detect_dog, DogParams};
pub use fast::{detect_fast, segment_test, FastParams, CIRCLE};
pub use fuse::{cross_map_fuse, FusedKeypoints};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KeypointSource {
    Dog,
    Fast,
    /// Transferred from the other image through the alignment transform.
    Mapped,
}

impl KeypointSource {
    pub fn as_str(self) -> &'static str {
        match self {
            KeypointSource::Dog => "DoG",
            KeypointSource::Fast => "FAST",
            KeypointSource::Mapped => "Mapped",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    /// Detection sigma; FAST corners use 1.
    pub scale: f64,
    pub response: f64,
    pub source: KeypointSource,
}

impl Keypoint {
    pub fn dist2(&self, other: &Keypoint) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

/// Detector settings used wherever both detectors run together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub dog: DogParams,
    pub fast: FastParams,
    /// Keep only the strongest `n` keypoints of each detector.
    pub max_per_detector: Option<usize>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { dog: DogParams::default(), fast: FastParams::default(), max_per_detector: None }
    }
}

/// Runs DoG then FAST and concatenates the results (DoG first).
pub fn detect_combined(img: &GrayImage, cfg: &DetectorConfig) -> crate::Result<Vec<Keypoint>> {
    let mut dog = detect_dog(img, &cfg.dog)?;
    let mut fast = detect_fast(img, &cfg.fast)?;
    if let Some(n) = cfg.max_per_detector {
        dog.truncate(n);
        fast.truncate(n);
    }
    dog.extend(fast);
    Ok(dog)
}

/// Greedy spacing filter: strongest |response| first, dropping points
/// within `radius` of an already kept point.
pub fn dedup_keypoints(kps: &[Keypoint], radius: f64) -> Vec<Keypoint> {
    let mut order: Vec<usize> = (0..kps.len()).collect();
    order.sort_by(|&i, &j| kps[j].response.abs().total_cmp(&kps[i].response.abs()).then(i.cmp(&j)));
    let r2 = radius * radius;
    let mut kept: Vec<Keypoint> = Vec::new();
    for i in order {
        if kept.iter().all(|k| k.dist2(&kps[i]) >= r2) {
            kept.push(kps[i]);
        }
    }
    kept
}
