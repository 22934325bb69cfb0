use super::{Keypoint, KeypointSource};
use crate::error::Result;
use crate::imagecore::AffineTransform;

/// Index-aligned keypoints: `a[i]` in image A corresponds to `b[i]` in B.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FusedKeypoints {
    pub a: Vec<Keypoint>,
    pub b: Vec<Keypoint>,
}

impl FusedKeypoints {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }
}

struct Candidate {
    a: Keypoint,
    b: Keypoint,
    from_richer: bool,
    index: usize,
}

/// Cross-maps the two detections through `t_ab` and fuses them.
///
/// The richer set (more points; ties go to A) is transferred into the
/// other image and merged with that image's own detections; the poorer
/// set's points receive partners through the inverse transform. Pairs
/// whose either side leaves its image are dropped. Surviving pairs are
/// then thinned greedily, strongest response first, so that no two kept
/// points lie within `dedup_radius` of each other in either image.
pub fn cross_map_fuse(
    kps_a: &[Keypoint],
    kps_b: &[Keypoint],
    t_ab: &AffineTransform,
    dedup_radius: f64,
    bounds_a: (usize, usize),
    bounds_b: (usize, usize),
) -> Result<FusedKeypoints> {
    let t_ba = t_ab.inverse()?;
    let scale_ab = t_ab.determinant().abs().sqrt();
    let a_is_richer = kps_a.len() >= kps_b.len();

    let mapped = |kp: &Keypoint, t: &AffineTransform, scale: f64| {
        let (x, y) = t.apply(kp.x, kp.y);
        Keypoint { x, y, scale: kp.scale * scale, response: kp.response, source: KeypointSource::Mapped }
    };
    let inside = |kp: &Keypoint, (w, h): (usize, usize)| kp.x >= 0.0 && kp.y >= 0.0 && kp.x < w as f64 && kp.y < h as f64;

    let mut candidates: Vec<Candidate> = Vec::with_capacity(kps_a.len() + kps_b.len());
    for (index, kp) in kps_a.iter().enumerate() {
        candidates.push(Candidate { a: *kp, b: mapped(kp, t_ab, scale_ab), from_richer: a_is_richer, index });
    }
    for (index, kp) in kps_b.iter().enumerate() {
        candidates.push(Candidate { a: mapped(kp, &t_ba, 1.0 / scale_ab), b: *kp, from_richer: !a_is_richer, index });
    }
    candidates.retain(|c| inside(&c.a, bounds_a) && inside(&c.b, bounds_b));
    candidates.sort_by(|p, q| {
        q.a.response
            .abs()
            .total_cmp(&p.a.response.abs())
            .then(q.from_richer.cmp(&p.from_richer))
            .then(p.index.cmp(&q.index))
    });

    let r2 = dedup_radius * dedup_radius;
    let mut grid_a = SpatialGrid::new(dedup_radius);
    let mut grid_b = SpatialGrid::new(dedup_radius);
    let mut out = FusedKeypoints::default();
    for c in candidates {
        if grid_a.any_within(&out.a, &c.a, r2) || grid_b.any_within(&out.b, &c.b, r2) {
            continue;
        }
        grid_a.insert(&c.a, out.a.len());
        grid_b.insert(&c.b, out.b.len());
        out.a.push(c.a);
        out.b.push(c.b);
    }
    Ok(out)
}

/// Bucketed index over kept points for radius queries.
struct SpatialGrid {
    cell: f64,
    buckets: std::collections::HashMap<(i64, i64), Vec<usize>>,
}

impl SpatialGrid {
    fn new(radius: f64) -> Self {
        Self { cell: radius.max(1e-6), buckets: Default::default() }
    }

    fn key(&self, kp: &Keypoint) -> (i64, i64) {
        ((kp.x / self.cell).floor() as i64, (kp.y / self.cell).floor() as i64)
    }

    fn insert(&mut self, kp: &Keypoint, idx: usize) {
        let key = self.key(kp);
        self.buckets.entry(key).or_default().push(idx);
    }

    fn any_within(&self, kept: &[Keypoint], kp: &Keypoint, r2: f64) -> bool {
        let (cx, cy) = self.key(kp);
        for gy in cy - 1..=cy + 1 {
            for gx in cx - 1..=cx + 1 {
                if let Some(ids) = self.buckets.get(&(gx, gy)) {
                    if ids.iter().any(|&i| kept[i].dist2(kp) < r2) {
                        return true;
                    }
                }
            }
        }
        false
    }
}
