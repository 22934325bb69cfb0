//! Independent reference implementations used as test oracles. None of
//! these call into the library code paths they check.
#![allow(dead_code)]

use sonarmatch::imagecore::GrayImage;

/// Direct (non-separable) Gaussian blur of the raw image with replicated
/// borders.
pub fn direct_blur(img: &GrayImage, sigma: f64) -> Vec<f64> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let r = (3.0 * sigma).ceil() as i64;
    let g1: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = g1.iter().sum::<f64>().powi(2);
    let mut out = vec![0.0; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ky in -r..=r {
                let sy = (y + ky).clamp(0, h - 1) as usize;
                for kx in -r..=r {
                    let sx = (x + kx).clamp(0, w - 1) as usize;
                    acc += g1[(ky + r) as usize] * g1[(kx + r) as usize] * img.get(sx, sy) as f64;
                }
            }
            out[(y * w + x) as usize] = acc / norm;
        }
    }
    out
}

/// Exhaustive DoG extremum scan at base resolution over every scale the
/// pyramid covers (starting half an octave-doubling below `sigma0`). Returns `(x, y, sigma, value)` for each strict 3x3x3
/// extremum passing the contrast and curvature tests.
pub fn brute_force_dog(
    img: &GrayImage,
    octaves: usize,
    scales: usize,
    sigma0: f64,
    contrast: f64,
    edge_r: f64,
) -> Vec<(f64, f64, f64, f64)> {
    let (w, h) = (img.width(), img.height());
    let k = 2f64.powf(1.0 / scales as f64);
    let n_gauss = octaves * scales + 2;
    let first = sigma0 / 2.0;
    let gauss: Vec<Vec<f64>> = (0..n_gauss)
        .map(|j| {
            let s = first * k.powi(j as i32);
            direct_blur(img, (s * s - 0.25).sqrt())
        })
        .collect();
    let dog: Vec<Vec<f64>> = gauss.windows(2).map(|g| g[1].iter().zip(&g[0]).map(|(a, b)| a - b).collect()).collect();
    let at = |l: usize, x: usize, y: usize| dog[l][y * w + x];
    let mut found = Vec::new();
    for l in 1..dog.len() - 1 {
        for y in 2..h - 2 {
            for x in 2..w - 2 {
                let v = at(l, x, y);
                if v.abs() < contrast {
                    continue;
                }
                let mut ext = true;
                'n: for dl in 0..3 {
                    for ny in y - 1..=y + 1 {
                        for nx in x - 1..=x + 1 {
                            if dl == 1 && nx == x && ny == y {
                                continue;
                            }
                            let n = at(l + dl - 1, nx, ny);
                            if (v > 0.0 && n >= v) || (v < 0.0 && n <= v) {
                                ext = false;
                                break 'n;
                            }
                        }
                    }
                }
                if !ext {
                    continue;
                }
                let dxx = at(l, x + 1, y) + at(l, x - 1, y) - 2.0 * v;
                let dyy = at(l, x, y + 1) + at(l, x, y - 1) - 2.0 * v;
                let dxy = 0.25 * (at(l, x + 1, y + 1) - at(l, x - 1, y + 1) - at(l, x + 1, y - 1) + at(l, x - 1, y - 1));
                let det = dxx * dyy - dxy * dxy;
                let tr = dxx + dyy;
                if det > 0.0 && tr * tr * edge_r < (edge_r + 1.0).powi(2) * det {
                    found.push((x as f64, y as f64, first * k.powi(l as i32), v));
                }
            }
        }
    }
    found
}

/// Groups points closer than `radius` (single linkage) and returns one
/// representative (the first member) per group.
pub fn cluster(points: &[(f64, f64)], radius: f64) -> Vec<(f64, f64)> {
    let n = points.len();
    let mut label: Vec<usize> = (0..n).collect();
    fn find(l: &mut Vec<usize>, i: usize) -> usize {
        if l[i] != i {
            let r = find(l, l[i]);
            l[i] = r;
        }
        l[i]
    }
    for i in 0..n {
        for j in i + 1..n {
            let d = (points[i].0 - points[j].0).hypot(points[i].1 - points[j].1);
            if d < radius {
                let (a, b) = (find(&mut label, i), find(&mut label, j));
                label[a] = b;
            }
        }
    }
    let mut reps: Vec<(usize, (f64, f64))> = Vec::new();
    for i in 0..n {
        let root = find(&mut label, i);
        if !reps.iter().any(|(r, _)| *r == root) {
            reps.push((root, points[i]));
        }
    }
    reps.into_iter().map(|(_, p)| p).collect()
}

/// Segment test by enumerating every start position and run length.
pub fn brute_force_segment_test(img: &GrayImage, x: usize, y: usize, t: f64, arc: usize) -> Option<f64> {
    const RING: [(i32, i32); 16] = [
        (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
        (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
    ];
    let c = img.get(x, y) as f64;
    let ring: Vec<f64> = RING
        .iter()
        .map(|(dx, dy)| img.get((x as i32 + dx) as usize, (y as i32 + dy) as usize) as f64 - c)
        .collect();
    let mut best: Option<f64> = None;
    for sign in [1.0, -1.0] {
        for start in 0..16 {
            for len in arc..=16 {
                let run: Vec<f64> = (0..len).map(|i| ring[(start + i) % 16]).collect();
                if run.iter().all(|d| sign * d > t) {
                    let s: f64 = run.iter().map(|d| d.abs()).sum();
                    best = Some(best.map_or(s, |b| b.max(s)));
                }
            }
        }
    }
    best
}

/// All FAST corners, then radius NMS by pairwise comparison.
pub fn brute_force_fast(img: &GrayImage, t: f64, arc: usize, nms: f64) -> Vec<(f64, f64, f64)> {
    let mut corners = Vec::new();
    for y in 3..img.height() - 3 {
        for x in 3..img.width() - 3 {
            if let Some(s) = brute_force_segment_test(img, x, y, t, arc) {
                corners.push((x as f64, y as f64, s));
            }
        }
    }
    corners
        .iter()
        .enumerate()
        .filter(|(i, p)| {
            corners.iter().enumerate().all(|(j, q)| {
                if *i == j || (p.0 - q.0).hypot(p.1 - q.1) > nms {
                    return true;
                }
                q.2 < p.2 || (q.2 == p.2 && j > *i)
            })
        })
        .map(|(_, p)| *p)
        .collect()
}

pub fn gaussian_blob_image(w: usize, h: usize, blobs: &[(f64, f64)], sigma: f64, amp: f64) -> GrayImage {
    GrayImage::from_fn_clamped(w, h, |x, y| {
        blobs
            .iter()
            .map(|(cx, cy)| {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                amp * (-d2 / (2.0 * sigma * sigma)).exp()
            })
            .sum::<f64>() as f32
    })
}

pub fn square_image(size: usize, x0: usize, side: usize) -> GrayImage {
    GrayImage::from_fn_clamped(size, size, |x, y| {
        if (x0..x0 + side).contains(&x) && (x0..x0 + side).contains(&y) {
            1.0
        } else {
            0.0
        }
    })
}

/// 2D convolution with zero "same" padding by four nested loops per
/// output element: `out[o][y][x] = b[o] + sum_c sum_ky sum_kx w[o][c][ky][kx] * in[c][y+ky-1][x+kx-1]`.
pub fn direct_conv3x3(
    input: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    out_ch: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; out_ch * h * w];
    for o in 0..out_ch {
        for y in 0..h {
            for x in 0..w {
                let mut acc = bias[o];
                for c in 0..channels {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let sy = y as i64 + ky as i64 - 1;
                            let sx = x as i64 + kx as i64 - 1;
                            if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                                continue;
                            }
                            acc += weight[((o * channels + c) * 3 + ky) * 3 + kx]
                                * input[(c * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                out[(o * h + y) * w + x] = acc;
            }
        }
    }
    out
}
