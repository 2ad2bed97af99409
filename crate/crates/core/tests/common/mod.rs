//! Independent scalar-loop reference implementations used by the
//! integration and acceptance tests. None of these call into the library's
//! numeric code.
#![allow(dead_code)]

use std::collections::VecDeque;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(r: &mut ChaCha8Rng, shape: (usize, usize, usize), scale: f64) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || scale * (r.random::<f64>() * 2.0 - 1.0))
}

pub fn random_map(r: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || r.random::<f64>())
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

pub fn max_rel_err(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(&x, &y)| rel_err(x, y)).fold(0.0, f64::max)
}

/// Sum over layers of per-position affine-free layer normalization.
pub fn fuse_oracle(layers: &[Array3<f64>]) -> Array3<f64> {
    let (h, w, c) = layers[0].dim();
    let mut out = Array3::zeros((h, w, c));
    for f in layers {
        for y in 0..h {
            for x in 0..w {
                let mut mean = 0.0;
                for k in 0..c {
                    mean += f[[y, x, k]];
                }
                mean /= c as f64;
                let mut var = 0.0;
                for k in 0..c {
                    var += (f[[y, x, k]] - mean) * (f[[y, x, k]] - mean);
                }
                var /= c as f64;
                let denom = (var + 1e-6).sqrt();
                for k in 0..c {
                    out[[y, x, k]] += (f[[y, x, k]] - mean) / denom;
                }
            }
        }
    }
    out
}

pub fn alpha_oracle(t: usize, gamma: f64, p: f64, m: f64, t_max: usize) -> f64 {
    let t = if t > t_max { t_max } else { t };
    gamma * ((t as f64 / t_max as f64) * (p - m) + m)
}

/// Min-max normalization; a constant map becomes zeros.
pub fn normalize_oracle(a: &Array2<f64>) -> Array2<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in a {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi - lo <= 0.0 {
        return Array2::zeros(a.dim());
    }
    a.mapv(|v| (v - lo) / (hi - lo))
}

/// `F + E ⊙ (α · norm(A) + β)` with the weight broadcast over channels.
pub fn perturb_oracle(f: &Array3<f64>, e: &Array3<f64>, mask: &Array2<f64>, alpha: f64, beta: f64) -> Array3<f64> {
    let n = normalize_oracle(mask);
    let (h, w, c) = f.dim();
    let mut out = f.clone();
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                out[[y, x, k]] = f[[y, x, k]] + e[[y, x, k]] * (alpha * n[[y, x]] + beta);
            }
        }
    }
    out
}

pub fn mse_oracle(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for (x, y) in a.iter().zip(b) {
        s += (x - y) * (x - y);
        n += 1;
    }
    s / n as f64
}

/// Per-position Euclidean distance over channels.
pub fn anomaly_map_oracle(f: &Array3<f64>, g: &Array3<f64>) -> Array2<f64> {
    let (h, w, c) = f.dim();
    let mut m = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for k in 0..c {
                s += (f[[y, x, k]] - g[[y, x, k]]).powi(2);
            }
            m[[y, x]] = s.sqrt();
        }
    }
    m
}

/// Maximum of the stride-1 average pool (in-range cells only).
pub fn image_score_oracle(m: &Array2<f64>, window: usize) -> f64 {
    let (h, w) = m.dim();
    let r = (window / 2) as isize;
    let lo = -r;
    let hi = window as isize - 1 - r;
    let mut best = 0.0f64;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (mut s, mut n) = (0.0, 0.0);
            for dy in lo..=hi {
                for dx in lo..=hi {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                        s += m[[yy as usize, xx as usize]];
                        n += 1.0;
                    }
                }
            }
            best = best.max(s / n);
        }
    }
    best
}

/// Probability that a random positive outranks a random negative, ties ½.
pub fn auroc_pairwise(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// 8-connected components by breadth-first search.
pub fn components_oracle(mask: &Array2<bool>) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut out = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if !mask[[sy, sx]] || seen[[sy, sx]] {
                continue;
            }
            let mut region = Vec::new();
            let mut q = VecDeque::from([(sy, sx)]);
            seen[[sy, sx]] = true;
            while let Some((y, x)) = q.pop_front() {
                region.push((y, x));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[[ny, nx]] && !seen[[ny, nx]] {
                            seen[[ny, nx]] = true;
                            q.push_back((ny, nx));
                        }
                    }
                }
            }
            out.push(region);
        }
    }
    out
}

/// Dense-sweep PRO: every distinct score is a threshold, each point is
/// recounted from scratch, the curve starts at the origin and the area up
/// to `limit` (linearly interpolated at the limit) is divided by `limit`.
pub fn pro_oracle(maps: &[Array2<f64>], masks: &[Array2<bool>], limit: f64) -> f64 {
    let mut thresholds: Vec<f64> = maps.iter().flat_map(|m| m.iter().copied()).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let regions: Vec<(usize, Vec<(usize, usize)>)> = masks
        .iter()
        .enumerate()
        .flat_map(|(i, m)| components_oracle(m).into_iter().map(move |r| (i, r)))
        .collect();
    let mut pts = vec![(0.0, 0.0)];
    for &t in &thresholds {
        let (mut fp, mut neg) = (0.0, 0.0);
        for (m, g) in maps.iter().zip(masks) {
            for (v, &a) in m.iter().zip(g) {
                if !a {
                    neg += 1.0;
                    if *v >= t {
                        fp += 1.0;
                    }
                }
            }
        }
        let mut overlap = 0.0;
        for (i, r) in &regions {
            let hit = r.iter().filter(|&&p| maps[*i][p] >= t).count();
            overlap += hit as f64 / r.len() as f64;
        }
        pts.push((fp / neg, overlap / regions.len() as f64));
    }
    let mut area = 0.0;
    for k in 1..pts.len() {
        let (x0, y0) = pts[k - 1];
        let (x1, y1) = pts[k];
        if x0 >= limit {
            break;
        }
        if x1 > limit {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
            return area / limit;
        }
        area += (x1 - x0) * (y0 + y1) / 2.0;
    }
    let (xl, yl) = *pts.last().unwrap();
    if xl < limit {
        area += (limit - xl) * yl;
    }
    area / limit
}
