//! Brute-force reference implementations shared by the integration tests.
//! They loop over pixels directly and share no code with the library.

#![allow(dead_code)]

use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Half-pixel bilinear sample of `map` at output pixel `(oy, ox)` of an `out` grid.
pub fn bilinear_at(map: &Array2<f64>, out: (usize, usize), oy: usize, ox: usize) -> f64 {
    let (h, w) = map.dim();
    let src = |d: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let lo = (s.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        let f = if hi == lo { 0.0 } else { s - lo as f64 };
        (lo, hi, f)
    };
    let (y0, y1, fy) = src(oy, h, out.0);
    let (x0, x1, fx) = src(ox, w, out.1);
    let top = map[[y0, x0]] * (1.0 - fx) + map[[y0, x1]] * fx;
    let bottom = map[[y1, x0]] * (1.0 - fx) + map[[y1, x1]] * fx;
    top * (1.0 - fy) + bottom * fy
}

pub fn bilinear(map: &Array2<f64>, out: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_fn(out, |(y, x)| bilinear_at(map, out, y, x))
}

/// Nearest-neighbour label lookup `src = ⌊d · in / out⌋`.
pub fn nearest_labels(labels: &Array2<u8>, out: (usize, usize)) -> Array2<u8> {
    let (h, w) = labels.dim();
    Array2::from_shape_fn(out, |(y, x)| labels[[y * h / out.0, x * w / out.1]])
}

/// WAS map of one channel: gate on the raw maximum, resize to the
/// self-attention grid, then weight each query's attention row.
pub fn was_oracle(a_ca_k: &Array2<f64>, a_sa: &Array4<f64>, gate: f64) -> (Array2<f64>, bool) {
    let (h, w, _, _) = a_sa.dim();
    let max = a_ca_k.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let passed = max > gate;
    let mut out = Array2::zeros((h, w));
    if !passed {
        return (out, false);
    }
    let r = bilinear(a_ca_k, (h, w));
    for qy in 0..h {
        for qx in 0..w {
            for ky in 0..h {
                for kx in 0..w {
                    out[[ky, kx]] += r[[qy, qx]] * a_sa[[qy, qx, ky, kx]];
                }
            }
        }
    }
    (out, true)
}

/// Class-weighted cross-entropy on channel-renormalized attention.
pub fn ce_oracle(a_ca: &Array3<f64>, labels: &Array2<u8>, k: usize) -> f64 {
    let (h, w, _) = a_ca.dim();
    let n = (h * w) as f64;
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l as usize] += 1;
    }
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let l = labels[[y, x]] as usize;
            let z: f64 = (0..k).map(|c| a_ca[[y, x, c]]).sum::<f64>().max(1e-8);
            let p = (a_ca[[y, x, l]] / z).max(1e-8);
            total += -(n / counts[l] as f64) * p.ln();
        }
    }
    total / n
}

/// Squared error between WAS maps resized to the mask and the one-hot planes.
pub fn mse_oracle(maps: &[Array2<f64>], labels: &Array2<u8>, mean: bool) -> f64 {
    let out = labels.dim();
    let mut total = 0.0;
    for (k, m) in maps.iter().enumerate() {
        let r = bilinear(m, out);
        for y in 0..out.0 {
            for x in 0..out.1 {
                let target = if labels[[y, x]] as usize == k {
                    1.0
                } else {
                    0.0
                };
                total += (r[[y, x]] - target).powi(2);
            }
        }
    }
    if mean {
        total / (maps.len() * out.0 * out.1) as f64
    } else {
        total
    }
}

pub fn ldm_oracle(predicted: &Array3<f64>, noise: &Array3<f64>, mean: bool) -> f64 {
    let mut total = 0.0;
    for (a, b) in predicted.iter().zip(noise) {
        total += (a - b).powi(2);
    }
    if mean {
        total / noise.len() as f64
    } else {
        total
    }
}

/// Per-class IoU by counting pixels; `None` when a class is in neither map.
pub fn iou_oracle(pred: &Array2<u8>, gt: &Array2<u8>, k: usize) -> Vec<Option<f64>> {
    (0..k as u8)
        .map(|c| {
            let inter = pred
                .iter()
                .zip(gt)
                .filter(|(&p, &g)| p == c && g == c)
                .count();
            let union = pred
                .iter()
                .zip(gt)
                .filter(|(&p, &g)| p == c || g == c)
                .count();
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect()
}

/// Random row-stochastic self-attention over an `(h, w)` grid.
pub fn random_self_attention(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array4<f64> {
    let mut a = Array4::from_shape_fn((h, w, h, w), |_| rng.random::<f64>());
    for qy in 0..h {
        for qx in 0..w {
            let s: f64 = a.slice(ndarray::s![qy, qx, .., ..]).sum();
            a.slice_mut(ndarray::s![qy, qx, .., ..])
                .mapv_inplace(|v| v / s);
        }
    }
    a
}

pub fn identity_self_attention(h: usize, w: usize) -> Array4<f64> {
    Array4::from_shape_fn(
        (h, w, h, w),
        |(a, b, c, d)| if a == c && b == d { 1.0 } else { 0.0 },
    )
}

pub fn random_labels(rng: &mut ChaCha8Rng, dims: (usize, usize), k: usize) -> Array2<u8> {
    Array2::from_shape_fn(dims, |_| rng.random_range(0..k) as u8)
}

pub fn max_abs_diff<'a>(
    a: impl IntoIterator<Item = &'a f64>,
    b: impl IntoIterator<Item = &'a f64>,
) -> f64 {
    a.into_iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
