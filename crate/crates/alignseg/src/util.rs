//! Shared numeric helpers: seeding, stable scalar functions, bilinear resampling.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 step, used to derive independent seeds from a base seed.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a stream seed from a base seed and two stream coordinates.
/// Distinct (tag, idx) pairs give independent streams for the same base.
pub fn mix_seed(base: u64, tag: u64, idx: u64) -> u64 {
    let mut s = base ^ 0x6c62_272e_07bb_0142;
    let a = splitmix64(&mut s);
    let mut s2 = a ^ tag.wrapping_mul(0x0100_0000_01b3);
    let b = splitmix64(&mut s2);
    let mut s3 = b ^ idx.wrapping_add(0x9e37_79b9);
    splitmix64(&mut s3)
}

/// Deterministic RNG for a derived stream.
pub fn stream_rng(base: u64, tag: u64, idx: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(base, tag, idx))
}

/// Truncated normal sample: resamples until |x| <= 2*std.
pub fn trunc_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0, std).expect("valid std");
    loop {
        let x = dist.sample(rng);
        if x.abs() <= 2.0 * std {
            return x;
        }
    }
}

/// Numerically stable log(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Source positions and weights for 1-D bilinear resampling with
/// corner-aligned endpoints. `src_len == dst_len` reduces to the identity.
pub fn bilinear_axis(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f64)> {
    assert!(src_len >= 1 && dst_len >= 1);
    (0..dst_len)
        .map(|i| {
            let pos = if dst_len == 1 {
                (src_len - 1) as f64 / 2.0
            } else {
                i as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64
            };
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src_len - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Bilinear resize of a `[h, w, c]` grid over its spatial axes.
pub fn resize_grid_hwc(src: &Array3<f64>, new_h: usize, new_w: usize) -> Array3<f64> {
    let (h, w, c) = src.dim();
    let ys = bilinear_axis(h, new_h);
    let xs = bilinear_axis(w, new_w);
    let mut out = Array3::zeros((new_h, new_w, c));
    for (yi, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (xi, &(x0, x1, fx)) in xs.iter().enumerate() {
            for k in 0..c {
                let top = src[[y0, x0, k]] * (1.0 - fx) + src[[y0, x1, k]] * fx;
                let bot = src[[y1, x0, k]] * (1.0 - fx) + src[[y1, x1, k]] * fx;
                out[[yi, xi, k]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Adjoint of `resize_grid_hwc`: scatters gradients at the output resolution
/// back to the source grid with the same interpolation weights.
pub fn resize_grid_hwc_adjoint(
    grad_out: &Array3<f64>,
    src_h: usize,
    src_w: usize,
) -> Array3<f64> {
    let (nh, nw, c) = grad_out.dim();
    let ys = bilinear_axis(src_h, nh);
    let xs = bilinear_axis(src_w, nw);
    let mut grad_src = Array3::zeros((src_h, src_w, c));
    for (yi, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (xi, &(x0, x1, fx)) in xs.iter().enumerate() {
            for k in 0..c {
                let g = grad_out[[yi, xi, k]];
                grad_src[[y0, x0, k]] += g * (1.0 - fy) * (1.0 - fx);
                grad_src[[y0, x1, k]] += g * (1.0 - fy) * fx;
                grad_src[[y1, x0, k]] += g * fy * (1.0 - fx);
                grad_src[[y1, x1, k]] += g * fy * fx;
            }
        }
    }
    grad_src
}

/// Bilinear resize of a `[c, h, w]` stack over its spatial axes.
pub fn resize_chw(src: &Array3<f64>, new_h: usize, new_w: usize) -> Array3<f64> {
    let (c, h, w) = src.dim();
    let ys = bilinear_axis(h, new_h);
    let xs = bilinear_axis(w, new_w);
    let mut out = Array3::zeros((c, new_h, new_w));
    for k in 0..c {
        for (yi, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (xi, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = src[[k, y0, x0]] * (1.0 - fx) + src[[k, y0, x1]] * fx;
                let bot = src[[k, y1, x0]] * (1.0 - fx) + src[[k, y1, x1]] * fx;
                out[[k, yi, xi]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Adjoint of `resize_chw`.
pub fn resize_chw_adjoint(grad_out: &Array3<f64>, src_h: usize, src_w: usize) -> Array3<f64> {
    let (c, nh, nw) = grad_out.dim();
    let ys = bilinear_axis(src_h, nh);
    let xs = bilinear_axis(src_w, nw);
    let mut grad_src = Array3::zeros((c, src_h, src_w));
    for k in 0..c {
        for (yi, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (xi, &(x0, x1, fx)) in xs.iter().enumerate() {
                let g = grad_out[[k, yi, xi]];
                grad_src[[k, y0, x0]] += g * (1.0 - fy) * (1.0 - fx);
                grad_src[[k, y0, x1]] += g * (1.0 - fy) * fx;
                grad_src[[k, y1, x0]] += g * fy * (1.0 - fx);
                grad_src[[k, y1, x1]] += g * fy * fx;
            }
        }
    }
    grad_src
}

/// Row-wise softmax in place.
pub fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}
