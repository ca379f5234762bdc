//! Segmentation head, pseudo-label extraction, pixel-adaptive refinement of
//! pseudo-label probabilities, and the segmentation/smoothness losses.

use std::path::Path;

use ndarray::{Array1, Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::cam::CamStack;
use crate::error::{Error, Result};
use crate::util::{resize_chw, resize_chw_adjoint, stream_rng, trunc_normal};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SegHeadConfig {
    pub in_dim: usize,
    pub hidden_dim: usize,
    /// Foreground classes plus one background class at index 0.
    pub num_classes: usize,
}

impl Default for SegHeadConfig {
    fn default() -> Self {
        Self {
            in_dim: 64,
            hidden_dim: 64,
            num_classes: 4,
        }
    }
}

impl SegHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "segmentation needs >= 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.in_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("segmentation head dims must be positive".into()));
        }
        Ok(())
    }
}

/// Two 3x3 convolutions with ReLU, then a 1x1 prediction layer.
#[derive(Debug, Clone)]
pub struct SegHeadParams {
    pub conv1_weight: Array4<f64>,
    pub conv1_bias: Array1<f64>,
    pub conv2_weight: Array4<f64>,
    pub conv2_bias: Array1<f64>,
    pub pred_weight: Array2<f64>,
    pub pred_bias: Array1<f64>,
}

impl SegHeadParams {
    pub fn init(cfg: &SegHeadConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(seed, 0x5e6, 0);
        Ok(Self {
            conv1_weight: Array4::from_shape_fn((cfg.hidden_dim, cfg.in_dim, 3, 3), |_| {
                trunc_normal(&mut rng, 0.02)
            }),
            conv1_bias: Array1::zeros(cfg.hidden_dim),
            conv2_weight: Array4::from_shape_fn((cfg.hidden_dim, cfg.hidden_dim, 3, 3), |_| {
                trunc_normal(&mut rng, 0.02)
            }),
            conv2_bias: Array1::zeros(cfg.hidden_dim),
            pred_weight: Array2::from_shape_fn((cfg.num_classes, cfg.hidden_dim), |_| {
                trunc_normal(&mut rng, 0.02)
            }),
            pred_bias: Array1::zeros(cfg.num_classes),
        })
    }

    pub fn zeros(cfg: &SegHeadConfig) -> Self {
        Self {
            conv1_weight: Array4::zeros((cfg.hidden_dim, cfg.in_dim, 3, 3)),
            conv1_bias: Array1::zeros(cfg.hidden_dim),
            conv2_weight: Array4::zeros((cfg.hidden_dim, cfg.hidden_dim, 3, 3)),
            conv2_bias: Array1::zeros(cfg.hidden_dim),
            pred_weight: Array2::zeros((cfg.num_classes, cfg.hidden_dim)),
            pred_bias: Array1::zeros(cfg.num_classes),
        }
    }

    pub fn axpy(&mut self, a: f64, other: &Self) {
        self.conv1_weight
            .zip_mut_with(&other.conv1_weight, |d, s| *d += a * s);
        self.conv1_bias
            .zip_mut_with(&other.conv1_bias, |d, s| *d += a * s);
        self.conv2_weight
            .zip_mut_with(&other.conv2_weight, |d, s| *d += a * s);
        self.conv2_bias
            .zip_mut_with(&other.conv2_bias, |d, s| *d += a * s);
        self.pred_weight
            .zip_mut_with(&other.pred_weight, |d, s| *d += a * s);
        self.pred_bias
            .zip_mut_with(&other.pred_bias, |d, s| *d += a * s);
    }

    pub fn named_slices(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        vec![
            (
                "seg_head.conv1.weight".into(),
                self.conv1_weight.shape().to_vec(),
                self.conv1_weight.as_slice().unwrap(),
            ),
            (
                "seg_head.conv1.bias".into(),
                vec![self.conv1_bias.len()],
                self.conv1_bias.as_slice().unwrap(),
            ),
            (
                "seg_head.conv2.weight".into(),
                self.conv2_weight.shape().to_vec(),
                self.conv2_weight.as_slice().unwrap(),
            ),
            (
                "seg_head.conv2.bias".into(),
                vec![self.conv2_bias.len()],
                self.conv2_bias.as_slice().unwrap(),
            ),
            (
                "seg_head.pred.weight".into(),
                self.pred_weight.shape().to_vec(),
                self.pred_weight.as_slice().unwrap(),
            ),
            (
                "seg_head.pred.bias".into(),
                vec![self.pred_bias.len()],
                self.pred_bias.as_slice().unwrap(),
            ),
        ]
    }

    pub fn named_slices_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("seg_head.conv1.weight".into(), self.conv1_weight.as_slice_mut().unwrap()),
            ("seg_head.conv1.bias".into(), self.conv1_bias.as_slice_mut().unwrap()),
            ("seg_head.conv2.weight".into(), self.conv2_weight.as_slice_mut().unwrap()),
            ("seg_head.conv2.bias".into(), self.conv2_bias.as_slice_mut().unwrap()),
            ("seg_head.pred.weight".into(), self.pred_weight.as_slice_mut().unwrap()),
            ("seg_head.pred.bias".into(), self.pred_bias.as_slice_mut().unwrap()),
        ]
    }
}

/// Per-pixel integer labels; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelMap {
    pub labels: Array2<u8>,
}

fn conv3x3(input: &Array3<f64>, weight: &Array4<f64>, bias: &Array1<f64>) -> Array3<f64> {
    let (cin, h, w) = input.dim();
    let (cout, cin_w, _, _) = weight.dim();
    assert_eq!(cin, cin_w);
    let mut out = Array3::zeros((cout, h, w));
    for co in 0..cout {
        for y in 0..h {
            for x in 0..w {
                let mut acc = bias[co];
                for ci in 0..cin {
                    for dy in 0..3 {
                        let yy = y as isize + dy as isize - 1;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for dx in 0..3 {
                            let xx = x as isize + dx as isize - 1;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            acc += weight[[co, ci, dy, dx]] * input[[ci, yy as usize, xx as usize]];
                        }
                    }
                }
                out[[co, y, x]] = acc;
            }
        }
    }
    out
}

fn conv3x3_backward(
    input: &Array3<f64>,
    weight: &Array4<f64>,
    d_out: &Array3<f64>,
    d_weight: &mut Array4<f64>,
    d_bias: &mut Array1<f64>,
) -> Array3<f64> {
    let (cin, h, w) = input.dim();
    let cout = weight.dim().0;
    let mut d_in = Array3::zeros((cin, h, w));
    for co in 0..cout {
        for y in 0..h {
            for x in 0..w {
                let g = d_out[[co, y, x]];
                if g == 0.0 {
                    continue;
                }
                d_bias[co] += g;
                for ci in 0..cin {
                    for dy in 0..3 {
                        let yy = y as isize + dy as isize - 1;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for dx in 0..3 {
                            let xx = x as isize + dx as isize - 1;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            d_weight[[co, ci, dy, dx]] += g * input[[ci, yy as usize, xx as usize]];
                            d_in[[ci, yy as usize, xx as usize]] += g * weight[[co, ci, dy, dx]];
                        }
                    }
                }
            }
        }
    }
    d_in
}

pub struct SegHeadCache {
    input_chw: Array3<f64>,
    pre1: Array3<f64>,
    act1: Array3<f64>,
    pre2: Array3<f64>,
    act2: Array3<f64>,
    out_size: (usize, usize),
}

fn tokens_to_chw(tokens: &Array3<f64>) -> Array3<f64> {
    let (gh, gw, d) = tokens.dim();
    let mut chw = Array3::zeros((d, gh, gw));
    for y in 0..gh {
        for x in 0..gw {
            for k in 0..d {
                chw[[k, y, x]] = tokens[[y, x, k]];
            }
        }
    }
    chw
}

fn chw_to_tokens(chw: &Array3<f64>) -> Array3<f64> {
    let (d, gh, gw) = chw.dim();
    let mut tokens = Array3::zeros((gh, gw, d));
    for y in 0..gh {
        for x in 0..gw {
            for k in 0..d {
                tokens[[y, x, k]] = chw[[k, y, x]];
            }
        }
    }
    tokens
}

/// Runs the head over final patch tokens and bilinearly upsamples the grid
/// logits to `(height, width)`. Returns `[num_classes, height, width]`.
pub fn seg_forward(
    tokens: &Array3<f64>,
    cfg: &SegHeadConfig,
    params: &SegHeadParams,
    height: usize,
    width: usize,
) -> Result<Array3<f64>> {
    seg_forward_cached(tokens, cfg, params, height, width).map(|(logits, _)| logits)
}

pub fn seg_forward_cached(
    tokens: &Array3<f64>,
    cfg: &SegHeadConfig,
    params: &SegHeadParams,
    height: usize,
    width: usize,
) -> Result<(Array3<f64>, SegHeadCache)> {
    cfg.validate()?;
    let (_, _, d) = tokens.dim();
    if d != cfg.in_dim {
        return Err(Error::Shape(format!(
            "token dim {d} does not match seg head in_dim {}",
            cfg.in_dim
        )));
    }
    let input_chw = tokens_to_chw(tokens);
    let pre1 = conv3x3(&input_chw, &params.conv1_weight, &params.conv1_bias);
    let act1 = pre1.mapv(|v| v.max(0.0));
    let pre2 = conv3x3(&act1, &params.conv2_weight, &params.conv2_bias);
    let act2 = pre2.mapv(|v| v.max(0.0));

    let (hid, gh, gw) = act2.dim();
    let mut grid_logits = Array3::zeros((cfg.num_classes, gh, gw));
    for y in 0..gh {
        for x in 0..gw {
            for c in 0..cfg.num_classes {
                let mut acc = params.pred_bias[c];
                for k in 0..hid {
                    acc += params.pred_weight[[c, k]] * act2[[k, y, x]];
                }
                grid_logits[[c, y, x]] = acc;
            }
        }
    }
    let logits = resize_chw(&grid_logits, height, width);
    Ok((
        logits,
        SegHeadCache {
            input_chw,
            pre1,
            act1,
            pre2,
            act2,
            out_size: (height, width),
        },
    ))
}

/// Back-propagates logit gradients; returns the gradient on the input patch
/// tokens and accumulates parameter gradients.
pub fn seg_backward(
    d_logits: &Array3<f64>,
    cfg: &SegHeadConfig,
    params: &SegHeadParams,
    cache: &SegHeadCache,
    grads: &mut SegHeadParams,
) -> Array3<f64> {
    let (_, gh, gw) = cache.act2.dim();
    debug_assert_eq!(cache.out_size, (d_logits.dim().1, d_logits.dim().2));
    let d_grid = resize_chw_adjoint(d_logits, gh, gw);

    let hid = cfg.hidden_dim;
    let mut d_act2 = Array3::zeros((hid, gh, gw));
    for y in 0..gh {
        for x in 0..gw {
            for c in 0..cfg.num_classes {
                let g = d_grid[[c, y, x]];
                if g == 0.0 {
                    continue;
                }
                grads.pred_bias[c] += g;
                for k in 0..hid {
                    grads.pred_weight[[c, k]] += g * cache.act2[[k, y, x]];
                    d_act2[[k, y, x]] += g * params.pred_weight[[c, k]];
                }
            }
        }
    }

    let mut d_pre2 = d_act2;
    d_pre2.zip_mut_with(&cache.pre2, |g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    let d_act1 = conv3x3_backward(
        &cache.act1,
        &params.conv2_weight,
        &d_pre2,
        &mut grads.conv2_weight,
        &mut grads.conv2_bias,
    );
    let mut d_pre1 = d_act1;
    d_pre1.zip_mut_with(&cache.pre1, |g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    let d_input = conv3x3_backward(
        &cache.input_chw,
        &params.conv1_weight,
        &d_pre1,
        &mut grads.conv1_weight,
        &mut grads.conv1_bias,
    );
    chw_to_tokens(&d_input)
}

/// Per-pixel labels from upsampled CAMs: foreground where the best present
/// class exceeds `beta` (ties to the lowest class index), background
/// otherwise.
pub fn pseudo_labels(
    cams: &CamStack,
    labels: &[f64],
    beta: f64,
    height: usize,
    width: usize,
) -> PseudoLabelMap {
    let c = cams.num_classes();
    assert_eq!(labels.len(), c, "label vector does not match CAM classes");
    let up = resize_chw(&cams.maps, height, width);
    let mut out = Array2::zeros((height, width));
    for y in 0..height {
        for x in 0..width {
            let mut best = beta;
            let mut best_class = 0u8;
            for ci in 0..c {
                if labels[ci] <= 0.5 {
                    continue;
                }
                let v = up[[ci, y, x]];
                if v > best {
                    best = v;
                    best_class = ci as u8 + 1;
                }
            }
            out[[y, x]] = best_class;
        }
    }
    PseudoLabelMap { labels: out }
}

/// One-hot probability stack from a label map.
pub fn one_hot_probs(pl: &PseudoLabelMap, num_classes: usize) -> Array3<f64> {
    let (h, w) = pl.labels.dim();
    let mut probs = Array3::zeros((num_classes, h, w));
    for y in 0..h {
        for x in 0..w {
            probs[[pl.labels[[y, x]] as usize, y, x]] = 1.0;
        }
    }
    probs
}

/// Argmax per pixel; ties break to the lowest class index.
pub fn argmax_labels(probs: &Array3<f64>) -> PseudoLabelMap {
    let (c, h, w) = probs.dim();
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = probs[[0, y, x]];
            let mut best_class = 0u8;
            for ci in 1..c {
                if probs[[ci, y, x]] > best {
                    best = probs[[ci, y, x]];
                    best_class = ci as u8;
                }
            }
            out[[y, x]] = best_class;
        }
    }
    PseudoLabelMap { labels: out }
}

const PAR_SIGMA_RGB: f64 = 0.3;
const PAR_DILATIONS: [isize; 3] = [1, 2, 4];

/// Per-pixel affinity lists over the dilated 8-neighborhood.
pub struct ParKernel {
    /// For each pixel, (neighbor flat index, weight); weights sum to 1.
    neighbors: Vec<Vec<(usize, f64)>>,
    width: usize,
}

impl ParKernel {
    /// Builds the color-affinity kernel for one image.
    pub fn new(image: &Array3<f64>) -> Self {
        let (h, w, _) = image.dim();
        let mut neighbors = Vec::with_capacity(h * w);
        let inv_two_sigma2 = 1.0 / (2.0 * PAR_SIGMA_RGB * PAR_SIGMA_RGB);
        for y in 0..h {
            for x in 0..w {
                let mut entries: Vec<(usize, f64)> = Vec::with_capacity(24);
                let mut max_score = f64::NEG_INFINITY;
                let mut scores: Vec<(usize, f64)> = Vec::with_capacity(24);
                for &dil in &PAR_DILATIONS {
                    for (dy, dx) in [
                        (-1, -1),
                        (-1, 0),
                        (-1, 1),
                        (0, -1),
                        (0, 1),
                        (1, -1),
                        (1, 0),
                        (1, 1),
                    ] {
                        let ny = y as isize + dy * dil;
                        let nx = x as isize + dx * dil;
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        let mut d2 = 0.0;
                        for ch in 0..3 {
                            let diff = image[[y, x, ch]] - image[[ny, nx, ch]];
                            d2 += diff * diff;
                        }
                        let score = -d2 * inv_two_sigma2;
                        max_score = max_score.max(score);
                        scores.push((ny * w + nx, score));
                    }
                }
                let mut sum = 0.0;
                for &(idx, score) in &scores {
                    let e = (score - max_score).exp();
                    sum += e;
                    entries.push((idx, e));
                }
                for e in entries.iter_mut() {
                    e.1 /= sum;
                }
                neighbors.push(entries);
            }
        }
        Self { neighbors, width: w }
    }

    fn smooth(&self, probs: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = probs.dim();
        let mut out = Array3::zeros((c, h, w));
        for y in 0..h {
            for x in 0..w {
                for &(nidx, wgt) in &self.neighbors[y * w + x] {
                    let (ny, nx) = (nidx / self.width, nidx % self.width);
                    for ci in 0..c {
                        out[[ci, y, x]] += wgt * probs[[ci, ny, nx]];
                    }
                }
            }
        }
        out
    }
}

/// Iterative color-affinity smoothing of per-pixel probabilities. Each
/// iteration replaces a pixel's distribution by the affinity-weighted average
/// of its dilated 8-neighborhood; the per-pixel simplex is preserved.
pub fn pixel_adaptive_refine(
    image: &Array3<f64>,
    probs: &Array3<f64>,
    iters: usize,
) -> Result<Array3<f64>> {
    let (_, h, w) = probs.dim();
    let (ih, iw, _) = image.dim();
    if (h, w) != (ih, iw) {
        return Err(Error::Shape(format!(
            "probability map {h}x{w} does not match image {ih}x{iw}"
        )));
    }
    check_simplex(probs, 1e-5)?;
    if iters == 0 {
        return Ok(probs.clone());
    }
    let kernel = ParKernel::new(image);
    let mut current = probs.clone();
    for _ in 0..iters {
        current = kernel.smooth(&current);
    }
    Ok(current)
}

fn check_simplex(probs: &Array3<f64>, tol: f64) -> Result<()> {
    let (c, h, w) = probs.dim();
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            for ci in 0..c {
                let v = probs[[ci, y, x]];
                if !v.is_finite() || v < -tol {
                    return Err(Error::Data(format!(
                        "probability out of range at ({y},{x}): {v}"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > tol {
                return Err(Error::Data(format!(
                    "probabilities at ({y},{x}) sum to {sum}, not 1"
                )));
            }
        }
    }
    Ok(())
}

/// Mean per-pixel softmax cross-entropy against integer labels.
pub fn seg_loss(logits: &Array3<f64>, pl: &PseudoLabelMap) -> f64 {
    let (c, h, w) = logits.dim();
    assert_eq!((h, w), pl.labels.dim(), "logit/label size mismatch");
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let mut max = f64::NEG_INFINITY;
            for ci in 0..c {
                max = max.max(logits[[ci, y, x]]);
            }
            let mut lse = 0.0;
            for ci in 0..c {
                lse += (logits[[ci, y, x]] - max).exp();
            }
            let lse = max + lse.ln();
            total += lse - logits[[pl.labels[[y, x]] as usize, y, x]];
        }
    }
    total / (h * w) as f64
}

/// Gradient of [`seg_loss`] with respect to the logits: `(softmax - onehot) / (H*W)`.
pub fn seg_loss_grad(logits: &Array3<f64>, pl: &PseudoLabelMap) -> Array3<f64> {
    let (c, h, w) = logits.dim();
    let scale = 1.0 / (h * w) as f64;
    let mut grad = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut max = f64::NEG_INFINITY;
            for ci in 0..c {
                max = max.max(logits[[ci, y, x]]);
            }
            let mut sum = 0.0;
            for ci in 0..c {
                sum += (logits[[ci, y, x]] - max).exp();
            }
            for ci in 0..c {
                let p = (logits[[ci, y, x]] - max).exp() / sum;
                grad[[ci, y, x]] = p * scale;
            }
            grad[[pl.labels[[y, x]] as usize, y, x]] -= scale;
        }
    }
    grad
}

/// Per-pixel softmax over the class axis.
pub fn softmax_probs(logits: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = logits.dim();
    let mut probs = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut max = f64::NEG_INFINITY;
            for ci in 0..c {
                max = max.max(logits[[ci, y, x]]);
            }
            let mut sum = 0.0;
            for ci in 0..c {
                let e = (logits[[ci, y, x]] - max).exp();
                probs[[ci, y, x]] = e;
                sum += e;
            }
            for ci in 0..c {
                probs[[ci, y, x]] /= sum;
            }
        }
    }
    probs
}

/// Chain rule through the per-pixel softmax: given dL/dprobs, returns dL/dlogits.
pub fn softmax_probs_backward(probs: &Array3<f64>, d_probs: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = probs.dim();
    let mut d_logits = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut dot = 0.0;
            for ci in 0..c {
                dot += d_probs[[ci, y, x]] * probs[[ci, y, x]];
            }
            for ci in 0..c {
                d_logits[[ci, y, x]] = probs[[ci, y, x]] * (d_probs[[ci, y, x]] - dot);
            }
        }
    }
    d_logits
}

const REG_SIGMA_RGB: f64 = 0.15;

fn reg_pair_count(h: usize, w: usize) -> usize {
    h * (w - 1) + (h - 1) * w
}

/// Color-weighted pairwise smoothness over 4-neighbor pairs:
/// mean of `exp(-||rgb_p - rgb_q||^2 / (2 sigma^2)) * ||prob_p - prob_q||_1`.
pub fn reg_loss(image: &Array3<f64>, probs: &Array3<f64>) -> f64 {
    let (c, h, w) = probs.dim();
    assert_eq!((image.dim().0, image.dim().1), (h, w), "image/prob size mismatch");
    let inv = 1.0 / (2.0 * REG_SIGMA_RGB * REG_SIGMA_RGB);
    let mut total = 0.0;
    let mut pair = |y0: usize, x0: usize, y1: usize, x1: usize| {
        let mut d2 = 0.0;
        for ch in 0..3 {
            let diff = image[[y0, x0, ch]] - image[[y1, x1, ch]];
            d2 += diff * diff;
        }
        let weight = (-d2 * inv).exp();
        let mut l1 = 0.0;
        for ci in 0..c {
            l1 += (probs[[ci, y0, x0]] - probs[[ci, y1, x1]]).abs();
        }
        total += weight * l1;
    };
    for y in 0..h {
        for x in 0..w.saturating_sub(1) {
            pair(y, x, y, x + 1);
        }
    }
    for y in 0..h.saturating_sub(1) {
        for x in 0..w {
            pair(y, x, y + 1, x);
        }
    }
    total / reg_pair_count(h, w) as f64
}

/// Subgradient of [`reg_loss`] with respect to the probabilities
/// (`sign(0) = 0` on the absolute values).
pub fn reg_loss_grad(image: &Array3<f64>, probs: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = probs.dim();
    let inv = 1.0 / (2.0 * REG_SIGMA_RGB * REG_SIGMA_RGB);
    let scale = 1.0 / reg_pair_count(h, w) as f64;
    let mut grad = Array3::zeros((c, h, w));
    let pair = |grad: &mut Array3<f64>, y0: usize, x0: usize, y1: usize, x1: usize| {
        let mut d2 = 0.0;
        for ch in 0..3 {
            let diff = image[[y0, x0, ch]] - image[[y1, x1, ch]];
            d2 += diff * diff;
        }
        let weight = (-d2 * inv).exp() * scale;
        for ci in 0..c {
            let diff = probs[[ci, y0, x0]] - probs[[ci, y1, x1]];
            let s = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            grad[[ci, y0, x0]] += weight * s;
            grad[[ci, y1, x1]] -= weight * s;
        }
    };
    for y in 0..h {
        for x in 0..w.saturating_sub(1) {
            pair(&mut grad, y, x, y, x + 1);
        }
    }
    for y in 0..h.saturating_sub(1) {
        for x in 0..w {
            pair(&mut grad, y, x, y + 1, x);
        }
    }
    grad
}

/// Writes a label map as an indexed-color PNG with the fixed palette.
pub fn write_label_png(pl: &PseudoLabelMap, num_classes: usize, path: &Path) -> Result<()> {
    let (h, w) = pl.labels.dim();
    let indices: Vec<u8> = pl.labels.iter().cloned().collect();
    crate::pngio::write_indexed(path, w, h, &indices, &crate::pngio::label_palette(num_classes))
}

/// Reads a label map written by [`write_label_png`].
pub fn read_label_png(path: &Path) -> Result<PseudoLabelMap> {
    let (w, h, indices) = crate::pngio::read_indexed(path)?;
    Ok(PseudoLabelMap {
        labels: Array2::from_shape_vec((h, w), indices).expect("sized by decoder"),
    })
}
