//! Classification losses, the mask-supervised token contrast term, and the
//! assembly of the weighted totals.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::cam::ObjectMask;
use crate::error::{Error, Result};
use crate::util::{l2_norm, sigmoid, softplus};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_i: f64,
    pub lambda_e: f64,
    pub lambda_p: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_i: 1.0,
            lambda_e: 1.0,
            lambda_p: 0.2,
        }
    }
}

/// Unweighted loss terms of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub cls: f64,
    pub inter: f64,
    pub im: f64,
    pub ex: f64,
    pub ptc: f64,
    pub seg: f64,
    pub reg: f64,
}

/// Named per-term values plus the weighted totals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub inter: f64,
    pub im: f64,
    pub ex: f64,
    pub ptc: f64,
    pub seg: f64,
    pub reg: f64,
    pub total_l: f64,
    pub total: f64,
}

/// Combines loss parts into the weighted totals; rejects non-finite parts,
/// naming the offending term.
pub fn assemble(parts: &LossTerms, w: &LossWeights) -> Result<LossBreakdown> {
    let named = [
        ("cls", parts.cls),
        ("inter", parts.inter),
        ("im", parts.im),
        ("ex", parts.ex),
        ("ptc", parts.ptc),
        ("seg", parts.seg),
        ("reg", parts.reg),
    ];
    for (name, v) in named {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term `{name}`")));
        }
    }
    let total_l =
        parts.cls + parts.inter + w.lambda_i * parts.im + w.lambda_e * parts.ex + w.lambda_p * parts.ptc;
    let total = total_l + parts.seg + parts.reg;
    Ok(LossBreakdown {
        cls: parts.cls,
        inter: parts.inter,
        im: parts.im,
        ex: parts.ex,
        ptc: parts.ptc,
        seg: parts.seg,
        reg: parts.reg,
        total_l,
        total,
    })
}

/// Per-class score maps followed by a spatial max.
pub fn global_max_pool_logits(features: &Array3<f64>, weights: &Array2<f64>) -> Array1<f64> {
    gmp_with_argmax(features, weights).0
}

/// Same as [`global_max_pool_logits`] but also returns the flat position of
/// each class maximum (first position wins ties) for the backward pass.
pub fn gmp_with_argmax(features: &Array3<f64>, weights: &Array2<f64>) -> (Array1<f64>, Vec<usize>) {
    let (gh, gw, d) = features.dim();
    let c = weights.nrows();
    assert_eq!(d, weights.ncols(), "feature/classifier dim mismatch");
    let flat = features.to_shape((gh * gw, d)).expect("contiguous");
    let scores = flat.dot(&weights.t());
    let mut logits = Array1::zeros(c);
    let mut argmax = vec![0usize; c];
    for ci in 0..c {
        let mut best = f64::NEG_INFINITY;
        let mut pos = 0;
        for p in 0..gh * gw {
            if scores[[p, ci]] > best {
                best = scores[[p, ci]];
                pos = p;
            }
        }
        logits[ci] = best;
        argmax[ci] = pos;
    }
    (logits, argmax)
}

/// Routes logit gradients back to the classifier weights and the feature at
/// each class's max location.
pub fn gmp_backward(
    features: &Array3<f64>,
    weights: &Array2<f64>,
    argmax: &[usize],
    d_logits: &Array1<f64>,
    d_features: &mut Array3<f64>,
    d_weights: &mut Array2<f64>,
) {
    let (_, gw, d) = features.dim();
    for (c, &pos) in argmax.iter().enumerate() {
        let (y, x) = (pos / gw, pos % gw);
        let g = d_logits[c];
        if g == 0.0 {
            continue;
        }
        for k in 0..d {
            d_weights[[c, k]] += g * features[[y, x, k]];
            d_features[[y, x, k]] += g * weights[[c, k]];
        }
    }
}

/// Multi-label soft margin loss, averaged over classes:
/// `(1/C) sum_c [-y_c log s(z_c) - (1-y_c) log(1-s(z_c))]`.
pub fn multilabel_soft_margin(logits: &Array1<f64>, labels: &[f64]) -> f64 {
    assert_eq!(logits.len(), labels.len());
    let c = logits.len() as f64;
    logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| y * softplus(-z) + (1.0 - y) * softplus(z))
        .sum::<f64>()
        / c
}

/// Gradient of [`multilabel_soft_margin`] with respect to the logits.
pub fn multilabel_soft_margin_grad(logits: &Array1<f64>, labels: &[f64]) -> Array1<f64> {
    let c = logits.len() as f64;
    Array1::from_shape_fn(logits.len(), |i| (sigmoid(logits[i]) - labels[i]) / c)
}

const TOKEN_CONTRAST_TAU: f64 = 1.0;

fn mask_sides(mask: &ObjectMask) -> (Vec<usize>, Vec<usize>) {
    let flat: Vec<f64> = mask.mask.iter().cloned().collect();
    let fg: Vec<usize> = (0..flat.len()).filter(|&i| flat[i] > 0.5).collect();
    let bg: Vec<usize> = (0..flat.len()).filter(|&i| flat[i] <= 0.5).collect();
    (fg, bg)
}

fn normalized_rows(tokens: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let (n, d) = tokens.dim();
    let mut normed = Array2::zeros((n, d));
    let mut norms = vec![0.0; n];
    for i in 0..n {
        let norm = l2_norm(tokens.row(i).as_slice().unwrap());
        norms[i] = norm;
        if norm > crate::align::COS_NORM_EPS {
            for j in 0..d {
                normed[[i, j]] = tokens[[i, j]] / norm;
            }
        }
    }
    (normed, norms)
}

/// Intra-image token contrast supervised by the object mask: every ordered
/// triple (anchor, same-side positive, opposite-side negative) contributes a
/// two-way InfoNCE term on cosine logits; the result is the mean over
/// triples. Returns 0 when either mask side is empty.
pub fn token_contrast_loss(tokens: &Array2<f64>, mask: &ObjectMask) -> Result<f64> {
    let (gh, gw) = mask.mask.dim();
    if tokens.nrows() != gh * gw {
        return Err(Error::Shape(format!(
            "token count {} does not match mask grid {}x{}",
            tokens.nrows(),
            gh,
            gw
        )));
    }
    let (fg, bg) = mask_sides(mask);
    if fg.is_empty() || bg.is_empty() {
        return Ok(0.0);
    }
    let (normed, _) = normalized_rows(tokens);
    let sims = normed.dot(&normed.t());
    let mut total = 0.0;
    let mut count = 0usize;
    for (side, other) in [(&fg, &bg), (&bg, &fg)] {
        for &i in side.iter() {
            for &p in side.iter().filter(|&&p| p != i) {
                for &n in other.iter() {
                    total += softplus((sims[[i, n]] - sims[[i, p]]) / TOKEN_CONTRAST_TAU);
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(total / count as f64)
}

/// Analytic gradient of [`token_contrast_loss`] with respect to the tokens.
pub fn token_contrast_grad(tokens: &Array2<f64>, mask: &ObjectMask) -> Result<Array2<f64>> {
    let (gh, gw) = mask.mask.dim();
    if tokens.nrows() != gh * gw {
        return Err(Error::Shape("token/mask grid mismatch".into()));
    }
    let (n_tokens, d) = tokens.dim();
    let mut d_tokens = Array2::zeros((n_tokens, d));
    let (fg, bg) = mask_sides(mask);
    if fg.is_empty() || bg.is_empty() {
        return Ok(d_tokens);
    }
    let (normed, _norms) = normalized_rows(tokens);
    let sims = normed.dot(&normed.t());

    let mut count = 0usize;
    for (side, other) in [(&fg, &bg), (&bg, &fg)] {
        if side.len() >= 2 {
            count += side.len() * (side.len() - 1) * other.len();
        }
    }
    if count == 0 {
        return Ok(d_tokens);
    }
    let scale = 1.0 / (count as f64 * TOKEN_CONTRAST_TAU);

    // Accumulate dL/dS, then push through S = N N^T and the normalization.
    let mut d_sims = Array2::<f64>::zeros((n_tokens, n_tokens));
    for (side, other) in [(&fg, &bg), (&bg, &fg)] {
        for &i in side.iter() {
            for &p in side.iter().filter(|&&p| p != i) {
                for &n in other.iter() {
                    let w = sigmoid((sims[[i, n]] - sims[[i, p]]) / TOKEN_CONTRAST_TAU) * scale;
                    d_sims[[i, n]] += w;
                    d_sims[[i, p]] -= w;
                }
            }
        }
    }

    // dN = dS * N + dS^T * N
    let d_normed = d_sims.dot(&normed) + d_sims.t().dot(&normed);
    for i in 0..n_tokens {
        let x = tokens.row(i);
        let x = x.as_slice().unwrap();
        let norm = l2_norm(x);
        if norm <= crate::align::COS_NORM_EPS {
            continue;
        }
        let dn = d_normed.row(i);
        let dn = dn.as_slice().unwrap();
        let dot: f64 = x.iter().zip(dn).map(|(a, b)| a * b).sum();
        for j in 0..d {
            d_tokens[[i, j]] += dn[j] / norm - x[j] * dot / (norm * norm * norm);
        }
    }
    Ok(d_tokens)
}
