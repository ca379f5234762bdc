//! Dense image-text alignment losses in the shared projection space.
//!
//! Two levels: a global loss pulling the class token toward present-class
//! text embeddings and away from the background embedding, and a local
//! per-patch InfoNCE that cross-contrasts masked foreground/background patch
//! tokens against the foreground/background text embeddings.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::util::{l2_norm, sigmoid, softplus};

/// Norm floor for cosine stabilization; vectors at or below it behave as zero.
pub const COS_NORM_EPS: f64 = 1e-8;
/// Clamp bounds for the rescaled cosine inside the log of the global loss.
pub const GLOBAL_CLAMP: (f64, f64) = (1e-6, 1.0 - 1e-6);

/// Cosine similarity with epsilon-stabilized norms; zero vectors yield 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (l2_norm(a).max(COS_NORM_EPS) * l2_norm(b).max(COS_NORM_EPS))
}

/// Accumulates `scale * d cos(a, b) / da` into `da` and likewise for `db`.
///
/// A side whose norm is at the epsilon floor is treated as constant: the
/// stabilized cosine has slope ~1/eps there, which is an artifact of the
/// floor rather than a useful direction, so no gradient is propagated.
pub fn cosine_grad_accum(a: &[f64], b: &[f64], scale: f64, da: &mut [f64], db: &mut [f64]) {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    let ca = na.max(COS_NORM_EPS);
    let cb = nb.max(COS_NORM_EPS);
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    if na > COS_NORM_EPS {
        let inv = 1.0 / (ca * cb);
        let self_term = dot / (ca * ca * ca * cb);
        for i in 0..a.len() {
            da[i] += scale * (b[i] * inv - a[i] * self_term);
        }
    }
    if nb > COS_NORM_EPS {
        let inv = 1.0 / (ca * cb);
        let self_term = dot / (cb * cb * cb * ca);
        for i in 0..b.len() {
            db[i] += scale * (a[i] * inv - b[i] * self_term);
        }
    }
}

/// Projected features and labels consumed by the alignment losses.
#[derive(Debug, Clone)]
pub struct AlignmentInputs {
    /// Projected class token, `[d]`.
    pub class_token: Array1<f64>,
    /// Projected masked foreground patch tokens, `[N^2, d]`.
    pub fg_tokens: Array2<f64>,
    /// Projected masked background patch tokens, `[N^2, d]`.
    pub bg_tokens: Array2<f64>,
    /// Projected per-class text embeddings, `[C, d]`.
    pub text_fg: Array2<f64>,
    /// Projected background text embedding, `[d]`.
    pub text_bg: Array1<f64>,
    /// Binary image-level labels, `[C]`.
    pub labels: Vec<f64>,
}

impl AlignmentInputs {
    pub fn new(
        class_token: Array1<f64>,
        fg_tokens: Array2<f64>,
        bg_tokens: Array2<f64>,
        text_fg: Array2<f64>,
        text_bg: Array1<f64>,
        labels: Vec<f64>,
    ) -> Result<Self> {
        let d = class_token.len();
        if fg_tokens.ncols() != d
            || bg_tokens.ncols() != d
            || text_fg.ncols() != d
            || text_bg.len() != d
        {
            return Err(Error::Shape("alignment inputs disagree on projected dim".into()));
        }
        if fg_tokens.nrows() != bg_tokens.nrows() {
            return Err(Error::Shape("fg/bg token counts differ".into()));
        }
        if text_fg.nrows() != labels.len() {
            return Err(Error::Shape("label count does not match text classes".into()));
        }
        if !labels.iter().any(|&y| y > 0.5) {
            return Err(Error::Config("alignment needs at least one present class".into()));
        }
        Ok(Self {
            class_token,
            fg_tokens,
            bg_tokens,
            text_fg,
            text_bg,
            labels,
        })
    }

    fn present(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.labels.len()).filter(|&c| self.labels[c] > 0.5)
    }
}

fn rescale(x: f64) -> f64 {
    ((x + 1.0) / 2.0).clamp(GLOBAL_CLAMP.0, GLOBAL_CLAMP.1)
}

fn rescale_active(x: f64) -> bool {
    let raw = (x + 1.0) / 2.0;
    raw > GLOBAL_CLAMP.0 && raw < GLOBAL_CLAMP.1
}

/// Global alignment loss over the class token (cross-contrastive form):
/// `-sum_c y_c log s(cos(cls, t_c)) - log(1 - s(cos(cls, t_bg)))` with
/// `s(x) = clamp((x+1)/2)`.
pub fn global_align_loss(inp: &AlignmentInputs) -> f64 {
    let cls = inp.class_token.as_slice().unwrap();
    let mut loss = 0.0;
    for c in inp.present() {
        let s = cosine(cls, inp.text_fg.row(c).as_slice().unwrap());
        loss -= rescale(s).ln();
    }
    let s_bg = cosine(cls, inp.text_bg.as_slice().unwrap());
    loss -= (1.0 - rescale(s_bg)).ln();
    loss
}

/// Foreground-only variant used when cross-contrastive learning is disabled:
/// the background term is dropped entirely.
pub fn global_align_loss_fg_only(inp: &AlignmentInputs) -> f64 {
    let cls = inp.class_token.as_slice().unwrap();
    let mut loss = 0.0;
    for c in inp.present() {
        let s = cosine(cls, inp.text_fg.row(c).as_slice().unwrap());
        loss -= rescale(s).ln();
    }
    loss
}

#[derive(Debug, Clone)]
pub struct GlobalAlignGrads {
    pub d_class_token: Array1<f64>,
    pub d_text_fg: Array2<f64>,
    pub d_text_bg: Array1<f64>,
}

/// Analytic gradient of [`global_align_loss`] (or its fg-only variant when
/// `with_background` is false) with respect to every projected input.
pub fn global_align_grad(inp: &AlignmentInputs, with_background: bool) -> GlobalAlignGrads {
    let d = inp.class_token.len();
    let cls = inp.class_token.as_slice().unwrap();
    let mut d_cls = vec![0.0; d];
    let mut d_tfg = Array2::zeros(inp.text_fg.raw_dim());
    let mut d_tbg = vec![0.0; d];
    for c in inp.present() {
        let t = inp.text_fg.row(c);
        let t = t.as_slice().unwrap();
        let s = cosine(cls, t);
        if rescale_active(s) {
            // d/ds of -ln((s+1)/2) = -1/(s+1) = -(1/2)/rescale(s)
            let coeff = -0.5 / rescale(s);
            let mut row = vec![0.0; d];
            cosine_grad_accum(cls, t, coeff, &mut d_cls, &mut row);
            for (dst, src) in d_tfg.row_mut(c).iter_mut().zip(&row) {
                *dst += src;
            }
        }
    }
    if with_background {
        let t = inp.text_bg.as_slice().unwrap();
        let s = cosine(cls, t);
        if rescale_active(s) {
            // d/ds of -ln(1 - (s+1)/2) = 1/(1-s) = (1/2)/(1-rescale(s))
            let coeff = 0.5 / (1.0 - rescale(s));
            cosine_grad_accum(cls, t, coeff, &mut d_cls, &mut d_tbg);
        }
    }
    GlobalAlignGrads {
        d_class_token: Array1::from_vec(d_cls),
        d_text_fg: d_tfg,
        d_text_bg: Array1::from_vec(d_tbg),
    }
}

/// Per-patch similarity channels for the local loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalSimilarities {
    pub fg_pos: Array1<f64>,
    pub fg_neg: Array1<f64>,
    pub bg_pos: Array1<f64>,
    pub bg_neg: Array1<f64>,
}

/// Similarities of masked patch tokens against the text bank:
/// foreground patches pair positively with present-class text and negatively
/// with background text; background patches pair the other way around.
pub fn local_similarities(inp: &AlignmentInputs) -> LocalSimilarities {
    let n = inp.fg_tokens.nrows();
    let mut fg_pos = Array1::zeros(n);
    let mut fg_neg = Array1::zeros(n);
    let mut bg_pos = Array1::zeros(n);
    let mut bg_neg = Array1::zeros(n);
    let t_bg = inp.text_bg.as_slice().unwrap();
    for i in 0..n {
        let fg_i = inp.fg_tokens.row(i);
        let fg_i = fg_i.as_slice().unwrap();
        let bg_i = inp.bg_tokens.row(i);
        let bg_i = bg_i.as_slice().unwrap();
        for c in inp.present() {
            let t_c = inp.text_fg.row(c);
            let t_c = t_c.as_slice().unwrap();
            fg_pos[i] += cosine(fg_i, t_c);
            bg_neg[i] += cosine(bg_i, t_c);
        }
        fg_neg[i] = cosine(fg_i, t_bg);
        bg_pos[i] = cosine(bg_i, t_bg);
    }
    LocalSimilarities {
        fg_pos,
        fg_neg,
        bg_pos,
        bg_neg,
    }
}

/// Cross-contrastive InfoNCE over the similarity channels:
/// two-way softmax per patch on the foreground side plus a `lam`-weighted
/// two-way softmax on the background side, averaged over patches.
pub fn local_align_loss(s: &LocalSimilarities, tau: f64, lam: f64) -> f64 {
    assert!(tau > 0.0, "temperature must be positive");
    assert!(lam >= 0.0, "balance weight must be non-negative");
    let n = s.fg_pos.len() as f64;
    let mut fg_term = 0.0;
    let mut bg_term = 0.0;
    for i in 0..s.fg_pos.len() {
        // -log(e^{p/tau} / (e^{p/tau} + e^{q/tau})) = softplus((q - p)/tau)
        fg_term += softplus((s.fg_neg[i] - s.fg_pos[i]) / tau);
        bg_term += softplus((s.bg_neg[i] - s.bg_pos[i]) / tau);
    }
    fg_term / n + lam * bg_term / n
}

#[derive(Debug, Clone)]
pub struct LocalAlignGrads {
    pub d_fg_tokens: Array2<f64>,
    pub d_bg_tokens: Array2<f64>,
    pub d_text_fg: Array2<f64>,
    pub d_text_bg: Array1<f64>,
}

impl LocalAlignGrads {
    fn zeros(inp: &AlignmentInputs) -> Self {
        Self {
            d_fg_tokens: Array2::zeros(inp.fg_tokens.raw_dim()),
            d_bg_tokens: Array2::zeros(inp.bg_tokens.raw_dim()),
            d_text_fg: Array2::zeros(inp.text_fg.raw_dim()),
            d_text_bg: Array1::zeros(inp.text_bg.len()),
        }
    }
}

/// Analytic gradient of `local_align_loss(local_similarities(inp), tau, lam)`
/// with respect to every projected input.
pub fn local_align_grad(inp: &AlignmentInputs, tau: f64, lam: f64) -> LocalAlignGrads {
    let n = inp.fg_tokens.nrows();
    let nf = n as f64;
    let sims = local_similarities(inp);
    let mut g = LocalAlignGrads::zeros(inp);
    let t_bg = inp.text_bg.as_slice().unwrap();
    for i in 0..n {
        let fg_i = inp.fg_tokens.row(i);
        let fg_i = fg_i.as_slice().unwrap();
        let bg_i = inp.bg_tokens.row(i);
        let bg_i = bg_i.as_slice().unwrap();

        let w_fg = sigmoid((sims.fg_neg[i] - sims.fg_pos[i]) / tau) / (tau * nf);
        let w_bg = lam * sigmoid((sims.bg_neg[i] - sims.bg_pos[i]) / tau) / (tau * nf);

        let mut d_fg_row = vec![0.0; inp.fg_tokens.ncols()];
        let mut d_bg_row = vec![0.0; inp.bg_tokens.ncols()];
        for c in inp.present() {
            let t_c = inp.text_fg.row(c);
            let t_c = t_c.as_slice().unwrap();
            let mut d_t_row = vec![0.0; inp.text_fg.ncols()];
            // fg_pos enters with weight -w_fg, bg_neg with +w_bg.
            cosine_grad_accum(fg_i, t_c, -w_fg, &mut d_fg_row, &mut d_t_row);
            cosine_grad_accum(bg_i, t_c, w_bg, &mut d_bg_row, &mut d_t_row);
            for (dst, src) in g.d_text_fg.row_mut(c).iter_mut().zip(&d_t_row) {
                *dst += src;
            }
        }
        let mut d_t_bg = vec![0.0; inp.text_bg.len()];
        // fg_neg enters with +w_fg, bg_pos with -w_bg.
        cosine_grad_accum(fg_i, t_bg, w_fg, &mut d_fg_row, &mut d_t_bg);
        cosine_grad_accum(bg_i, t_bg, -w_bg, &mut d_bg_row, &mut d_t_bg);
        for (dst, src) in g.d_text_bg.iter_mut().zip(&d_t_bg) {
            *dst += src;
        }
        for (dst, src) in g.d_fg_tokens.row_mut(i).iter_mut().zip(&d_fg_row) {
            *dst += src;
        }
        for (dst, src) in g.d_bg_tokens.row_mut(i).iter_mut().zip(&d_bg_row) {
            *dst += src;
        }
    }
    g
}

/// Foreground-only local loss for the no-cross-contrast ablation: each
/// foreground patch contrasts its present-class similarity against the
/// absent-class text embeddings (background pairs are not used).
pub fn local_align_loss_fg_only(inp: &AlignmentInputs, tau: f64) -> f64 {
    let n = inp.fg_tokens.nrows();
    let absent: Vec<usize> = (0..inp.labels.len())
        .filter(|&c| inp.labels[c] <= 0.5)
        .collect();
    let mut total = 0.0;
    for i in 0..n {
        let fg_i = inp.fg_tokens.row(i);
        let fg_i = fg_i.as_slice().unwrap();
        let pos: f64 = inp
            .present()
            .map(|c| cosine(fg_i, inp.text_fg.row(c).as_slice().unwrap()))
            .sum();
        if absent.is_empty() {
            continue; // no negatives: the softmax is degenerate and adds 0
        }
        let mut logits = vec![pos / tau];
        for &c in &absent {
            logits.push(cosine(fg_i, inp.text_fg.row(c).as_slice().unwrap()) / tau);
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += lse - logits[0];
    }
    total / n as f64
}

/// Analytic gradient of [`local_align_loss_fg_only`].
pub fn local_align_grad_fg_only(inp: &AlignmentInputs, tau: f64) -> LocalAlignGrads {
    let n = inp.fg_tokens.nrows();
    let nf = n as f64;
    let absent: Vec<usize> = (0..inp.labels.len())
        .filter(|&c| inp.labels[c] <= 0.5)
        .collect();
    let mut g = LocalAlignGrads::zeros(inp);
    if absent.is_empty() {
        return g;
    }
    for i in 0..n {
        let fg_i = inp.fg_tokens.row(i);
        let fg_i = fg_i.as_slice().unwrap();
        let pos: f64 = inp
            .present()
            .map(|c| cosine(fg_i, inp.text_fg.row(c).as_slice().unwrap()))
            .sum();
        let mut logits = vec![pos / tau];
        for &c in &absent {
            logits.push(cosine(fg_i, inp.text_fg.row(c).as_slice().unwrap()) / tau);
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        // d(lse - z0)/dz = softmax(z) - onehot(0)
        let mut d_fg_row = vec![0.0; inp.fg_tokens.ncols()];
        let w0 = (exps[0] / sum - 1.0) / (tau * nf);
        for c in inp.present() {
            let t_c = inp.text_fg.row(c);
            let t_c = t_c.as_slice().unwrap();
            let mut d_t = vec![0.0; inp.text_fg.ncols()];
            cosine_grad_accum(fg_i, t_c, w0, &mut d_fg_row, &mut d_t);
            for (dst, src) in g.d_text_fg.row_mut(c).iter_mut().zip(&d_t) {
                *dst += src;
            }
        }
        for (k, &c) in absent.iter().enumerate() {
            let t_c = inp.text_fg.row(c);
            let t_c = t_c.as_slice().unwrap();
            let wk = (exps[k + 1] / sum) / (tau * nf);
            let mut d_t = vec![0.0; inp.text_fg.ncols()];
            cosine_grad_accum(fg_i, t_c, wk, &mut d_fg_row, &mut d_t);
            for (dst, src) in g.d_text_fg.row_mut(c).iter_mut().zip(&d_t) {
                *dst += src;
            }
        }
        for (dst, src) in g.d_fg_tokens.row_mut(i).iter_mut().zip(&d_fg_row) {
            *dst += src;
        }
    }
    g
}
