//! Compact patch-token visual encoder.
//!
//! Produces a class token, a grid of patch tokens, and a feature tap after an
//! intermediate block. Forward and backward passes are written directly over
//! f64 arrays so gradients stay inspectable and testable.

use ndarray::{s, Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{
    all_finite, resize_grid_hwc, resize_grid_hwc_adjoint, softmax_rows, stream_rng, trunc_normal,
};

pub const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;
const MLP_RATIO: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub token_dim: usize,
    /// 1-based index of the block whose output feeds the intermediate tap.
    pub intermediate_block: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            num_blocks: 4,
            num_heads: 4,
            token_dim: 64,
            intermediate_block: 3,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} must be divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.intermediate_block < 1 || self.intermediate_block >= self.num_blocks {
            return Err(Error::Config(format!(
                "intermediate_block {} must satisfy 1 <= it < num_blocks {}",
                self.intermediate_block, self.num_blocks
            )));
        }
        if self.num_heads == 0 || !self.token_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "token_dim {} must be divisible by num_heads {}",
                self.token_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }
}

/// Encoder outputs for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    /// Final-block class token, `[token_dim]`.
    pub class_token: Array1<f64>,
    /// Final-block patch tokens, `[grid_h, grid_w, token_dim]` (row-major grid).
    pub patch_tokens: Array3<f64>,
    /// Patch tokens after the intermediate block, same shape as `patch_tokens`.
    pub intermediate: Array3<f64>,
}

impl FeatureBundle {
    /// Flattens a `[gh, gw, d]` grid into `[gh*gw, d]` tokens, row-major.
    pub fn flatten_grid(grid: &Array3<f64>) -> Array2<f64> {
        let (gh, gw, d) = grid.dim();
        grid.to_shape((gh * gw, d)).expect("contiguous grid").to_owned()
    }

    /// Inverse of `flatten_grid`.
    pub fn unflatten_tokens(tokens: &Array2<f64>, gh: usize, gw: usize) -> Array3<f64> {
        let (n, d) = tokens.dim();
        assert_eq!(n, gh * gw);
        tokens
            .to_shape((gh, gw, d))
            .expect("contiguous tokens")
            .to_owned()
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub weight: Array1<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct MlpParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub norm1: LayerNormParams,
    pub attn: AttentionParams,
    pub norm2: LayerNormParams,
    pub mlp: MlpParams,
}

/// All learnable encoder parameters. The same struct doubles as the gradient
/// container (`zeros`).
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub patch_weight: Array2<f64>,
    pub patch_bias: Array1<f64>,
    pub cls_token: Array1<f64>,
    pub pos_cls: Array1<f64>,
    pub pos_grid: Array3<f64>,
    pub blocks: Vec<BlockParams>,
    pub final_norm: LayerNormParams,
}

impl EncoderParams {
    pub fn init(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.token_dim;
        let pdim = cfg.patch_size * cfg.patch_size * 3;
        let g = cfg.grid_side();
        let mut rng = stream_rng(cfg.seed, 0x0e0c, 0);
        let mut tn2 = |rows: usize, cols: usize| {
            Array2::from_shape_fn((rows, cols), |_| trunc_normal(&mut rng, INIT_STD))
        };
        let patch_weight = tn2(d, pdim);
        let blocks = (0..cfg.num_blocks)
            .map(|_| BlockParams {
                norm1: LayerNormParams {
                    weight: Array1::ones(d),
                    bias: Array1::zeros(d),
                },
                attn: AttentionParams {
                    wq: tn2(d, d),
                    bq: Array1::zeros(d),
                    wk: tn2(d, d),
                    bk: Array1::zeros(d),
                    wv: tn2(d, d),
                    bv: Array1::zeros(d),
                    wo: tn2(d, d),
                    bo: Array1::zeros(d),
                },
                norm2: LayerNormParams {
                    weight: Array1::ones(d),
                    bias: Array1::zeros(d),
                },
                mlp: MlpParams {
                    w1: tn2(MLP_RATIO * d, d),
                    b1: Array1::zeros(MLP_RATIO * d),
                    w2: tn2(d, MLP_RATIO * d),
                    b2: Array1::zeros(d),
                },
            })
            .collect();
        let cls_token = Array1::from_shape_fn(d, |_| trunc_normal(&mut rng, INIT_STD));
        let pos_cls = Array1::from_shape_fn(d, |_| trunc_normal(&mut rng, INIT_STD));
        let pos_grid = Array3::from_shape_fn((g, g, d), |_| trunc_normal(&mut rng, INIT_STD));
        Ok(Self {
            patch_weight,
            patch_bias: Array1::zeros(d),
            cls_token,
            pos_cls,
            pos_grid,
            blocks,
            final_norm: LayerNormParams {
                weight: Array1::ones(d),
                bias: Array1::zeros(d),
            },
        })
    }

    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let d = cfg.token_dim;
        let pdim = cfg.patch_size * cfg.patch_size * 3;
        let g = cfg.grid_side();
        let zero_ln = || LayerNormParams {
            weight: Array1::zeros(d),
            bias: Array1::zeros(d),
        };
        Self {
            patch_weight: Array2::zeros((d, pdim)),
            patch_bias: Array1::zeros(d),
            cls_token: Array1::zeros(d),
            pos_cls: Array1::zeros(d),
            pos_grid: Array3::zeros((g, g, d)),
            blocks: (0..cfg.num_blocks)
                .map(|_| BlockParams {
                    norm1: zero_ln(),
                    attn: AttentionParams {
                        wq: Array2::zeros((d, d)),
                        bq: Array1::zeros(d),
                        wk: Array2::zeros((d, d)),
                        bk: Array1::zeros(d),
                        wv: Array2::zeros((d, d)),
                        bv: Array1::zeros(d),
                        wo: Array2::zeros((d, d)),
                        bo: Array1::zeros(d),
                    },
                    norm2: zero_ln(),
                    mlp: MlpParams {
                        w1: Array2::zeros((MLP_RATIO * d, d)),
                        b1: Array1::zeros(MLP_RATIO * d),
                        w2: Array2::zeros((d, MLP_RATIO * d)),
                        b2: Array1::zeros(d),
                    },
                })
                .collect(),
            final_norm: zero_ln(),
        }
    }

    /// `self += a * other`, field by field.
    pub fn axpy(&mut self, a: f64, other: &Self) {
        fn ax1(dst: &mut Array1<f64>, a: f64, src: &Array1<f64>) {
            dst.zip_mut_with(src, |d, s| *d += a * s);
        }
        fn ax2(dst: &mut Array2<f64>, a: f64, src: &Array2<f64>) {
            dst.zip_mut_with(src, |d, s| *d += a * s);
        }
        ax2(&mut self.patch_weight, a, &other.patch_weight);
        ax1(&mut self.patch_bias, a, &other.patch_bias);
        ax1(&mut self.cls_token, a, &other.cls_token);
        ax1(&mut self.pos_cls, a, &other.pos_cls);
        self.pos_grid.zip_mut_with(&other.pos_grid, |d, s| *d += a * s);
        for (b, ob) in self.blocks.iter_mut().zip(&other.blocks) {
            ax1(&mut b.norm1.weight, a, &ob.norm1.weight);
            ax1(&mut b.norm1.bias, a, &ob.norm1.bias);
            ax2(&mut b.attn.wq, a, &ob.attn.wq);
            ax1(&mut b.attn.bq, a, &ob.attn.bq);
            ax2(&mut b.attn.wk, a, &ob.attn.wk);
            ax1(&mut b.attn.bk, a, &ob.attn.bk);
            ax2(&mut b.attn.wv, a, &ob.attn.wv);
            ax1(&mut b.attn.bv, a, &ob.attn.bv);
            ax2(&mut b.attn.wo, a, &ob.attn.wo);
            ax1(&mut b.attn.bo, a, &ob.attn.bo);
            ax1(&mut b.norm2.weight, a, &ob.norm2.weight);
            ax1(&mut b.norm2.bias, a, &ob.norm2.bias);
            ax2(&mut b.mlp.w1, a, &ob.mlp.w1);
            ax1(&mut b.mlp.b1, a, &ob.mlp.b1);
            ax2(&mut b.mlp.w2, a, &ob.mlp.w2);
            ax1(&mut b.mlp.b2, a, &ob.mlp.b2);
        }
        ax1(&mut self.final_norm.weight, a, &other.final_norm.weight);
        ax1(&mut self.final_norm.bias, a, &other.final_norm.bias);
    }

    /// Every parameter as `(name, shape, flat values)` in a fixed order.
    pub fn named_slices(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        fn push1<'a>(out: &mut Vec<(String, Vec<usize>, &'a [f64])>, n: String, a: &'a Array1<f64>) {
            out.push((n, vec![a.len()], a.as_slice().unwrap()));
        }
        fn push2<'a>(out: &mut Vec<(String, Vec<usize>, &'a [f64])>, n: String, a: &'a Array2<f64>) {
            out.push((n, a.shape().to_vec(), a.as_slice().unwrap()));
        }
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        push2(&mut out, "encoder.patch_embed.weight".into(), &self.patch_weight);
        push1(&mut out, "encoder.patch_embed.bias".into(), &self.patch_bias);
        push1(&mut out, "encoder.cls_token".into(), &self.cls_token);
        push1(&mut out, "encoder.pos_embed.cls".into(), &self.pos_cls);
        out.push((
            "encoder.pos_embed.grid".into(),
            self.pos_grid.shape().to_vec(),
            self.pos_grid.as_slice().unwrap(),
        ));
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("encoder.blocks.{i}");
            push1(&mut out, format!("{p}.norm1.weight"), &b.norm1.weight);
            push1(&mut out, format!("{p}.norm1.bias"), &b.norm1.bias);
            for (tag, w, bias) in [
                ("q", &b.attn.wq, &b.attn.bq),
                ("k", &b.attn.wk, &b.attn.bk),
                ("v", &b.attn.wv, &b.attn.bv),
                ("out", &b.attn.wo, &b.attn.bo),
            ] {
                push2(&mut out, format!("{p}.attn.{tag}.weight"), w);
                push1(&mut out, format!("{p}.attn.{tag}.bias"), bias);
            }
            push1(&mut out, format!("{p}.norm2.weight"), &b.norm2.weight);
            push1(&mut out, format!("{p}.norm2.bias"), &b.norm2.bias);
            push2(&mut out, format!("{p}.mlp.fc1.weight"), &b.mlp.w1);
            push1(&mut out, format!("{p}.mlp.fc1.bias"), &b.mlp.b1);
            push2(&mut out, format!("{p}.mlp.fc2.weight"), &b.mlp.w2);
            push1(&mut out, format!("{p}.mlp.fc2.bias"), &b.mlp.b2);
        }
        push1(&mut out, "encoder.norm.weight".into(), &self.final_norm.weight);
        push1(&mut out, "encoder.norm.bias".into(), &self.final_norm.bias);
        out
    }

    /// Mutable variant of [`EncoderParams::named_slices`], same order.
    pub fn named_slices_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![
            (
                "encoder.patch_embed.weight".into(),
                self.patch_weight.as_slice_mut().unwrap(),
            ),
            (
                "encoder.patch_embed.bias".into(),
                self.patch_bias.as_slice_mut().unwrap(),
            ),
            ("encoder.cls_token".into(), self.cls_token.as_slice_mut().unwrap()),
            ("encoder.pos_embed.cls".into(), self.pos_cls.as_slice_mut().unwrap()),
            (
                "encoder.pos_embed.grid".into(),
                self.pos_grid.as_slice_mut().unwrap(),
            ),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("encoder.blocks.{i}");
            out.push((format!("{p}.norm1.weight"), b.norm1.weight.as_slice_mut().unwrap()));
            out.push((format!("{p}.norm1.bias"), b.norm1.bias.as_slice_mut().unwrap()));
            out.push((format!("{p}.attn.q.weight"), b.attn.wq.as_slice_mut().unwrap()));
            out.push((format!("{p}.attn.q.bias"), b.attn.bq.as_slice_mut().unwrap()));
            out.push((format!("{p}.attn.k.weight"), b.attn.wk.as_slice_mut().unwrap()));
            out.push((format!("{p}.attn.k.bias"), b.attn.bk.as_slice_mut().unwrap()));
            out.push((format!("{p}.attn.v.weight"), b.attn.wv.as_slice_mut().unwrap()));
            out.push((format!("{p}.attn.v.bias"), b.attn.bv.as_slice_mut().unwrap()));
            out.push((format!("{p}.attn.out.weight"), b.attn.wo.as_slice_mut().unwrap()));
            out.push((format!("{p}.attn.out.bias"), b.attn.bo.as_slice_mut().unwrap()));
            out.push((format!("{p}.norm2.weight"), b.norm2.weight.as_slice_mut().unwrap()));
            out.push((format!("{p}.norm2.bias"), b.norm2.bias.as_slice_mut().unwrap()));
            out.push((format!("{p}.mlp.fc1.weight"), b.mlp.w1.as_slice_mut().unwrap()));
            out.push((format!("{p}.mlp.fc1.bias"), b.mlp.b1.as_slice_mut().unwrap()));
            out.push((format!("{p}.mlp.fc2.weight"), b.mlp.w2.as_slice_mut().unwrap()));
            out.push((format!("{p}.mlp.fc2.bias"), b.mlp.b2.as_slice_mut().unwrap()));
        }
        out.push((
            "encoder.norm.weight".into(),
            self.final_norm.weight.as_slice_mut().unwrap(),
        ));
        out.push((
            "encoder.norm.bias".into(),
            self.final_norm.bias.as_slice_mut().unwrap(),
        ));
        out
    }
}

/// Bilinear resize of a square positional-embedding grid.
pub fn resize_pos_embed(pe: &Array3<f64>, new_side: usize) -> Array3<f64> {
    assert!(new_side >= 1, "new_side must be >= 1");
    resize_grid_hwc(pe, new_side, new_side)
}

// Caches kept from the forward pass for the backward pass.

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

struct BlockCache {
    ln1: LnCache,
    ln1_out: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn_probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln2: LnCache,
    ln2_out: Array2<f64>,
    mlp_pre: Array2<f64>,
    mlp_act: Array2<f64>,
}

pub struct EncoderCache {
    grid: (usize, usize),
    patch_vecs: Array2<f64>,
    blocks: Vec<BlockCache>,
    final_ln: LnCache,
}

fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut y = x.dot(&w.t());
    y += b;
    y
}

fn ln_forward(x: &Array2<f64>, p: &LayerNormParams) -> (Array2<f64>, LnCache) {
    let (n, d) = x.dim();
    let mut xhat = Array2::zeros((n, d));
    let mut inv_std = Array1::zeros(n);
    let mut y = Array2::zeros((n, d));
    for i in 0..n {
        let row = x.row(i);
        let mu = row.mean().unwrap();
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = istd;
        for j in 0..d {
            let h = (x[[i, j]] - mu) * istd;
            xhat[[i, j]] = h;
            y[[i, j]] = p.weight[j] * h + p.bias[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn ln_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    p: &LayerNormParams,
    dgamma: &mut Array1<f64>,
    dbeta: &mut Array1<f64>,
) -> Array2<f64> {
    let (n, d) = dy.dim();
    let mut dx = Array2::zeros((n, d));
    for i in 0..n {
        let mut mean_dyg = 0.0;
        let mut mean_dyg_xhat = 0.0;
        for j in 0..d {
            let dyg = dy[[i, j]] * p.weight[j];
            mean_dyg += dyg;
            mean_dyg_xhat += dyg * cache.xhat[[i, j]];
            dgamma[j] += dy[[i, j]] * cache.xhat[[i, j]];
            dbeta[j] += dy[[i, j]];
        }
        mean_dyg /= d as f64;
        mean_dyg_xhat /= d as f64;
        let istd = cache.inv_std[i];
        for j in 0..d {
            let dyg = dy[[i, j]] * p.weight[j];
            dx[[i, j]] = istd * (dyg - mean_dyg - cache.xhat[[i, j]] * mean_dyg_xhat);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

struct AttentionForward {
    out: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
}

fn attention_forward(x: &Array2<f64>, p: &AttentionParams, num_heads: usize) -> AttentionForward {
    let (n, d) = x.dim();
    let hd = d / num_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let q = linear(x, &p.wq, &p.bq);
    let k = linear(x, &p.wk, &p.bk);
    let v = linear(x, &p.wv, &p.bv);
    let mut ctx = Array2::zeros((n, d));
    let mut probs = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let cols = s![.., h * hd..(h + 1) * hd];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut scores = qh.dot(&kh.t());
        scores *= scale;
        softmax_rows(&mut scores);
        let ctx_h = scores.dot(&vh);
        ctx.slice_mut(cols).assign(&ctx_h);
        probs.push(scores);
    }
    let out = linear(&ctx, &p.wo, &p.bo);
    AttentionForward {
        out,
        q,
        k,
        v,
        probs,
        ctx,
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    dout: &Array2<f64>,
    x: &Array2<f64>,
    p: &AttentionParams,
    g: &mut AttentionParams,
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    probs: &[Array2<f64>],
    ctx: &Array2<f64>,
    num_heads: usize,
) -> Array2<f64> {
    let (n, d) = dout.dim();
    let hd = d / num_heads;
    let scale = 1.0 / (hd as f64).sqrt();

    g.wo += &dout.t().dot(ctx);
    g.bo += &dout.sum_axis(ndarray::Axis(0));
    let dctx = dout.dot(&p.wo);

    let mut dq = Array2::zeros((n, d));
    let mut dk = Array2::zeros((n, d));
    let mut dv = Array2::zeros((n, d));
    #[allow(clippy::needless_range_loop)]
    for h in 0..num_heads {
        let cols = s![.., h * hd..(h + 1) * hd];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let ph = &probs[h];
        let dctx_h = dctx.slice(cols);
        let dp = dctx_h.dot(&vh.t());
        dv.slice_mut(cols).assign(&ph.t().dot(&dctx_h));
        // softmax backward per row: ds = p * (dp - sum(dp * p))
        let mut dscores = Array2::zeros((n, n));
        for i in 0..n {
            let mut dot = 0.0;
            for j in 0..n {
                dot += dp[[i, j]] * ph[[i, j]];
            }
            for j in 0..n {
                dscores[[i, j]] = ph[[i, j]] * (dp[[i, j]] - dot) * scale;
            }
        }
        dq.slice_mut(cols).assign(&dscores.dot(&kh));
        dk.slice_mut(cols).assign(&dscores.t().dot(&qh));
    }

    g.wq += &dq.t().dot(x);
    g.bq += &dq.sum_axis(ndarray::Axis(0));
    g.wk += &dk.t().dot(x);
    g.bk += &dk.sum_axis(ndarray::Axis(0));
    g.wv += &dv.t().dot(x);
    g.bv += &dv.sum_axis(ndarray::Axis(0));

    dq.dot(&p.wq) + dk.dot(&p.wk) + dv.dot(&p.wv)
}

fn extract_patches(image: &Array3<f64>, patch: usize) -> (usize, usize, Array2<f64>) {
    let (h, w, _) = image.dim();
    let (gh, gw) = (h / patch, w / patch);
    let pdim = patch * patch * 3;
    let mut vecs = Array2::zeros((gh * gw, pdim));
    for gy in 0..gh {
        for gx in 0..gw {
            let row = gy * gw + gx;
            let mut col = 0;
            for py in 0..patch {
                for px in 0..patch {
                    for ch in 0..3 {
                        vecs[[row, col]] = image[[gy * patch + py, gx * patch + px, ch]];
                        col += 1;
                    }
                }
            }
        }
    }
    (gh, gw, vecs)
}

fn forward_impl(
    image: &Array3<f64>,
    cfg: &EncoderConfig,
    params: &EncoderParams,
) -> Result<(FeatureBundle, EncoderCache)> {
    cfg.validate()?;
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::Shape(format!("image must have 3 channels, got {c}")));
    }
    if h < cfg.patch_size || w < cfg.patch_size || h % cfg.patch_size != 0 || w % cfg.patch_size != 0
    {
        return Err(Error::Shape(format!(
            "image {h}x{w} not divisible by patch_size {}",
            cfg.patch_size
        )));
    }
    if !all_finite(image.as_slice().unwrap()) {
        return Err(Error::NonFinite("input image".into()));
    }

    let d = cfg.token_dim;
    let (gh, gw, patch_vecs) = extract_patches(image, cfg.patch_size);
    let n = gh * gw + 1;

    let pe_grid = if (gh, gw) == (params.pos_grid.dim().0, params.pos_grid.dim().1) {
        params.pos_grid.clone()
    } else {
        crate::util::resize_grid_hwc(&params.pos_grid, gh, gw)
    };

    let mut tokens = Array2::zeros((n, d));
    {
        let embedded = linear(&patch_vecs, &params.patch_weight, &params.patch_bias);
        for j in 0..d {
            tokens[[0, j]] = params.cls_token[j] + params.pos_cls[j];
        }
        for gy in 0..gh {
            for gx in 0..gw {
                let r = 1 + gy * gw + gx;
                for j in 0..d {
                    tokens[[r, j]] = embedded[[r - 1, j]] + pe_grid[[gy, gx, j]];
                }
            }
        }
    }

    let mut block_caches = Vec::with_capacity(cfg.num_blocks);
    let mut intermediate = None;
    for (bi, bp) in params.blocks.iter().enumerate() {
        let (a, ln1) = ln_forward(&tokens, &bp.norm1);
        let attn = attention_forward(&a, &bp.attn, cfg.num_heads);
        let x_mid = &tokens + &attn.out;
        let (b, ln2) = ln_forward(&x_mid, &bp.norm2);
        let mlp_pre = linear(&b, &bp.mlp.w1, &bp.mlp.b1);
        let mlp_act = mlp_pre.mapv(gelu);
        let mlp_out = linear(&mlp_act, &bp.mlp.w2, &bp.mlp.b2);
        tokens = &x_mid + &mlp_out;
        block_caches.push(BlockCache {
            ln1,
            ln1_out: a,
            q: attn.q,
            k: attn.k,
            v: attn.v,
            attn_probs: attn.probs,
            ctx: attn.ctx,
            ln2,
            ln2_out: b,
            mlp_pre,
            mlp_act,
        });
        if bi + 1 == cfg.intermediate_block {
            let patches = tokens.slice(s![1.., ..]).to_owned();
            intermediate = Some(FeatureBundle::unflatten_tokens(&patches, gh, gw));
        }
    }

    let (normed, final_ln) = ln_forward(&tokens, &params.final_norm);
    let class_token = normed.row(0).to_owned();
    let patch_tokens =
        FeatureBundle::unflatten_tokens(&normed.slice(s![1.., ..]).to_owned(), gh, gw);

    Ok((
        FeatureBundle {
            class_token,
            patch_tokens,
            intermediate: intermediate.expect("intermediate_block < num_blocks"),
        },
        EncoderCache {
            grid: (gh, gw),
            patch_vecs,
            blocks: block_caches,
            final_ln,
        },
    ))
}

/// Encode an image into a [`FeatureBundle`].
pub fn encode(
    image: &Array3<f64>,
    cfg: &EncoderConfig,
    params: &EncoderParams,
) -> Result<FeatureBundle> {
    forward_impl(image, cfg, params).map(|(b, _)| b)
}

/// Encode and keep the activations needed for [`encoder_backward`].
pub fn encode_with_cache(
    image: &Array3<f64>,
    cfg: &EncoderConfig,
    params: &EncoderParams,
) -> Result<(FeatureBundle, EncoderCache)> {
    forward_impl(image, cfg, params)
}

/// Back-propagates gradients on the three encoder outputs into parameter
/// gradients, which are accumulated into `grads`.
pub fn encoder_backward(
    cfg: &EncoderConfig,
    params: &EncoderParams,
    cache: &EncoderCache,
    d_class: &Array1<f64>,
    d_patch: &Array3<f64>,
    d_inter: &Array3<f64>,
    grads: &mut EncoderParams,
) {
    let (gh, gw) = cache.grid;
    let d = cfg.token_dim;
    let n = gh * gw + 1;

    let mut d_tokens = Array2::zeros((n, d));
    d_tokens.row_mut(0).assign(d_class);
    for gy in 0..gh {
        for gx in 0..gw {
            let r = 1 + gy * gw + gx;
            for j in 0..d {
                d_tokens[[r, j]] = d_patch[[gy, gx, j]];
            }
        }
    }

    let mut dh = ln_backward(
        &d_tokens,
        &cache.final_ln,
        &params.final_norm,
        &mut grads.final_norm.weight,
        &mut grads.final_norm.bias,
    );

    for bi in (0..cfg.num_blocks).rev() {
        // Inject the intermediate-tap gradient where the tap was taken.
        if bi + 1 == cfg.intermediate_block {
            for gy in 0..gh {
                for gx in 0..gw {
                    let r = 1 + gy * gw + gx;
                    for j in 0..d {
                        dh[[r, j]] += d_inter[[gy, gx, j]];
                    }
                }
            }
        }
        let bp = &params.blocks[bi];
        let bc = &cache.blocks[bi];
        let bg = &mut grads.blocks[bi];

        // y = x_mid + mlp(ln2(x_mid))
        let dmlp_out = &dh;
        bg.mlp.w2 += &dmlp_out.t().dot(&bc.mlp_act);
        bg.mlp.b2 += &dmlp_out.sum_axis(ndarray::Axis(0));
        let dact = dmlp_out.dot(&bp.mlp.w2);
        let mut dpre = dact;
        dpre.zip_mut_with(&bc.mlp_pre, |g, &u| *g *= gelu_deriv(u));
        bg.mlp.w1 += &dpre.t().dot(&bc.ln2_out);
        bg.mlp.b1 += &dpre.sum_axis(ndarray::Axis(0));
        let db = dpre.dot(&bp.mlp.w1);
        let mut dx_mid = dh.clone();
        dx_mid += &ln_backward(
            &db,
            &bc.ln2,
            &bp.norm2,
            &mut bg.norm2.weight,
            &mut bg.norm2.bias,
        );

        // x_mid = x + attn(ln1(x))
        let da = attention_backward(
            &dx_mid,
            &bc.ln1_out,
            &bp.attn,
            &mut bg.attn,
            &bc.q,
            &bc.k,
            &bc.v,
            &bc.attn_probs,
            &bc.ctx,
            cfg.num_heads,
        );
        let mut dx = dx_mid;
        dx += &ln_backward(&da, &bc.ln1, &bp.norm1, &mut bg.norm1.weight, &mut bg.norm1.bias);
        dh = dx;
    }

    // Embedding layer.
    for j in 0..d {
        grads.cls_token[j] += dh[[0, j]];
        grads.pos_cls[j] += dh[[0, j]];
    }
    let d_embedded = dh.slice(s![1.., ..]).to_owned();
    grads.patch_weight += &d_embedded.t().dot(&cache.patch_vecs);
    grads.patch_bias += &d_embedded.sum_axis(ndarray::Axis(0));

    let d_pe = FeatureBundle::unflatten_tokens(&d_embedded, gh, gw);
    let (pg_h, pg_w, _) = params.pos_grid.dim();
    if (gh, gw) == (pg_h, pg_w) {
        grads.pos_grid += &d_pe;
    } else {
        grads.pos_grid += &resize_grid_hwc_adjoint(&d_pe, pg_h, pg_w);
    }
}
