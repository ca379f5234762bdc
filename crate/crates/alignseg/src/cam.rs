//! Class activation maps, the object-aware mask derived from intermediate
//! CAMs, and the foreground/background patch split.

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::util::{all_finite, resize_chw, stream_rng, trunc_normal};

/// Activations below this bound count as "no positive response" and the
/// class map collapses to all zeros instead of dividing by ~0.
pub const CAM_ZERO_EPS: f64 = 1e-8;

/// Final and intermediate classifier weights. Both act as per-position linear
/// maps over `d_v`-dimensional features (the intermediate one plays the role
/// of a 1x1 convolution).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierWeights {
    pub final_weight: Array2<f64>,
    pub inter_weight: Array2<f64>,
}

impl ClassifierWeights {
    pub fn init(num_classes: usize, d_v: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, 0xc1a5, 0);
        Self {
            final_weight: Array2::from_shape_fn((num_classes, d_v), |_| {
                trunc_normal(&mut rng, 0.02)
            }),
            inter_weight: Array2::from_shape_fn((num_classes, d_v), |_| {
                trunc_normal(&mut rng, 0.02)
            }),
        }
    }

    pub fn zeros(num_classes: usize, d_v: usize) -> Self {
        Self {
            final_weight: Array2::zeros((num_classes, d_v)),
            inter_weight: Array2::zeros((num_classes, d_v)),
        }
    }

    pub fn axpy(&mut self, a: f64, other: &Self) {
        self.final_weight
            .zip_mut_with(&other.final_weight, |d, s| *d += a * s);
        self.inter_weight
            .zip_mut_with(&other.inter_weight, |d, s| *d += a * s);
    }

    pub fn named_slices(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        vec![
            (
                "classifier.final.weight".into(),
                self.final_weight.shape().to_vec(),
                self.final_weight.as_slice().unwrap(),
            ),
            (
                "classifier.inter.weight".into(),
                self.inter_weight.shape().to_vec(),
                self.inter_weight.as_slice().unwrap(),
            ),
        ]
    }

    pub fn named_slices_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            (
                "classifier.final.weight".into(),
                self.final_weight.as_slice_mut().unwrap(),
            ),
            (
                "classifier.inter.weight".into(),
                self.inter_weight.as_slice_mut().unwrap(),
            ),
        ]
    }
}

/// Per-class activation maps normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CamStack {
    /// `[C, grid_h, grid_w]`; each class map is either all zero or peaks at 1.
    pub maps: Array3<f64>,
}

impl CamStack {
    pub fn num_classes(&self) -> usize {
        self.maps.dim().0
    }

    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w) = self.maps.dim();
        (h, w)
    }
}

/// Binary foreground map over the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectMask {
    /// `[grid_h, grid_w]` with values exactly 0.0 or 1.0.
    pub mask: Array2<f64>,
    pub beta: f64,
}

impl ObjectMask {
    pub fn foreground_count(&self) -> usize {
        self.mask.iter().filter(|&&v| v > 0.5).count()
    }
}

/// Weighted feature sums per class, rectified and max-normalized per class.
pub fn compute_cam(features: &Array3<f64>, weights: &Array2<f64>) -> Result<CamStack> {
    let (gh, gw, d) = features.dim();
    let (num_classes, dw) = weights.dim();
    if d != dw {
        return Err(Error::Shape(format!(
            "feature dim {d} does not match classifier dim {dw}"
        )));
    }
    if !all_finite(features.as_slice().unwrap()) || !all_finite(weights.as_slice().unwrap()) {
        return Err(Error::NonFinite("compute_cam inputs".into()));
    }
    let flat = features
        .to_shape((gh * gw, d))
        .expect("contiguous features");
    // scores[(pos, class)] = sum_i W[c,i] * F[pos,i]
    let scores = flat.dot(&weights.t());
    let mut maps = Array3::zeros((num_classes, gh, gw));
    for c in 0..num_classes {
        let mut max = 0.0f64;
        for p in 0..gh * gw {
            let v = scores[[p, c]].max(0.0);
            if v > max {
                max = v;
            }
        }
        if max < CAM_ZERO_EPS {
            continue; // all-zero map
        }
        for y in 0..gh {
            for x in 0..gw {
                maps[[c, y, x]] = scores[[y * gw + x, c]].max(0.0) / max;
            }
        }
    }
    Ok(CamStack { maps })
}

/// Thresholds the per-cell maximum over present classes at `beta`.
pub fn object_mask(inter_cams: &CamStack, labels: &[f64], beta: f64) -> Result<ObjectMask> {
    let (c, gh, gw) = inter_cams.maps.dim();
    if labels.len() != c {
        return Err(Error::Shape(format!(
            "label vector has {} entries for {} classes",
            labels.len(),
            c
        )));
    }
    if !labels.iter().any(|&y| y > 0.5) {
        return Err(Error::Config("object_mask needs at least one present class".into()));
    }
    let mut mask = Array2::zeros((gh, gw));
    for y in 0..gh {
        for x in 0..gw {
            let best = (0..c)
                .filter(|&ci| labels[ci] > 0.5)
                .map(|ci| inter_cams.maps[[ci, y, x]])
                .fold(f64::NEG_INFINITY, f64::max);
            if best > beta {
                mask[[y, x]] = 1.0;
            }
        }
    }
    Ok(ObjectMask { mask, beta })
}

/// Splits patch tokens into foreground and background parts by broadcasting
/// the mask over channels. `fg + bg == tokens` exactly.
pub fn split_patches(
    tokens: &Array3<f64>,
    mask: &ObjectMask,
) -> Result<(Array3<f64>, Array3<f64>)> {
    let (gh, gw, d) = tokens.dim();
    if mask.mask.dim() != (gh, gw) {
        return Err(Error::Shape(format!(
            "mask grid {:?} does not match token grid {:?}",
            mask.mask.dim(),
            (gh, gw)
        )));
    }
    let mut fg = Array3::zeros((gh, gw, d));
    let mut bg = Array3::zeros((gh, gw, d));
    for y in 0..gh {
        for x in 0..gw {
            if mask.mask[[y, x]] > 0.5 {
                for k in 0..d {
                    fg[[y, x, k]] = tokens[[y, x, k]];
                }
            } else {
                for k in 0..d {
                    bg[[y, x, k]] = tokens[[y, x, k]];
                }
            }
        }
    }
    Ok((fg, bg))
}

/// Upsamples one class map to the requested resolution.
pub fn upsample_cam(cams: &CamStack, class: usize, height: usize, width: usize) -> Array2<f64> {
    let one = cams
        .maps
        .slice(ndarray::s![class..class + 1, .., ..])
        .to_owned();
    let up = resize_chw(&one, height, width);
    up.index_axis(ndarray::Axis(0), 0).to_owned()
}

/// Writes one grayscale PNG per class: `{image_id}_{class_name}.png`,
/// pixel value = round(255 * CAM) at image resolution.
pub fn export_cam_pngs(
    cams: &CamStack,
    class_names: &[String],
    image_id: &str,
    height: usize,
    width: usize,
    out_dir: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for (c, name) in class_names.iter().enumerate() {
        let up = upsample_cam(cams, c, height, width);
        let bytes: Vec<u8> = up
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let path = out_dir.join(format!("{image_id}_{name}.png"));
        crate::pngio::write_gray(&path, width, height, &bytes)?;
        written.push(path);
    }
    Ok(written)
}
