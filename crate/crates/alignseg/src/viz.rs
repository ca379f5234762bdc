//! Qualitative exports: per-class patch/text similarity heatmaps.

use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::align::cosine;
use crate::data::Sample;
use crate::encoder::{encode, FeatureBundle};
use crate::error::Result;
use crate::harness::Model;
use crate::pngio;

/// Diverging blue-white-red map over [-1, 1].
fn diverging_color(v: f64) -> [u8; 3] {
    let t = ((v + 1.0) / 2.0).clamp(0.0, 1.0);
    if t < 0.5 {
        let k = t / 0.5;
        [
            (255.0 * k) as u8,
            (255.0 * k) as u8,
            255,
        ]
    } else {
        let k = (t - 0.5) / 0.5;
        [
            255,
            (255.0 * (1.0 - k)) as u8,
            (255.0 * (1.0 - k)) as u8,
        ]
    }
}

/// Cosine between each projected patch token and each projected class
/// embedding, as `[C]` grids of `[gh, gw]`.
pub fn class_similarity_grids(model: &Model, sample: &Sample) -> Result<Vec<Array2<f64>>> {
    let bundle = encode(&sample.image, &model.encoder_cfg, &model.encoder)?;
    let (gh, gw, _) = bundle.patch_tokens.dim();
    let tokens = FeatureBundle::flatten_grid(&bundle.patch_tokens);
    let projected = model.proj.project_visual_rows(&tokens);
    let text = model.proj.project_text_rows(&model.bank.class_embeddings);
    let mut grids = Vec::with_capacity(text.nrows());
    for c in 0..text.nrows() {
        let mut grid = Array2::zeros((gh, gw));
        for y in 0..gh {
            for x in 0..gw {
                grid[[y, x]] = cosine(
                    projected.row(y * gw + x).as_slice().unwrap(),
                    text.row(c).as_slice().unwrap(),
                );
            }
        }
        grids.push(grid);
    }
    Ok(grids)
}

/// Renders one heatmap PNG per class (`{id}_sim_{class}.png`, upscaled to the
/// image resolution) plus the input image for reference. Returns the written
/// paths.
pub fn write_similarity_heatmaps(
    model: &Model,
    sample: &Sample,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let (h, w, _) = sample.image.dim();
    let grids = class_similarity_grids(model, sample)?;
    let mut written = Vec::new();

    let input_path = out_dir.join(format!("{}_input.png", sample.id));
    let rgb: Vec<u8> = sample
        .image
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    pngio::write_rgb(&input_path, w, h, &rgb)?;
    written.push(input_path);

    for (c, grid) in grids.iter().enumerate() {
        let (gh, gw) = grid.dim();
        let mut pixels = vec![0u8; w * h * 3];
        for y in 0..h {
            for x in 0..w {
                let gy = (y * gh / h).min(gh - 1);
                let gx = (x * gw / w).min(gw - 1);
                let rgb = diverging_color(grid[[gy, gx]]);
                let off = (y * w + x) * 3;
                pixels[off..off + 3].copy_from_slice(&rgb);
            }
        }
        let path = out_dir.join(format!(
            "{}_sim_{}.png",
            sample.id, model.bank.class_names[c]
        ));
        pngio::write_rgb(&path, w, h, &pixels)?;
        written.push(path);
    }
    Ok(written)
}
