//! Ablation runner: the 3x2 grid of alignment-loss configurations
//! (global-only / local-only / both) x (without / with cross-contrast),
//! trained over several seeds and scored by pseudo-label mIoU.

use std::path::Path;

use crate::config::AppConfig;
use crate::data::Corpus;
use crate::error::Result;

use super::{evaluate, train_model, EvalSource};

#[derive(Debug, Clone)]
pub struct AblationCell {
    pub name: String,
    pub global_align: bool,
    pub local_align: bool,
    pub cross_contrast: bool,
    pub seeds: Vec<u64>,
    pub mious: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

fn cell_name(global: bool, local: bool, cc: bool) -> String {
    let align = match (global, local) {
        (true, false) => "global",
        (false, true) => "local",
        (true, true) => "both",
        (false, false) => "none",
    };
    let cc = if cc { "with_cc" } else { "without_cc" };
    format!("{align}_{cc}")
}

/// Runs the full grid; `seeds` trains each cell once per seed. Returns one
/// row per cell with the per-seed pseudo-label mIoUs and their mean/std
/// (population std).
pub fn ablate(corpus: &Corpus, base: &AppConfig, seeds: &[u64]) -> Result<Vec<AblationCell>> {
    let grid = [
        (true, false, false),
        (false, true, false),
        (true, true, false),
        (true, false, true),
        (false, true, true),
        (true, true, true),
    ];
    let mut cells = Vec::with_capacity(grid.len());
    for (global, local, cc) in grid {
        let mut mious = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut app = base.clone();
            app.train.global_align = global;
            app.train.local_align = local;
            app.train.cross_contrast = cc;
            app.train.seed = seed;
            let out = train_model(corpus, &app, None)?;
            let report = evaluate(&out.model, &corpus.val, EvalSource::CamPseudo, app.train.beta)?;
            mious.push(report.miou);
        }
        let mean = mious.iter().sum::<f64>() / mious.len() as f64;
        let var = mious.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / mious.len() as f64;
        cells.push(AblationCell {
            name: cell_name(global, local, cc),
            global_align: global,
            local_align: local,
            cross_contrast: cc,
            seeds: seeds.to_vec(),
            mious,
            mean,
            std: var.sqrt(),
        });
    }
    Ok(cells)
}

/// Writes the grid as CSV: one row per cell, one column per seed.
pub fn write_ablation_csv(cells: &[AblationCell], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let seeds = &cells[0].seeds;
    let mut header = vec![
        "cell".to_string(),
        "global_align".to_string(),
        "local_align".to_string(),
        "cross_contrast".to_string(),
    ];
    for s in seeds {
        header.push(format!("miou_seed{s}"));
    }
    header.push("mean".into());
    header.push("std".into());
    w.write_record(&header)?;
    for cell in cells {
        let mut row = vec![
            cell.name.clone(),
            cell.global_align.to_string(),
            cell.local_align.to_string(),
            cell.cross_contrast.to_string(),
        ];
        for m in &cell.mious {
            row.push(m.to_string());
        }
        row.push(cell.mean.to_string());
        row.push(cell.std.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
