//! Checkpoint directory: `manifest.json` (configs, step, metric snapshot,
//! parameter index) plus one raw little-endian f32 file per named parameter,
//! and the frozen text bank under `bank/`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::AppConfig;
use crate::error::{Error, Result};
use crate::objective::LossBreakdown;
use crate::textbank::{load_bank, save_bank};

use super::Model;

#[derive(Debug, Serialize, Deserialize)]
struct ParamInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    step: usize,
    config: AppConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics: Option<LossBreakdown>,
    params: Vec<ParamInfo>,
}

pub struct Checkpoint {
    pub model: Model,
    pub config: AppConfig,
    pub step: usize,
    pub metrics: Option<LossBreakdown>,
}

pub fn save_checkpoint(
    model: &Model,
    config: &AppConfig,
    step: usize,
    metrics: Option<LossBreakdown>,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let slices = model.named_slices();
    let manifest = Manifest {
        format: "alignseg.checkpoint.v1".into(),
        step,
        config: config.clone(),
        metrics,
        params: slices
            .iter()
            .map(|(name, shape, _)| ParamInfo {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    for (name, _, values) in &slices {
        let mut bytes = Vec::with_capacity(values.len() * 4);
        for &v in *values {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(dir.join(format!("{name}.f32")), bytes)?;
    }
    save_bank(&model.bank, &dir.join("bank"))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format != "alignseg.checkpoint.v1" {
        return Err(Error::Data(format!(
            "unsupported checkpoint format `{}`",
            manifest.format
        )));
    }
    let config = manifest.config.clone();
    let bank = load_bank(&dir.join("bank"))?;
    let mut model = Model::init(&config, bank)?;
    {
        let mut slices = model.named_slices_mut();
        let by_name: std::collections::HashMap<String, usize> = slices
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        for info in &manifest.params {
            let idx = *by_name.get(&info.name).ok_or_else(|| {
                Error::Data(format!("checkpoint parameter `{}` is unknown", info.name))
            })?;
            let expected: usize = info.shape.iter().product();
            let raw = fs::read(dir.join(format!("{}.f32", info.name)))?;
            if raw.len() != expected * 4 {
                return Err(Error::Data(format!(
                    "parameter `{}`: {} bytes on disk, expected {}",
                    info.name,
                    raw.len(),
                    expected * 4
                )));
            }
            let dst = &mut slices[idx].1;
            if dst.len() != expected {
                return Err(Error::Data(format!(
                    "parameter `{}`: shape {:?} does not match model",
                    info.name, info.shape
                )));
            }
            for (j, chunk) in raw.chunks_exact(4).enumerate() {
                dst[j] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
            }
        }
        if manifest.params.len() != slices.len() {
            return Err(Error::Data(format!(
                "checkpoint lists {} parameters, model has {}",
                manifest.params.len(),
                slices.len()
            )));
        }
    }
    Ok(Checkpoint {
        model,
        config,
        step: manifest.step,
        metrics: manifest.metrics,
    })
}
