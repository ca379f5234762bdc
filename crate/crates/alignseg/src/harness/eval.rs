//! Validation-set evaluation: confusion-matrix mIoU over either the
//! CAM-derived pseudo labels or the segmentation head's predictions.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cam::compute_cam;
use crate::data::Sample;
use crate::encoder::encode;
use crate::error::{Error, Result};
use crate::segmentor::{argmax_labels, pseudo_labels, seg_forward, PseudoLabelMap};

use super::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSource {
    CamPseudo,
    Segmentation,
}

impl std::str::FromStr for EvalSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cam_pseudo" => Ok(Self::CamPseudo),
            "segmentation" => Ok(Self::Segmentation),
            other => Err(Error::Config(format!(
                "unknown eval source `{other}` (expected cam_pseudo or segmentation)"
            ))),
        }
    }
}

impl std::fmt::Display for EvalSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::CamPseudo => write!(f, "cam_pseudo"),
            Self::Segmentation => write!(f, "segmentation"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// IoU per class (background first); `null` when the class appears in
    /// neither prediction nor ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    /// Mean IoU over the classes present in the union of prediction and
    /// ground truth.
    pub miou: f64,
    pub source: EvalSource,
}

/// Predicts one sample with the requested source.
pub fn predict_labels(model: &Model, sample: &Sample, source: EvalSource, beta: f64) -> Result<PseudoLabelMap> {
    let (h, w, _) = sample.image.dim();
    let bundle = encode(&sample.image, &model.encoder_cfg, &model.encoder)?;
    match source {
        EvalSource::CamPseudo => {
            let cams = compute_cam(&bundle.patch_tokens, &model.classifier.final_weight)?;
            Ok(pseudo_labels(&cams, &sample.labels, beta, h, w))
        }
        EvalSource::Segmentation => {
            let logits = seg_forward(&bundle.patch_tokens, &model.seg_cfg, &model.seg, h, w)?;
            Ok(argmax_labels(&logits))
        }
    }
}

/// Accumulates a confusion matrix over the samples and reduces it to IoUs.
pub fn evaluate(model: &Model, samples: &[Sample], source: EvalSource, beta: f64) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let num_classes = model.seg_cfg.num_classes;
    let partials: Vec<Result<Vec<u64>>> = samples
        .par_iter()
        .map(|sample| {
            let pred = predict_labels(model, sample, source, beta)?;
            let mut confusion = vec![0u64; num_classes * num_classes];
            for (gt, p) in sample.gt_mask.iter().zip(pred.labels.iter()) {
                confusion[*gt as usize * num_classes + *p as usize] += 1;
            }
            Ok(confusion)
        })
        .collect();
    let mut confusion = vec![0u64; num_classes * num_classes];
    for partial in partials {
        for (dst, src) in confusion.iter_mut().zip(partial?) {
            *dst += src;
        }
    }
    Ok(report_from_confusion(&confusion, num_classes, source))
}

fn report_from_confusion(confusion: &[u64], num_classes: usize, source: EvalSource) -> EvalReport {
    let mut per_class_iou = Vec::with_capacity(num_classes);
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..num_classes {
        let tp = confusion[c * num_classes + c];
        let row: u64 = (0..num_classes).map(|j| confusion[c * num_classes + j]).sum();
        let col: u64 = (0..num_classes).map(|i| confusion[i * num_classes + c]).sum();
        let union = row + col - tp;
        if union == 0 {
            per_class_iou.push(None);
        } else {
            let iou = tp as f64 / union as f64;
            per_class_iou.push(Some(iou));
            sum += iou;
            present += 1;
        }
    }
    EvalReport {
        per_class_iou,
        miou: if present > 0 { sum / present as f64 } else { 0.0 },
        source,
    }
}

pub fn write_eval_json(report: &EvalReport, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}
