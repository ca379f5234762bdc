//! Deterministic synthetic shapes corpus: colored primitives over textured
//! noise backgrounds, with image-level labels for training and pixel masks
//! kept for evaluation only.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pngio;
use crate::util::{resize_grid_hwc, stream_rng};

/// Minimum pixel count in the ground-truth mask for a class to be labeled
/// present.
pub const MIN_LABEL_PIXELS: usize = 16;
/// Correlation length of the background noise, in pixels.
const BACKGROUND_CELL: usize = 8;

const SEED_TAG_SAMPLE: u64 = 0xda7a;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CorpusConfig {
    pub num_train: usize,
    pub num_val: usize,
    pub classes: Vec<String>,
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_train: 500,
            num_val: 100,
            classes: vec!["disk".into(), "square".into(), "triangle".into()],
            image_size: 64,
            min_objects: 1,
            max_objects: 3,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_train == 0 || self.num_val == 0 {
            return Err(Error::Config("corpus sizes must be >= 1".into()));
        }
        let mut sorted = self.classes.clone();
        sorted.sort();
        sorted.dedup();
        if self.classes.is_empty() || sorted.len() != self.classes.len() {
            return Err(Error::Config("classes must be non-empty and distinct".into()));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config("invalid objects_per_image range".into()));
        }
        if self.image_size < 16 {
            return Err(Error::Config("image_size too small".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

/// One image with its weak label vector and the evaluation-only pixel mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[H, W, 3]` in `[0, 1]`, quantized to the 8-bit grid so PNG round-trips
    /// are lossless.
    pub image: Array3<f64>,
    /// Binary class presence, `[C]`.
    pub labels: Vec<f64>,
    /// `[H, W]` with 0 = background, `c+1` = class `c`. Evaluation only.
    pub gt_mask: Array2<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Labels from a mask: class `c` is present iff it covers at least
/// [`MIN_LABEL_PIXELS`] pixels.
pub fn labels_from_mask(mask: &Array2<u8>, num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_classes];
    for &v in mask.iter() {
        if v > 0 {
            counts[v as usize - 1] += 1;
        }
    }
    counts
        .iter()
        .map(|&n| f64::from(u8::from(n >= MIN_LABEL_PIXELS)))
        .collect()
}

fn base_color(class: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 6] = [
        [0.85, 0.25, 0.25],
        [0.25, 0.78, 0.30],
        [0.30, 0.40, 0.88],
        [0.85, 0.80, 0.30],
        [0.75, 0.30, 0.80],
        [0.30, 0.75, 0.75],
    ];
    PALETTE[class % PALETTE.len()]
}

#[derive(Clone, Copy)]
enum Shape {
    Disk,
    Square,
    Triangle,
}

fn shape_for_class(class: usize) -> Shape {
    match class % 3 {
        0 => Shape::Disk,
        1 => Shape::Square,
        _ => Shape::Triangle,
    }
}

fn inside(shape: Shape, cx: f64, cy: f64, r: f64, x: f64, y: f64) -> bool {
    match shape {
        Shape::Disk => (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r,
        Shape::Square => (x - cx).abs() <= r && (y - cy).abs() <= r,
        Shape::Triangle => {
            let ax = cx;
            let ay = cy - r;
            let bx = cx - 0.866 * r;
            let by = cy + 0.5 * r;
            let ccx = cx + 0.866 * r;
            let ccy = cy + 0.5 * r;
            let sign =
                |x1: f64, y1: f64, x2: f64, y2: f64| (x - x2) * (y1 - y2) - (x1 - x2) * (y - y2);
            let d1 = sign(ax, ay, bx, by);
            let d2 = sign(bx, by, ccx, ccy);
            let d3 = sign(ccx, ccy, ax, ay);
            let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
            let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
            !(has_neg && has_pos)
        }
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn render_sample(cfg: &CorpusConfig, global_index: u64, id: String) -> Sample {
    let mut rng = stream_rng(cfg.seed, SEED_TAG_SAMPLE, global_index);
    let n = cfg.image_size;

    // Textured background: coarse uniform noise bilinearly upsampled so the
    // correlation length matches the cell size.
    let coarse_side = n / BACKGROUND_CELL + 1;
    let coarse = Array3::from_shape_fn((coarse_side, coarse_side, 3), |_| rng.gen_range(0.15..0.85));
    let mut image = resize_grid_hwc(&coarse, n, n);
    let mut mask = Array2::<u8>::zeros((n, n));

    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    for _ in 0..count {
        let class = rng.gen_range(0..cfg.num_classes());
        let r: f64 = rng.gen_range(6.0..14.0);
        let margin = r.ceil() + 1.0;
        let cx = rng.gen_range(margin..(n as f64 - margin));
        let cy = rng.gen_range(margin..(n as f64 - margin));
        let base = base_color(class);
        let jitter: [f64; 3] = [
            rng.gen_range(-0.1..0.1),
            rng.gen_range(-0.1..0.1),
            rng.gen_range(-0.1..0.1),
        ];
        let shape = shape_for_class(class);
        for y in 0..n {
            for x in 0..n {
                if inside(shape, cx, cy, r, x as f64, y as f64) {
                    for ch in 0..3 {
                        image[[y, x, ch]] = base[ch] + jitter[ch];
                    }
                    mask[[y, x]] = class as u8 + 1;
                }
            }
        }
    }

    image.mapv_inplace(quantize);
    let labels = labels_from_mask(&mask, cfg.num_classes());
    Sample {
        id,
        image,
        labels,
        gt_mask: mask,
    }
}

/// Generates the full corpus deterministically from the config seed. Sample
/// seeds depend only on (corpus seed, global index), so generation order or
/// parallelism cannot change the output.
pub fn generate(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let train = (0..cfg.num_train)
        .map(|i| render_sample(cfg, i as u64, format!("{i:05}")))
        .collect();
    let val = (0..cfg.num_val)
        .map(|j| render_sample(cfg, (cfg.num_train + j) as u64, format!("{j:05}")))
        .collect();
    Ok(Corpus {
        config: cfg.clone(),
        train,
        val,
    })
}

/// Horizontal mirror of image and mask; labels are unchanged by a flip.
pub fn flip_horizontal(s: &Sample) -> Sample {
    let (h, w, _) = s.image.dim();
    let image = Array3::from_shape_fn((h, w, 3), |(y, x, c)| s.image[[y, w - 1 - x, c]]);
    let gt_mask = Array2::from_shape_fn((h, w), |(y, x)| s.gt_mask[[y, w - 1 - x]]);
    let labels = labels_from_mask(&gt_mask, s.labels.len());
    Sample {
        id: s.id.clone(),
        image,
        labels,
        gt_mask,
    }
}

fn nearest_axis(src_len: usize, dst_len: usize) -> Vec<usize> {
    (0..dst_len)
        .map(|i| {
            if dst_len == 1 {
                (src_len - 1) / 2
            } else {
                let pos = i as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64;
                (pos.round() as usize).min(src_len - 1)
            }
        })
        .collect()
}

/// Crops `(crop_h, crop_w)` at `(y0, x0)` and resizes back to the original
/// size: image bilinearly, mask by nearest neighbor. Labels are recomputed
/// from the transformed mask.
pub fn crop_and_resize(s: &Sample, y0: usize, x0: usize, crop_h: usize, crop_w: usize) -> Sample {
    let (h, w, _) = s.image.dim();
    assert!(crop_h >= 1 && crop_w >= 1 && y0 + crop_h <= h && x0 + crop_w <= w);
    let cropped = s
        .image
        .slice(ndarray::s![y0..y0 + crop_h, x0..x0 + crop_w, ..])
        .to_owned();
    let mut image = resize_grid_hwc(&cropped, h, w);
    image.mapv_inplace(quantize);
    let ys = nearest_axis(crop_h, h);
    let xs = nearest_axis(crop_w, w);
    let gt_mask =
        Array2::from_shape_fn((h, w), |(y, x)| s.gt_mask[[y0 + ys[y], x0 + xs[x]]]);
    let labels = labels_from_mask(&gt_mask, s.labels.len());
    Sample {
        id: s.id.clone(),
        image,
        labels,
        gt_mask,
    }
}

/// Adds a per-channel offset and clamps to `[0, 1]`.
pub fn jitter_colors(s: &Sample, deltas: [f64; 3]) -> Sample {
    let (h, w, _) = s.image.dim();
    let image = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        quantize(s.image[[y, x, c]] + deltas[c])
    });
    Sample {
        id: s.id.clone(),
        image,
        labels: s.labels.clone(),
        gt_mask: s.gt_mask.clone(),
    }
}

/// Random horizontal flip, crop-and-resize at scale 0.8..1.0, and color
/// jitter of +-0.1, all driven by the given seed.
pub fn augment(s: &Sample, seed: u64) -> Sample {
    let mut rng = stream_rng(seed, 0xa060, 0);
    let mut out = if rng.gen_bool(0.5) { flip_horizontal(s) } else { s.clone() };
    let (h, w, _) = out.image.dim();
    let scale = rng.gen_range(0.8..1.0);
    let crop_h = ((h as f64 * scale).round() as usize).clamp(1, h);
    let crop_w = ((w as f64 * scale).round() as usize).clamp(1, w);
    let y0 = rng.gen_range(0..=h - crop_h);
    let x0 = rng.gen_range(0..=w - crop_w);
    out = crop_and_resize(&out, y0, x0, crop_h, crop_w);
    let deltas = [
        rng.gen_range(-0.1..0.1),
        rng.gen_range(-0.1..0.1),
        rng.gen_range(-0.1..0.1),
    ];
    jitter_colors(&out, deltas)
}

fn image_to_bytes(image: &Array3<f64>) -> Vec<u8> {
    image
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

fn bytes_to_image(h: usize, w: usize, bytes: &[u8]) -> Array3<f64> {
    Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        f64::from(bytes[(y * w + x) * 3 + c]) / 255.0
    })
}

fn save_split(samples: &[Sample], cfg: &CorpusConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let palette = pngio::label_palette(cfg.num_classes() + 1);
    let mut writer = csv::Writer::from_path(dir.join("labels.csv"))?;
    writer.write_record(["id", "labels"])?;
    for s in samples {
        let (h, w, _) = s.image.dim();
        pngio::write_rgb(
            &dir.join("images").join(format!("{}.png", s.id)),
            w,
            h,
            &image_to_bytes(&s.image),
        )?;
        let indices: Vec<u8> = s.gt_mask.iter().cloned().collect();
        pngio::write_indexed(
            &dir.join("masks").join(format!("{}.png", s.id)),
            w,
            h,
            &indices,
            &palette,
        )?;
        let names: Vec<&str> = s
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y > 0.5)
            .map(|(c, _)| cfg.classes[c].as_str())
            .collect();
        writer.write_record([s.id.as_str(), &names.join(",")])?;
    }
    writer.flush()?;
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(cfg)?,
    )?;
    Ok(())
}

/// Persists the corpus as `<dir>/train` and `<dir>/val`, each holding
/// `images/{id}.png`, `masks/{id}.png`, `labels.csv`, and `manifest.json`.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    save_split(&corpus.train, &corpus.config, &dir.join("train"))?;
    save_split(&corpus.val, &corpus.config, &dir.join("val"))?;
    Ok(())
}

fn load_split(dir: &Path, cfg: &CorpusConfig) -> Result<Vec<Sample>> {
    let mut reader = csv::Reader::from_path(dir.join("labels.csv"))?;
    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record?;
        let id = record
            .get(0)
            .ok_or_else(|| Error::Data("labels.csv row missing id".into()))?
            .to_string();
        let names = record.get(1).unwrap_or("");
        let mut labels = vec![0.0; cfg.num_classes()];
        for name in names.split(',').filter(|n| !n.is_empty()) {
            let idx = cfg
                .classes
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::Data(format!("unknown class `{name}` in labels.csv")))?;
            labels[idx] = 1.0;
        }
        let (w, h, rgb) = pngio::read_rgb(&dir.join("images").join(format!("{id}.png")))?;
        let (mw, mh, indices) = pngio::read_indexed(&dir.join("masks").join(format!("{id}.png")))?;
        if (w, h) != (mw, mh) {
            return Err(Error::Data(format!("image/mask size mismatch for {id}")));
        }
        samples.push(Sample {
            id,
            image: bytes_to_image(h, w, &rgb),
            labels,
            gt_mask: Array2::from_shape_vec((mh, mw), indices).expect("sized by decoder"),
        });
    }
    Ok(samples)
}

/// Loads a corpus directory written by [`save_corpus`].
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let cfg: CorpusConfig =
        serde_json::from_str(&fs::read_to_string(dir.join("train").join("manifest.json"))?)?;
    cfg.validate()?;
    let train = load_split(&dir.join("train"), &cfg)?;
    let val = load_split(&dir.join("val"), &cfg)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("corpus has an empty split".into()));
    }
    Ok(Corpus {
        config: cfg,
        train,
        val,
    })
}
