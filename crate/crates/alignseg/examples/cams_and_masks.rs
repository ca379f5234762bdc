//! Compute class activation maps from the intermediate feature tap, derive
//! the object-aware mask at the background threshold, and split the patch
//! tokens into foreground and background.
//!
//! ```bash
//! cargo run --example cams_and_masks
//! ```

use alignseg::{
    compute_cam, encode, generate, object_mask, split_patches, ClassifierWeights, CorpusConfig,
    EncoderConfig, EncoderParams,
};

fn main() -> alignseg::Result<()> {
    let corpus = generate(&CorpusConfig {
        num_train: 4,
        num_val: 1,
        ..CorpusConfig::default()
    })?;
    let sample = &corpus.train[0];

    let enc_cfg = EncoderConfig::default();
    let params = EncoderParams::init(&enc_cfg)?;
    let classifier = ClassifierWeights::init(3, enc_cfg.token_dim, 0);

    let bundle = encode(&sample.image, &enc_cfg, &params)?;
    let cams = compute_cam(&bundle.intermediate, &classifier.inter_weight)?;
    for (c, name) in corpus.config.classes.iter().enumerate() {
        let map = cams.maps.index_axis(ndarray::Axis(0), c);
        let max = map.iter().cloned().fold(0.0f64, f64::max);
        let mean = map.mean().unwrap();
        println!("{name}: CAM max {max:.3}, mean {mean:.3}");
    }

    for beta in [0.3, 0.5, 0.7] {
        let mask = object_mask(&cams, &sample.labels, beta)?;
        println!(
            "beta {beta}: {} of {} cells foreground",
            mask.foreground_count(),
            mask.mask.len()
        );
    }

    let mask = object_mask(&cams, &sample.labels, 0.5)?;
    let (fg, bg) = split_patches(&bundle.patch_tokens, &mask)?;
    let energy = |t: &ndarray::Array3<f64>| t.iter().map(|v| v * v).sum::<f64>();
    println!(
        "token energy: fg {:.2}, bg {:.2}, total {:.2}",
        energy(&fg),
        energy(&bg),
        energy(&bundle.patch_tokens)
    );
    Ok(())
}
