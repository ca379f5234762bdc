//! Pseudo-label extraction from CAMs and pixel-adaptive refinement: how the
//! color-affinity smoothing cleans up a noisy label probability map.
//!
//! ```bash
//! cargo run --example pseudo_label_refinement
//! ```

use alignseg::segmentor::{argmax_labels, one_hot_probs};
use alignseg::{
    compute_cam, encode, generate, pixel_adaptive_refine, pseudo_labels, ClassifierWeights,
    CorpusConfig, EncoderConfig, EncoderParams,
};

fn main() -> alignseg::Result<()> {
    let corpus = generate(&CorpusConfig {
        num_train: 2,
        num_val: 1,
        ..CorpusConfig::default()
    })?;
    let sample = &corpus.train[0];
    let (h, w, _) = sample.image.dim();

    let enc_cfg = EncoderConfig::default();
    let encoder = EncoderParams::init(&enc_cfg)?;
    let classifier = ClassifierWeights::init(3, enc_cfg.token_dim, 0);

    let bundle = encode(&sample.image, &enc_cfg, &encoder)?;
    let cams = compute_cam(&bundle.patch_tokens, &classifier.final_weight)?;
    let pl = pseudo_labels(&cams, &sample.labels, 0.5, h, w);

    let fg = |m: &alignseg::PseudoLabelMap| m.labels.iter().filter(|&&v| v > 0).count();
    println!("raw pseudo labels: {} foreground pixels", fg(&pl));

    let probs = one_hot_probs(&pl, 4);
    let refined = pixel_adaptive_refine(&sample.image, &probs, 10)?;
    let pl_refined = argmax_labels(&refined);
    println!("after 10 refinement iterations: {} foreground pixels", fg(&pl_refined));

    let agree = pl
        .labels
        .iter()
        .zip(pl_refined.labels.iter())
        .filter(|(a, b)| a == b)
        .count();
    println!(
        "agreement raw vs refined: {:.1}%",
        100.0 * agree as f64 / (h * w) as f64
    );
    let gt_agree = pl_refined
        .labels
        .iter()
        .zip(sample.gt_mask.iter())
        .filter(|(a, b)| a == b)
        .count();
    println!(
        "refined vs ground truth: {:.1}% (untrained model, so near chance)",
        100.0 * gt_agree as f64 / (h * w) as f64
    );
    Ok(())
}
