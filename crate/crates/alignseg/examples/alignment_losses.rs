//! Evaluate the two alignment losses on one sample: the global class-token
//! loss and the local per-patch cross-contrastive InfoNCE, in the shared
//! projection space.
//!
//! ```bash
//! cargo run --example alignment_losses
//! ```

use alignseg::{
    build_bank, compute_cam, encode, generate, global_align_loss, local_align_loss,
    local_similarities, object_mask, split_patches, AlignmentInputs, ClassifierWeights,
    CorpusConfig, EncoderConfig, EncoderParams, FeatureBundle, ProjectionHeads,
};

fn main() -> alignseg::Result<()> {
    let corpus = generate(&CorpusConfig {
        num_train: 2,
        num_val: 1,
        ..CorpusConfig::default()
    })?;
    let sample = &corpus.train[1];

    let enc_cfg = EncoderConfig::default();
    let encoder = EncoderParams::init(&enc_cfg)?;
    let classifier = ClassifierWeights::init(3, enc_cfg.token_dim, 0);
    let bank = build_bank(&corpus.config.classes, 64, 0)?;
    let proj = ProjectionHeads::init(enc_cfg.token_dim, 64, 64, 0);

    let bundle = encode(&sample.image, &enc_cfg, &encoder)?;
    let inter_cams = compute_cam(&bundle.intermediate, &classifier.inter_weight)?;
    let mask = object_mask(&inter_cams, &sample.labels, 0.5)?;
    let (fg, bg) = split_patches(&bundle.patch_tokens, &mask)?;

    let inputs = AlignmentInputs::new(
        proj.project_visual_vec(&bundle.class_token),
        proj.project_visual_rows(&FeatureBundle::flatten_grid(&fg)),
        proj.project_visual_rows(&FeatureBundle::flatten_grid(&bg)),
        proj.project_text_rows(&bank.class_embeddings),
        proj.project_text_vec(&bank.background),
        sample.labels.clone(),
    )?;

    println!("labels: {:?}", sample.labels);
    println!("global alignment loss: {:.5}", global_align_loss(&inputs));

    let sims = local_similarities(&inputs);
    println!(
        "similarity ranges: fg_pos [{:+.3}, {:+.3}], fg_neg [{:+.3}, {:+.3}]",
        sims.fg_pos.iter().cloned().fold(f64::INFINITY, f64::min),
        sims.fg_pos.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        sims.fg_neg.iter().cloned().fold(f64::INFINITY, f64::min),
        sims.fg_neg.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    println!(
        "local alignment loss (tau 1.0, lam 0.001): {:.5}",
        local_align_loss(&sims, 1.0, 0.001)
    );
    Ok(())
}
