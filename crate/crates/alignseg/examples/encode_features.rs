//! Run the visual encoder on one image and look at its three outputs: the
//! class token, the patch-token grid, and the intermediate feature tap.
//! Also shows positional-embedding resizing on a larger input.
//!
//! ```bash
//! cargo run --example encode_features
//! ```

use alignseg::{encode, generate, CorpusConfig, EncoderConfig, EncoderParams};
use ndarray::Array3;

fn main() -> alignseg::Result<()> {
    let cfg = EncoderConfig::default();
    let params = EncoderParams::init(&cfg)?;

    let corpus = generate(&CorpusConfig {
        num_train: 1,
        num_val: 1,
        ..CorpusConfig::default()
    })?;
    let bundle = encode(&corpus.train[0].image, &cfg, &params)?;

    println!("class token: [{}]", bundle.class_token.len());
    println!("patch tokens: {:?}", bundle.patch_tokens.dim());
    println!("intermediate: {:?}", bundle.intermediate.dim());
    let norm = bundle.class_token.dot(&bundle.class_token).sqrt();
    println!("class-token L2 norm: {norm:.4}");

    // The same parameters handle a larger image: the positional embedding is
    // bilinearly resized to the new grid.
    let big = Array3::from_elem((128, 128, 3), 0.5);
    let bundle = encode(&big, &cfg, &params)?;
    println!("128x128 input -> patch grid {:?}", bundle.patch_tokens.dim());
    Ok(())
}
