//! Render per-class patch/text similarity heatmaps (blue = dissimilar,
//! red = similar) for a validation image after a brief training run.
//!
//! ```bash
//! cargo run --release --example similarity_heatmaps
//! ```

use alignseg::viz::write_similarity_heatmaps;
use alignseg::{generate, train_model, AppConfig};

fn main() -> alignseg::Result<()> {
    let mut app = AppConfig::default();
    app.data.num_train = 40;
    app.data.num_val = 8;
    app.train.iters = 200;
    app.train.warmup_iters = 20;
    app.reconcile()?;

    let corpus = generate(&app.data)?;
    let out = train_model(&corpus, &app, None)?;

    let out_dir = std::env::temp_dir().join("alignseg_example_heatmaps");
    let sample = &corpus.val[0];
    let files = write_similarity_heatmaps(&out.model, sample, &out_dir)?;
    println!("image {} has labels {:?}", sample.id, sample.labels);
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}
