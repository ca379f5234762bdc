//! Generate a small synthetic shapes corpus, inspect it, and round-trip it
//! through the on-disk layout.
//!
//! ```bash
//! cargo run --example generate_corpus
//! ```

use alignseg::{generate, load_corpus, save_corpus, CorpusConfig};

fn main() -> alignseg::Result<()> {
    let cfg = CorpusConfig {
        num_train: 40,
        num_val: 10,
        seed: 7,
        ..CorpusConfig::default()
    };
    let corpus = generate(&cfg)?;

    let mut counts = vec![0usize; cfg.num_classes()];
    for s in &corpus.train {
        for (c, &y) in s.labels.iter().enumerate() {
            if y > 0.5 {
                counts[c] += 1;
            }
        }
    }
    println!("train samples: {}", corpus.train.len());
    for (name, n) in cfg.classes.iter().zip(&counts) {
        println!("  {name}: present in {n} images");
    }
    let s = &corpus.train[0];
    let fg_px = s.gt_mask.iter().filter(|&&v| v > 0).count();
    println!(
        "sample {}: labels {:?}, {fg_px} foreground pixels of {}",
        s.id,
        s.labels,
        s.gt_mask.len()
    );

    let dir = std::env::temp_dir().join("alignseg_example_corpus");
    save_corpus(&corpus, &dir)?;
    let reloaded = load_corpus(&dir)?;
    assert_eq!(reloaded, corpus);
    println!("round-tripped through {}", dir.display());
    Ok(())
}
