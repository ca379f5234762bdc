//! Build the frozen prompt-derived text bank and inspect the pairwise
//! cosine structure of its embeddings.
//!
//! ```bash
//! cargo run --example text_bank
//! ```

use alignseg::{build_bank, cosine, load_bank, save_bank};

fn main() -> alignseg::Result<()> {
    let names: Vec<String> = ["disk", "square", "triangle"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let bank = build_bank(&names, 64, 0)?;

    let mut rows: Vec<(&str, Vec<f64>)> = names
        .iter()
        .enumerate()
        .map(|(c, n)| (n.as_str(), bank.class_embeddings.row(c).to_vec()))
        .collect();
    rows.push(("background", bank.background.to_vec()));

    println!("pairwise cosines (seed 0, d_t = 64):");
    print!("{:>12}", "");
    for (n, _) in &rows {
        print!("{n:>12}");
    }
    println!();
    for (ni, vi) in &rows {
        print!("{ni:>12}");
        for (_, vj) in &rows {
            print!("{:>12.4}", cosine(vi, vj));
        }
        println!();
    }

    let dir = std::env::temp_dir().join("alignseg_example_bank");
    save_bank(&bank, &dir)?;
    let loaded = load_bank(&dir)?;
    assert_eq!(loaded.class_names, bank.class_names);
    println!("bank saved to and reloaded from {}", dir.display());
    Ok(())
}
