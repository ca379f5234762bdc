//! Short end-to-end run on a small corpus: train, look at the loss
//! trajectory, evaluate both prediction sources, and write a checkpoint.
//!
//! ```bash
//! cargo run --release --example train_and_eval
//! ```

use alignseg::harness::{save_checkpoint, EvalSource};
use alignseg::{evaluate, generate, train_model, AppConfig};

fn main() -> alignseg::Result<()> {
    let mut app = AppConfig::default();
    app.data.num_train = 80;
    app.data.num_val = 20;
    app.train.iters = 800;
    app.train.warmup_iters = 60;
    app.reconcile()?;

    let corpus = generate(&app.data)?;
    let out = train_model(&corpus, &app, None)?;

    let first = &out.metrics[0];
    let last = out.metrics.last().unwrap();
    println!(
        "step {:>4}: total {:.4} (cls {:.4}, im {:.4}, ex {:.4})",
        first.step, first.loss.total, first.loss.cls, first.loss.im, first.loss.ex
    );
    println!(
        "step {:>4}: total {:.4} (cls {:.4}, im {:.4}, ex {:.4})",
        last.step, last.loss.total, last.loss.cls, last.loss.im, last.loss.ex
    );

    for source in [EvalSource::CamPseudo, EvalSource::Segmentation] {
        let report = evaluate(&out.model, &corpus.val, source, app.train.beta)?;
        println!("{source}: mIoU {:.4}", report.miou);
    }

    let dir = std::env::temp_dir().join("alignseg_example_checkpoint");
    save_checkpoint(&out.model, &app, app.train.iters, None, &dir)?;
    println!("checkpoint written to {}", dir.display());
    Ok(())
}
