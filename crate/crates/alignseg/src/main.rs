//! Thin command-line front end over the library.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use alignseg::cam::export_cam_pngs;
use alignseg::config::AppConfig;
use alignseg::harness::{
    ablate, evaluate, load_checkpoint, predict_labels, save_checkpoint, train_model,
    write_ablation_csv, write_eval_json, write_metrics_csv, EvalSource,
};
use alignseg::segmentor::write_label_png;
use alignseg::viz::write_similarity_heatmaps;
use alignseg::{compute_cam, encode, generate, load_bank, load_corpus, save_corpus, Corpus};

#[derive(Parser)]
#[command(
    name = "alignseg",
    about = "Weakly supervised semantic segmentation via dense image-text alignment",
    after_help = "Any config key can be overridden with --key=value (e.g. --iters=500, \
                  --train.seed=3, --lambda_p=0). Bare keys apply everywhere they occur; \
                  dotted keys address one section. Overrides must use the key=value form."
)]
struct Cli {
    /// JSON config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed field (data, encoder, text, train).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shapes corpus into a directory.
    MakeData {
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train on a corpus directory and write checkpoint + metrics.
    Train {
        /// Corpus root produced by make-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Optional externally produced text bank directory.
        #[arg(long)]
        bank: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// cam_pseudo or segmentation.
        #[arg(long, default_value = "cam_pseudo")]
        source: String,
        /// Defaults to the checkpoint directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run the alignment-loss ablation grid (3 seeds per cell).
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write per-(image, class) CAM grayscale PNGs.
    ExportCams {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// train or val.
        #[arg(long, default_value = "val")]
        split: String,
        /// Cap on the number of images exported.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Render per-class patch/text similarity heatmaps for one image.
    Plot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// train or val.
        #[arg(long, default_value = "val")]
        split: String,
        /// Defaults to the first image of the split.
        #[arg(long)]
        image_id: Option<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

const KNOWN_FLAGS: &[&str] = &[
    "--config",
    "--seed",
    "--out-dir",
    "--data",
    "--checkpoint",
    "--source",
    "--split",
    "--image-id",
    "--bank",
    "--limit",
    "--help",
    "--version",
];

/// Splits raw args into clap args and `--key=value` config overrides.
fn extract_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut clap_args = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        if let Some(rest) = arg.strip_prefix("--") {
            if let Some((key, value)) = rest.split_once('=') {
                let flag = format!("--{key}");
                if !KNOWN_FLAGS.contains(&flag.as_str()) {
                    overrides.push((key.to_string(), value.to_string()));
                    continue;
                }
            }
        }
        clap_args.push(arg);
    }
    (clap_args, overrides)
}

fn build_config(
    path: Option<&Path>,
    seed: Option<u64>,
    overrides: &[(String, String)],
) -> anyhow::Result<AppConfig> {
    let mut app = AppConfig::load(path)?;
    app.apply_overrides(overrides)?;
    if let Some(seed) = seed {
        app.set_seed(seed);
    }
    app.reconcile()?;
    Ok(app)
}

fn split_samples<'a>(corpus: &'a Corpus, split: &str) -> anyhow::Result<&'a [alignseg::Sample]> {
    match split {
        "train" => Ok(&corpus.train),
        "val" => Ok(&corpus.val),
        other => bail!("unknown split `{other}` (expected train or val)"),
    }
}

fn main() -> anyhow::Result<()> {
    let (clap_args, overrides) = extract_overrides(std::env::args().collect());
    let cli = Cli::parse_from(clap_args);

    match cli.command {
        Command::MakeData { out_dir } => {
            let app = build_config(cli.config.as_deref(), cli.seed, &overrides)?;
            let corpus = generate(&app.data)?;
            save_corpus(&corpus, &out_dir)?;
            println!(
                "wrote {} train + {} val images ({} classes: {}) to {}",
                corpus.train.len(),
                corpus.val.len(),
                app.data.num_classes(),
                app.data.classes.join(", "),
                out_dir.display()
            );
        }
        Command::Train { data, out_dir, bank } => {
            let mut app = build_config(cli.config.as_deref(), cli.seed, &overrides)?;
            let corpus = load_corpus(&data).context("loading corpus")?;
            app.data = corpus.config.clone();
            if let Some(seed) = cli.seed {
                app.data.seed = seed;
            }
            app.reconcile()?;
            let external = match bank {
                Some(dir) => Some(load_bank(&dir).context("loading text bank")?),
                None => None,
            };
            let started = std::time::Instant::now();
            let out = train_model(&corpus, &app, external)?;
            let secs = started.elapsed().as_secs_f64();
            std::fs::create_dir_all(&out_dir)?;
            write_metrics_csv(&out.metrics, &out_dir.join("metrics.csv"))?;
            let ckpt_dir = out_dir.join("checkpoint");
            save_checkpoint(
                &out.model,
                &app,
                app.train.iters,
                out.metrics.last().map(|r| r.loss),
                &ckpt_dir,
            )?;
            let cam = evaluate(&out.model, &corpus.val, EvalSource::CamPseudo, app.train.beta)?;
            let seg = evaluate(&out.model, &corpus.val, EvalSource::Segmentation, app.train.beta)?;
            println!(
                "trained {} iters in {:.1}s; val mIoU: cam_pseudo {:.4}, segmentation {:.4}",
                app.train.iters, secs, cam.miou, seg.miou
            );
            println!("checkpoint: {}", ckpt_dir.display());
        }
        Command::Eval {
            checkpoint,
            data,
            source,
            out_dir,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let corpus = load_corpus(&data)?;
            let source: EvalSource = source.parse()?;
            let report = evaluate(&ckpt.model, &corpus.val, source, ckpt.config.train.beta)?;
            let out_dir = out_dir.unwrap_or(checkpoint);
            std::fs::create_dir_all(&out_dir)?;
            let path = out_dir.join("eval.json");
            write_eval_json(&report, &path)?;
            println!("{source}: mIoU {:.4}", report.miou);
            for (c, iou) in report.per_class_iou.iter().enumerate() {
                let name = if c == 0 {
                    "background"
                } else {
                    corpus.config.classes[c - 1].as_str()
                };
                match iou {
                    Some(v) => println!("  {name}: {v:.4}"),
                    None => println!("  {name}: absent"),
                }
            }
            println!("wrote {}", path.display());
        }
        Command::Ablate { data, out_dir } => {
            let app = build_config(cli.config.as_deref(), cli.seed, &overrides)?;
            let corpus = load_corpus(&data)?;
            let mut app = app;
            app.data = corpus.config.clone();
            app.reconcile()?;
            let base_seed = app.train.seed;
            let seeds = [base_seed, base_seed + 1, base_seed + 2];
            let cells = ablate(&corpus, &app, &seeds)?;
            std::fs::create_dir_all(&out_dir)?;
            let path = out_dir.join("ablation.csv");
            write_ablation_csv(&cells, &path)?;
            println!("{:<18} {:>8} {:>8}", "cell", "mean", "std");
            for cell in &cells {
                println!("{:<18} {:>8.4} {:>8.4}", cell.name, cell.mean, cell.std);
            }
            println!("wrote {}", path.display());
        }
        Command::ExportCams {
            checkpoint,
            data,
            split,
            limit,
            out_dir,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let corpus = load_corpus(&data)?;
            let samples = split_samples(&corpus, &split)?;
            let limit = limit.unwrap_or(samples.len());
            let beta = ckpt.config.train.beta;
            let num_classes = ckpt.model.seg_cfg.num_classes;
            std::fs::create_dir_all(&out_dir)?;
            let mut files = 0usize;
            for sample in samples.iter().take(limit) {
                let bundle = encode(&sample.image, &ckpt.model.encoder_cfg, &ckpt.model.encoder)?;
                let cams = compute_cam(&bundle.patch_tokens, &ckpt.model.classifier.final_weight)?;
                let (h, w, _) = sample.image.dim();
                files += export_cam_pngs(
                    &cams,
                    &corpus.config.classes,
                    &sample.id,
                    h,
                    w,
                    &out_dir,
                )?
                .len();
                // Label maps alongside the raw CAMs: thresholded pseudo labels
                // and the segmentation head's prediction, as indexed PNGs.
                let pseudo = predict_labels(&ckpt.model, sample, EvalSource::CamPseudo, beta)?;
                write_label_png(
                    &pseudo,
                    num_classes,
                    &out_dir.join(format!("{}_pseudo.png", sample.id)),
                )?;
                let pred = predict_labels(&ckpt.model, sample, EvalSource::Segmentation, beta)?;
                write_label_png(
                    &pred,
                    num_classes,
                    &out_dir.join(format!("{}_pred.png", sample.id)),
                )?;
                files += 2;
            }
            println!(
                "wrote {files} CAM/label images for {} samples to {}",
                limit.min(samples.len()),
                out_dir.display()
            );
        }
        Command::Plot {
            checkpoint,
            data,
            split,
            image_id,
            out_dir,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let corpus = load_corpus(&data)?;
            let samples = split_samples(&corpus, &split)?;
            let sample = match image_id {
                Some(id) => samples
                    .iter()
                    .find(|s| s.id == id)
                    .with_context(|| format!("image id `{id}` not found in {split}"))?,
                None => &samples[0],
            };
            let written = write_similarity_heatmaps(&ckpt.model, sample, &out_dir)?;
            println!("wrote {} heatmap files to {}", written.len(), out_dir.display());
        }
    }
    Ok(())
}
