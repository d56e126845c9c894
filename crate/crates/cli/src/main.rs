use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use rfenet::checkpoint;
use rfenet::config::{Ablation, Config};
use rfenet::dataset::{read_image, with_worker_pool, write_dataset, Split};
use rfenet::trainer;
use rfenet::viz;
use rfenet::Error;

#[derive(Parser)]
#[command(name = "rfenet", version, about = "Glass-like object segmentation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config overrides, applied in order (last wins).
    #[arg(long = "set", value_name = "KEY=VALUE", num_args = 1..)]
    set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into --out.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train on the train split of --data.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Render attention maps, boundary maps, uncertain points and the segmentation.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Train and score several ablation variants under the same seed and data.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "full,no_sar,baseline")]
        variants: Vec<String>,
        #[arg(long, default_value = "train")]
        split: String,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Checkpoint(_) => 3,
        Error::Numerical(_) => 4,
        _ => 2,
    }
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn mkdir(path: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Builds the effective config, validates it and echoes it next to the outputs.
fn resolve(common: &Common, base: Option<Config>) -> Result<Config, Error> {
    let mut cfg = match (&common.config, base) {
        (Some(p), _) => Config::load(p)?,
        (None, Some(b)) => b,
        (None, None) => Config::default(),
    };
    cfg.apply_overrides(&common.set)?;
    cfg.validate()?;
    mkdir(&common.out)?;
    write(&common.out.join("effective_config.txt"), &cfg.render())?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = resolve(&common, None)?;
            let samples = with_worker_pool(|| cfg.data.generate())?;
            let manifest = write_dataset(
                &samples,
                &common.out,
                cfg.split_fractions(),
                cfg.data.n_classes,
                cfg.data.boundary_thickness,
            )?;
            let bytes = std::fs::read(common.out.join("manifest.json")).map_err(|e| Error::Io {
                path: common.out.join("manifest.json"),
                source: e,
            })?;
            let counts = manifest.counts();
            println!(
                "generated {} samples into {} (train {}, val {}, test {}); {} classes, canvas {}x{}",
                samples.len(),
                common.out.display(),
                counts[0].1,
                counts[1].1,
                counts[2].1,
                manifest.n_classes,
                manifest.canvas[0],
                manifest.canvas[1]
            );
            println!("manifest sha256 {}", hex::encode(Sha256::digest(&bytes)));
        }
        Command::Train { common, data } => {
            let cfg = resolve(&common, None)?;
            let out = with_worker_pool(|| trainer::train(&cfg, &data, &common.out))?;
            println!(
                "trained {} iterations; loss {:.4} -> {:.4}",
                out.iterations, out.first.total, out.last.total
            );
            println!("checkpoint {} sha256 {}", out.checkpoint.display(), out.checkpoint_hash);
            println!("log {}", out.log.display());
        }
        Command::Eval {
            common,
            data,
            checkpoint: ckpt,
            split,
        } => {
            let split: Split = split.parse()?;
            let embedded = checkpoint::load(&ckpt)?.config;
            let cfg = resolve(&common, Some(embedded))?;
            let eval = with_worker_pool(|| trainer::evaluate_checkpoint(&cfg, &ckpt, &data, split))?;
            let r = &eval.report;
            write(&common.out.join("metrics.json"), &r.to_json())?;
            write(&common.out.join("metrics.csv"), &format!("{}\n{}\n", r.csv_header(), r.csv_row()))?;
            if cfg.eval.per_image {
                let mut s = String::from("sample_id");
                for c in 0..cfg.model.n_classes {
                    s.push_str(&format!(",iou_{c}"));
                }
                s.push('\n');
                for img in &eval.per_image {
                    s.push_str(&img.sample_id);
                    for v in &img.per_class_iou {
                        s.push(',');
                        if let Some(v) = v {
                            s.push_str(&format!("{v:.10}"));
                        }
                    }
                    s.push('\n');
                }
                write(&common.out.join("per_image.csv"), &s)?;
            }
            println!(
                "{split}: mIoU {:.4} (fg {:.4}) acc {:.4} mAE {:.4} mBER {:.2} F-beta {:.4}",
                r.miou, r.miou_fg_only, r.acc, r.mae, r.mber, r.f_beta
            );
        }
        Command::Visualize {
            common,
            checkpoint: ckpt,
            image,
        } => {
            let ck = checkpoint::load(&ckpt)?;
            let cfg = resolve(&common, Some(ck.config.clone()))?;
            let (net, store) = checkpoint::restore(&ck, &cfg)?;
            let img = read_image(&image)?;
            let stem = image
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "image".into());
            let v = viz::visualize(&net, &store, &img, &stem, &common.out)?;
            for f in &v.files {
                println!("{}", f.display());
            }
        }
        Command::Ablate {
            common,
            data,
            variants,
            split,
        } => {
            let cfg = resolve(&common, None)?;
            let split: Split = split.parse()?;
            let variants = variants
                .iter()
                .map(|v| v.trim().parse::<Ablation>())
                .collect::<Result<Vec<_>, _>>()?;
            let table = with_worker_pool(|| trainer::run_ablation(&cfg, &variants, &data, split, &common.out))?;
            print!("{}", table.to_markdown());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
