//! SGD training with a poly schedule, evaluation and the ablation harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint;
use crate::config::{Ablation, Config, TrainConfig};
use crate::dataset::{load_split, Split};
use crate::error::{Error, Result};
use crate::losses::{attach_supervision, LossReport};
use crate::metrics::{compute_report, ConfusionMatrix, MetricsReport, ProbStats};
use crate::network::{batch_images, Network};
use crate::nn::{update_running_stats, Ctx, ParamStore};
use crate::synthdata::{GlassSample, Grid};
use crate::tensor::Tensor;

pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// `base_lr · (1 − step/total)^power`.
pub fn poly_lr(base_lr: f64, step: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return base_lr;
    }
    let frac = (step.min(total) as f64) / total as f64;
    base_lr * (1.0 - frac).powf(power)
}

/// SGD with momentum. Weight decay is folded into the gradient, so the whole
/// update scales with the learning rate.
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    velocity: BTreeMap<String, Tensor<f32>>,
}

impl Sgd {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            grad_clip: cfg.grad_clip,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies one update and returns the gradient norm before clipping.
    pub fn step(
        &mut self,
        store: &mut ParamStore<f32>,
        grads: &BTreeMap<String, Tensor<f32>>,
        lr: f64,
    ) -> Result<f64> {
        let norm = grads
            .values()
            .flat_map(|g| g.data().iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Numerical(format!("gradient norm is {norm}")));
        }
        let clip = if self.grad_clip > 0.0 && norm > self.grad_clip {
            self.grad_clip / norm
        } else {
            1.0
        };
        let (m, wd) = (self.momentum as f32, self.weight_decay as f32);
        let (lr, clip) = (lr as f32, clip as f32);
        for (name, g) in grads {
            let w = store
                .get_mut(name)
                .ok_or_else(|| Error::Numerical(format!("gradient for unknown parameter {name}")))?;
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(w.shape()));
            for ((wi, vi), &gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                let d = gi * clip + wd * *wi;
                *vi = m * *vi + d;
                *wi -= lr * *vi;
            }
        }
        Ok(norm)
    }
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub checkpoint_hash: String,
    pub log: PathBuf,
    pub iterations: usize,
    pub first: LossReport,
    pub last: LossReport,
    pub network: Network,
    pub params: ParamStore<f32>,
}

fn log_header(cfg: &Config, n_samples: usize, total: usize) -> String {
    let t = &cfg.train;
    let mut s = String::new();
    writeln!(
        s,
        "# lr={} wd={} momentum={} power={} batch_size={} epochs={} seed={} ablation={}",
        t.base_lr,
        t.weight_decay,
        t.momentum,
        t.power,
        t.batch_size,
        t.epochs,
        t.seed,
        cfg.model.ablation.as_str()
    )
    .unwrap();
    writeln!(s, "# samples={n_samples} iterations={total}").unwrap();
    s.push_str(&LossReport::csv_header());
    s.push('\n');
    s
}

/// Trains on in-memory samples, writing the log and checkpoint under `out`.
pub fn train_samples(cfg: &Config, samples: &[GlassSample], out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let t = &cfg.train;
    let mut store = ParamStore::new();
    let net = Network::new(&cfg.model, &mut store)?;
    let per_epoch = samples.len().div_ceil(t.batch_size);
    let mut total = t.epochs * per_epoch;
    if t.max_iters > 0 {
        total = total.min(t.max_iters);
    }
    let log_path = out.join(LOG_FILE);
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    log.write_all(log_header(cfg, samples.len(), total).as_bytes())
        .map_err(|e| Error::io(&log_path, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let mut sgd = Sgd::new(t);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let (mut first, mut last) = (None, None);
    let mut iter = 0;
    let mut ckpt_hash = None;
    'epochs: for epoch in 1..=t.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(t.batch_size) {
            if iter == total {
                break 'epochs;
            }
            let batch: Vec<&GlassSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let lr = poly_lr(t.base_lr, iter, total, t.power);
            let (report, grads, stats) = {
                let tape = Tape::new();
                let ctx = Ctx::new(&tape, &store, true);
                let images = batch_images(&batch.iter().map(|s| &s.image).collect::<Vec<_>>());
                let output = net.forward(&ctx, &images)?;
                let masks: Vec<&Grid> = batch.iter().map(|s| &s.mask).collect();
                let bnds: Vec<&Grid> = batch.iter().map(|s| &s.boundary).collect();
                let loss = attach_supervision(&output, &masks, &bnds, &cfg.loss)?;
                if !loss.report.total.is_finite() {
                    let ids: Vec<&str> = batch.iter().map(|s| s.sample_id.as_str()).collect();
                    let dump = out.join("nan_batch.txt");
                    let text = format!("iteration {iter}\nbatch {}\n{:?}\n", ids.join(","), loss.report);
                    std::fs::write(&dump, text).map_err(|e| Error::io(&dump, e))?;
                    return Err(Error::Numerical(format!(
                        "non-finite loss at iteration {iter} on batch [{}]; details in {}",
                        ids.join(", "),
                        dump.display()
                    )));
                }
                let g = tape.backward(loss.total);
                (loss.report, ctx.param_grads(&g), ctx.take_batch_stats())
            };
            sgd.step(&mut store, &grads, lr)?;
            update_running_stats(&mut store, &stats);
            writeln!(log, "{}", report.csv_row(iter, lr)).map_err(|e| Error::io(&log_path, e))?;
            first.get_or_insert_with(|| report.clone());
            last = Some(report);
            iter += 1;
        }
        if t.checkpoint_every > 0 && epoch % t.checkpoint_every == 0 {
            ckpt_hash = Some(checkpoint::save(&ckpt_path, cfg, &store, iter)?);
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    // the final state is always on disk, whether or not the run ended on a boundary
    let hash = match ckpt_hash {
        Some(h) if checkpoint::load(&ckpt_path)?.iteration == iter => h,
        _ => checkpoint::save(&ckpt_path, cfg, &store, iter)?,
    };
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        checkpoint_hash: hash,
        log: log_path,
        iterations: iter,
        first: first.expect("at least one iteration"),
        last: last.expect("at least one iteration"),
        network: net,
        params: store,
    })
}

fn check_manifest_classes(cfg: &Config, n: usize) -> Result<()> {
    if n != cfg.model.n_classes {
        return Err(Error::Config(format!(
            "dataset has {n} classes but the model is configured for {}",
            cfg.model.n_classes
        )));
    }
    Ok(())
}

/// Trains on the train split of the dataset at `root`.
pub fn train(cfg: &Config, root: &Path, out: &Path) -> Result<TrainOutcome> {
    let (manifest, samples) = load_split(root, Split::Train)?;
    check_manifest_classes(cfg, manifest.n_classes)?;
    train_samples(cfg, &samples, out)
}

/// Softmax class probabilities and argmax labels of one image.
pub struct Prediction {
    pub labels: Grid,
    /// `1 − P(background)` per pixel, row-major.
    pub foreground: Vec<f64>,
}

pub fn predict_batch(net: &Network, store: &ParamStore<f32>, images: &[&Tensor<f32>]) -> Result<Vec<Prediction>> {
    let tape = Tape::new();
    let ctx = Ctx::inference(&tape, store);
    let out = net.forward(&ctx, &batch_images(images))?;
    Ok(logits_to_predictions(&out.logits.value()))
}

pub fn logits_to_predictions(logits: &Tensor<f32>) -> Vec<Prediction> {
    let (b, n, h, w) = logits.dims4();
    let hw = h * w;
    let d = logits.data();
    (0..b)
        .map(|bi| {
            let mut labels = Grid::zeros(h, w);
            let mut foreground = vec![0.0; hw];
            let mut z = vec![0.0f64; n];
            for px in 0..hw {
                for (c, zc) in z.iter_mut().enumerate() {
                    *zc = d[(bi * n + c) * hw + px] as f64;
                }
                let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = z.iter().map(|v| (v - mx).exp()).sum();
                let mut best = 0;
                for c in 1..n {
                    if z[c] > z[best] {
                        best = c;
                    }
                }
                labels.data[px] = best as u8;
                foreground[px] = 1.0 - (z[0] - mx).exp() / sum;
            }
            Prediction { labels, foreground }
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageScore {
    pub sample_id: String,
    pub per_class_iou: Vec<Option<f64>>,
}

pub struct Evaluation {
    pub report: MetricsReport,
    pub per_image: Vec<ImageScore>,
}

const EVAL_BATCH: usize = 8;

/// The settings echoed into every metrics report.
pub fn config_echo(cfg: &Config, hw: usize) -> BTreeMap<String, String> {
    let m = &cfg.model;
    BTreeMap::from([
        ("ablation".to_string(), m.ablation.as_str().to_string()),
        ("output_stride".to_string(), m.encoder.output_stride.to_string()),
        ("sar_k".to_string(), m.sar.k_for(hw).to_string()),
        ("sar_m".to_string(), m.sar.m_for(hw).to_string()),
    ])
}

/// Evaluates a trained network; batches run in parallel and their confusion
/// matrices are merged in dataset order.
pub fn evaluate(cfg: &Config, net: &Network, store: &ParamStore<f32>, samples: &[GlassSample]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let n = cfg.model.n_classes;
    let parts = samples
        .par_chunks(EVAL_BATCH)
        .map(|chunk| -> Result<(ConfusionMatrix, ProbStats, Vec<ImageScore>)> {
            let preds = predict_batch(net, store, &chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
            let mut cm = ConfusionMatrix::new(n);
            let mut ps = ProbStats::default();
            let mut scores = Vec::new();
            for (s, p) in chunk.iter().zip(&preds) {
                let mut one = ConfusionMatrix::new(n);
                one.accumulate(&p.labels, &s.mask)?;
                ps.accumulate(&p.foreground, &s.mask)?;
                cm.merge(&one)?;
                scores.push(ImageScore {
                    sample_id: s.sample_id.clone(),
                    per_class_iou: (0..n).map(|c| one.iou(c)).collect(),
                });
            }
            Ok((cm, ps, scores))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cm = ConfusionMatrix::new(n);
    let mut ps = ProbStats::default();
    let mut per_image = Vec::new();
    for (c, p, s) in parts {
        cm.merge(&c)?;
        ps.merge(&p);
        per_image.extend(s);
    }
    let hw = {
        let f1 = net.encoder().strides()[0];
        (samples[0].height() / f1) * (samples[0].width() / f1)
    };
    let report = compute_report(&cm, &ps, cfg.eval.beta2, config_echo(cfg, hw))?;
    Ok(Evaluation { report, per_image })
}

/// Loads a checkpoint and evaluates it on one split of the dataset at `root`.
/// `cfg` is the configuration in force; its architecture must match.
pub fn evaluate_checkpoint(cfg: &Config, ckpt: &Path, root: &Path, split: Split) -> Result<Evaluation> {
    let ck = checkpoint::load(ckpt)?;
    let (net, store) = checkpoint::restore(&ck, cfg)?;
    let (manifest, samples) = load_split(root, split)?;
    check_manifest_classes(cfg, manifest.n_classes)?;
    evaluate(cfg, &net, &store, &samples)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Ablation,
    pub final_loss: f64,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| variant | mIoU | mIoU (fg) | Acc | mAE | mBER | F-beta | final loss |\n|---|---|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            let m = &r.report;
            writeln!(
                s,
                "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.2} | {:.4} | {:.4} |",
                r.variant.as_str(),
                m.miou,
                m.miou_fg_only,
                m.acc,
                m.mae,
                m.mber,
                m.f_beta,
                r.final_loss
            )
            .unwrap();
        }
        s
    }
}

/// Trains every variant with the same seed and data, then scores each on
/// `eval_samples`.
pub fn run_ablation_samples(
    cfg: &Config,
    variants: &[Ablation],
    train: &[GlassSample],
    eval_samples: &[GlassSample],
    out: &Path,
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for &v in variants {
        let mut c = cfg.clone();
        c.model.ablation = v;
        let outcome = train_samples(&c, train, &out.join(v.as_str()))?;
        let eval = evaluate(&c, &outcome.network, &outcome.params, eval_samples)?;
        rows.push(AblationRow {
            variant: v,
            final_loss: outcome.last.total,
            report: eval.report,
        });
    }
    let table = AblationTable { rows };
    let md = out.join("ablation.md");
    std::fs::write(&md, table.to_markdown()).map_err(|e| Error::io(&md, e))?;
    let js = out.join("ablation.json");
    std::fs::write(&js, serde_json::to_string_pretty(&table).unwrap()).map_err(|e| Error::io(&js, e))?;
    Ok(table)
}

pub fn run_ablation(cfg: &Config, variants: &[Ablation], root: &Path, eval_split: Split, out: &Path) -> Result<AblationTable> {
    let (manifest, train) = load_split(root, Split::Train)?;
    check_manifest_classes(cfg, manifest.n_classes)?;
    let eval = if eval_split == Split::Train {
        train.clone()
    } else {
        load_split(root, eval_split)?.1
    };
    run_ablation_samples(cfg, variants, &train, &eval, out)
}
