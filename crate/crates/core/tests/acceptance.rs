//! Acceptance run: each criterion prints one PASS or FAIL line; the process
//! exits non-zero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::Rng;

use common::{boundary_oracle, grad_cases, metric_cases, rng, structure_cases, top_k_oracle};
use rfenet::config::{Ablation, Config};
use rfenet::dataset::{read_manifest, write_dataset};
use rfenet::sar::{pixel_entropy, select_confident_boundary, select_uncertain};
use rfenet::synthdata::{mask_to_boundary, Grid, DEFAULT_BOUNDARY_THICKNESS};
use rfenet::tensor::Tensor;
use rfenet::trainer::{self, evaluate, run_ablation_samples, train_samples};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let cases: [(&str, fn(u64) -> common::GradReport); 6] = [
        ("sme", grad_cases::sme),
        ("cross_attend", grad_cases::cross_attend),
        ("sar", grad_cases::sar),
        ("dice", grad_cases::dice),
        ("cross_entropy", grad_cases::cross_entropy),
        ("cascade", grad_cases::cascade),
    ];
    let mut worst = Vec::new();
    for (name, case) in cases {
        let r = case(1);
        ensure(r.max_rel < 1e-3, format!("{name}: rel err {:.2e} at {}", r.max_rel, r.worst))?;
        worst.push(format!("{name} {:.1e}", r.max_rel));
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(300), format!("took {took:?}"))?;
    Ok(format!("{} in {:.1}s", worst.join(", "), took.as_secs_f64()))
}

fn selection() -> Outcome {
    let mut r = rng(2);
    for map in 0..100 {
        // coarse levels make ties frequent
        let levels = if map % 2 == 0 { 5.0 } else { 1e6 };
        let scores: Vec<f64> = (0..256).map(|_| (r.random::<f64>() * levels).floor() / levels).collect();
        let u = select_uncertain(&scores, 17).map_err(|e| e.to_string())?;
        ensure(u.indices == top_k_oracle(&scores, 17), format!("uncertain selection differs on map {map}"))?;
        let b = select_confident_boundary(&scores, 32).map_err(|e| e.to_string())?;
        ensure(b.indices == top_k_oracle(&scores, 32), format!("boundary selection differs on map {map}"))?;
    }
    let mut max_err = 0.0f64;
    for _ in 0..20 {
        let (n, hw) = (3, 64);
        let mut p = vec![0.0; n * hw];
        for px in 0..hw {
            let raw: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            for c in 0..n {
                p[c * hw + px] = raw[c] / s;
            }
        }
        let e = pixel_entropy(&Tensor::new(&[n, 8, 8], p.clone()));
        for px in 0..hw {
            let direct: f64 = (0..n).map(|c| -p[c * hw + px] * p[c * hw + px].ln()).sum();
            max_err = max_err.max((e[px] - direct).abs());
        }
    }
    ensure(max_err < 1e-10, format!("entropy error {max_err:.2e}"))?;
    Ok(format!("200 maps match the rank oracle, entropy error {max_err:.1e}"))
}

fn structure() -> Outcome {
    structure_cases::residual_enhance_identities(3);
    structure_cases::sme_zero_attention_identity(3);
    structure_cases::sme_oneway(3);
    structure_cases::sar_scatter_locality(3);
    structure_cases::prediction_maps_are_distributions(3);
    for seed in 0..10 {
        structure_cases::cross_attention_identities(seed);
    }
    structure_cases::k_zero_network_matches_no_sar(3);
    Ok("zero-attention identity, scatter locality, K=0 identity, row sums, value permutation".into())
}

fn metrics() -> Outcome {
    metric_cases::metrics_match_recount(4, 200);
    metric_cases::metric_extremes();
    Ok("200 random 8x8 cases, perfect = (1, 1, 0, 0, 1), all-background BER = 50".into())
}

/// Random rectangles of random classes, so the masks have both flat regions
/// and dense transitions.
fn blocky_mask(r: &mut rand_chacha::ChaCha8Rng) -> Grid {
    let mut g = Grid::zeros(32, 32);
    for _ in 0..r.random_range(0..6) {
        let (y0, x0) = (r.random_range(0..32), r.random_range(0..32));
        let (y1, x1) = (r.random_range(y0..=32), r.random_range(x0..=32));
        let c = r.random_range(0..3);
        for y in y0..y1 {
            for x in x0..x1 {
                g.set(y, x, c);
            }
        }
    }
    g
}

fn boundary() -> Outcome {
    let mut r = rng(5);
    ensure(DEFAULT_BOUNDARY_THICKNESS == 8, "default thickness is not 8")?;
    ensure(Config::default().data.boundary_thickness == 8, "config default thickness is not 8")?;
    for i in 0..100 {
        let mask = if i % 4 == 0 {
            common::random_grid(32, 32, 2, &mut r)
        } else {
            blocky_mask(&mut r)
        };
        ensure(
            mask_to_boundary(&mask, 8) == boundary_oracle(&mask, 8),
            format!("mask {i} differs from the exhaustive scan"),
        )?;
    }
    Ok("100 random 32x32 masks match, default thickness 8".into())
}

fn overfit() -> Outcome {
    let mut cfg = Config::default();
    cfg.apply_overrides(&["data.n=8", "data.seed=11", "train.epochs=1000", "train.max_iters=800", "train.checkpoint_every=0"])
        .map_err(|e| e.to_string())?;
    let samples = cfg.data.generate().map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let out = train_samples(&cfg, &samples, dir.path()).map_err(|e| e.to_string())?;
    let eval = evaluate(&cfg, &out.network, &out.params, &samples).map_err(|e| e.to_string())?;
    let ratio = out.last.total / out.first.total;
    let detail = format!(
        "{} iters, fg mIoU {:.4}, loss ratio {:.4}, {:.0}s",
        out.iterations,
        eval.report.miou_fg_only,
        ratio,
        start.elapsed().as_secs_f64()
    );
    ensure(eval.report.miou_fg_only >= 0.95 && ratio < 0.1, detail.clone())?;
    Ok(detail)
}

fn ablation() -> Outcome {
    let mut cfg = Config::default();
    cfg.apply_overrides(&["data.n=200", "train.epochs=15", "train.checkpoint_every=0"])
        .map_err(|e| e.to_string())?;
    let all = cfg.data.generate().map_err(|e| e.to_string())?;
    let n_train = cfg.split_fractions().counts(all.len())[0];
    let train = &all[..n_train];
    let dir = tempfile::tempdir().unwrap();
    let variants = [Ablation::Full, Ablation::NoSar, Ablation::Baseline];
    let table = run_ablation_samples(&cfg, &variants, train, train, dir.path()).map_err(|e| e.to_string())?;
    let miou = |v| table.row(v).unwrap().report.miou;
    let (full, no_sar, base) = (miou(Ablation::Full), miou(Ablation::NoSar), miou(Ablation::Baseline));
    let detail = format!("train-split mIoU full {full:.4}, no_sar {no_sar:.4}, baseline {base:.4}");
    ensure(full >= no_sar - 0.005 && no_sar >= base - 0.005, detail.clone())?;
    Ok(detail)
}

fn determinism() -> Outcome {
    let mut cfg = Config::default();
    cfg.apply_overrides(&["data.n=10", "train.max_iters=6", "train.batch_size=2"])
        .map_err(|e| e.to_string())?;
    let tmp = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for i in 0..2 {
        let root = tmp.path().join(format!("data{i}"));
        let samples = cfg.data.generate().map_err(|e| e.to_string())?;
        write_dataset(&samples, &root, cfg.split_fractions(), cfg.data.n_classes, cfg.data.boundary_thickness)
            .map_err(|e| e.to_string())?;
        let out = trainer::train(&cfg, &root, &tmp.path().join(format!("run{i}"))).map_err(|e| e.to_string())?;
        let log = std::fs::read(&out.log).unwrap();
        runs.push((read_manifest(&root).unwrap(), log, out.checkpoint_hash));
    }
    ensure(runs[0].0 == runs[1].0, "manifests differ")?;
    ensure(runs[0].1 == runs[1].1, "training logs differ")?;
    ensure(runs[0].2 == runs[1].2, "checkpoint hashes differ")?;
    Ok(format!("identical logs, checkpoint sha256 {}", &runs[0].2[..16]))
}

fn recombination() -> Outcome {
    for seed in 0..3 {
        metric_cases::joint_loss_recombines(seed, 0.01, 0.25);
    }
    let cfg = Config::default();
    ensure(
        (cfg.loss.lambda_s, cfg.loss.lambda_b) == (0.01, 0.25),
        "default loss weights are not 0.01 and 0.25",
    )?;
    Ok("total = L_out + 0.01 sum L_s + 0.25 sum L_b to 1e-6".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient integrity", gradients),
        ("selection oracles", selection),
        ("structural identities", structure),
        ("metric oracles", metrics),
        ("boundary ground truth", boundary),
        ("overfit smoke test", overfit),
        ("ablation ordering", ablation),
        ("determinism", determinism),
        ("loss recombination", recombination),
    ];
    // keep panic messages from interleaving with the report lines
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(r) => r,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        match outcome {
            Ok(detail) => println!("PASS {}. {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {}. {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
