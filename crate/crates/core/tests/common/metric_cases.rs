//! Metric and loss checks against hand computations.

use rand::Rng;

use rfenet::autograd::Tape;
use rfenet::config::{LossConfig, ModelConfig};
use rfenet::losses::{attach_supervision, downsample_max, downsample_nearest};
use rfenet::metrics::{compute_report, MetricsReport, ProbStats};
use rfenet::network::{batch_images, Network};
use rfenet::nn::{Ctx, ParamStore};
use rfenet::synthdata::{generate_scene, Grid, SceneSpec};

use super::{confusion, metric_oracle, random_grid, rng};

pub fn report(pred: &Grid, gt: &Grid, fg: &[f64], n: usize, beta2: f64) -> MetricsReport {
    let cm = confusion(pred, gt, n);
    let mut probs = ProbStats::default();
    probs.accumulate(fg, gt).unwrap();
    compute_report(&cm, &probs, beta2, Default::default()).unwrap()
}

/// Random 8×8 three-class cases against the pixel-by-pixel recount.
pub fn metrics_match_recount(seed: u64, cases: usize) {
    let mut r = rng(seed);
    for case in 0..cases {
        // skew some cases so classes go missing
        let classes = if case % 4 == 0 { 2 } else { 3 };
        let pred = random_grid(8, 8, classes, &mut r);
        let gt = random_grid(8, 8, 3, &mut r);
        let fg: Vec<f64> = (0..64).map(|_| r.random::<f64>()).collect();
        let got = report(&pred, &gt, &fg, 3, 0.3);
        let want = metric_oracle(&pred, &gt, &fg, 3, 0.3);
        let close = |a: f64, b: f64, what: &str| assert!((a - b).abs() < 1e-10, "case {case} {what}: {a} vs {b}");
        close(got.miou, want.miou_with_bg, "miou");
        close(got.miou_fg_only, want.miou_fg_only, "fg miou");
        close(got.acc, want.acc, "acc");
        close(got.mae, want.mae, "mae");
        close(got.mber, want.mber, "mber");
        close(got.f_beta, want.f_beta, "f_beta");
        assert_eq!(got.per_class_iou.len(), 3);
        for (a, b) in got.per_class_iou.iter().zip(&want.iou) {
            match (a, b) {
                (Some(a), Some(b)) => close(*a, *b, "class iou"),
                (None, None) => {}
                _ => panic!("case {case}: class presence differs"),
            }
        }
    }
}

/// Perfect prediction gives (mIoU, acc, mAE, mBER, F) = (1, 1, 0, 0, 1), and
/// predicting only background on a half-foreground map gives BER 50.
pub fn metric_extremes() {
    let gt = Grid::from_vec(2, 4, vec![0, 0, 0, 0, 1, 1, 1, 1]);
    let fg: Vec<f64> = gt.data.iter().map(|&v| v as f64).collect();
    let m = report(&gt, &gt, &fg, 2, 0.3);
    assert_eq!((m.miou, m.acc, m.mae, m.mber, m.f_beta), (1.0, 1.0, 0.0, 0.0, 1.0));

    let bg = Grid::zeros(2, 4);
    let m = report(&bg, &gt, &[0.0; 8], 2, 0.3);
    assert_eq!(m.mber, 50.0);
}

/// The reported total equals `L_s_out + λ_s ΣL_s + λ_b ΣL_b` and each
/// component matches the standalone loss on downsampled targets.
pub fn joint_loss_recombines(seed: u64, lambda_s: f64, lambda_b: f64) {
    let sample = generate_scene(
        &SceneSpec {
            canvas: (32, 32),
            rng_seed: seed,
            ..Default::default()
        },
        "r",
    )
    .unwrap();
    let mut store = ParamStore::<f64>::new();
    let net = Network::new(
        &ModelConfig {
            init_seed: seed,
            ..Default::default()
        },
        &mut store,
    )
    .unwrap();
    let cfg = LossConfig {
        lambda_s,
        lambda_b,
        ..Default::default()
    };
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, true);
    let out = net.forward(&ctx, &batch_images(&[&sample.image])).unwrap();
    let joint = attach_supervision(&out, &[&sample.mask], &[&sample.boundary], &cfg).unwrap();
    let rep = &joint.report;
    assert_eq!(rep.stages, vec![1, 2, 3, 4]);
    assert!((rep.total - rep.recombine()).abs() < 1e-6, "{} vs {}", rep.total, rep.recombine());
    assert_eq!(joint.total.value().data()[0], rep.total);

    let sum_s: f64 = rep.l_s.iter().sum();
    let sum_b: f64 = rep.l_b.iter().sum();
    assert!((rep.total - (rep.l_s_out + lambda_s * sum_s + lambda_b * sum_b)).abs() < 1e-6);

    for st in &out.stages {
        let sh = st.sem_logits.shape();
        let m = downsample_nearest(&sample.mask, sh[2], sh[3]);
        let b = downsample_max(&sample.boundary, sh[2], sh[3]);
        let ce = scratch_ce(&st.sem_logits.value().to_f64_vec(), sh[1], &m);
        let prob: Vec<f64> = st
            .bnd_logits
            .value()
            .to_f64_vec()
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let dice = scratch_dice(&prob, &b, cfg.dice_smooth);
        let (ls, lb) = rep.stage_terms(st.index).unwrap();
        assert!((ls - ce).abs() < 1e-9, "stage {} CE {ls} vs {ce}", st.index);
        assert!((lb - dice).abs() < 1e-9, "stage {} Dice {lb} vs {dice}", st.index);
    }
}

/// Mean cross entropy of one `(n, h, w)` logit map.
pub fn scratch_ce(logits: &[f64], n: usize, target: &Grid) -> f64 {
    let hw = target.data.len();
    let mut total = 0.0;
    for p in 0..hw {
        let z: f64 = (0..n).map(|c| logits[c * hw + p].exp()).sum();
        total += z.ln() - logits[target.data[p] as usize * hw + p];
    }
    total / hw as f64
}

/// `1 - (2Σpt + s) / (Σp² + Σt² + s)` for one map.
pub fn scratch_dice(p: &[f64], target: &Grid, smooth: f64) -> f64 {
    let t: Vec<f64> = target.data.iter().map(|&v| (v > 0) as u8 as f64).collect();
    let inter: f64 = p.iter().zip(&t).map(|(a, b)| a * b).sum();
    let pp: f64 = p.iter().map(|a| a * a).sum();
    let tt: f64 = t.iter().map(|a| a * a).sum();
    1.0 - (2.0 * inter + smooth) / (pp + tt + smooth)
}
