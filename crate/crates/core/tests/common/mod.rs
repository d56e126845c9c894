//! Shared helpers: seeded random tensors, finite-difference gradient checks,
//! and brute-force oracles.
#![allow(dead_code)]

pub mod grad_cases;
pub mod metric_cases;
pub mod structure_cases;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use rfenet::autograd::{Tape, Var};
use rfenet::metrics::ConfusionMatrix;
use rfenet::nn::{Ctx, ParamStore};
use rfenet::synthdata::Grid;
use rfenet::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng, std: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let d = Normal::new(0.0, std).unwrap();
    Tensor::new(shape, (0..n).map(|_| d.sample(rng)).collect())
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random::<f64>()).collect())
}

pub fn random_grid(h: usize, w: usize, classes: u8, rng: &mut ChaCha8Rng) -> Grid {
    Grid::from_vec(h, w, (0..h * w).map(|_| rng.random_range(0..classes)).collect())
}

/// Worst per-tensor relative error between analytic and central-difference
/// gradients, with the name of the offending tensor.
#[derive(Debug)]
pub struct GradReport {
    pub max_rel: f64,
    pub worst: String,
    pub coords: usize,
}

/// Checks `d loss / d param` for every trainable tensor the loss touches.
/// At most `per_tensor` coordinates of each tensor are probed.
pub fn grad_check<F>(store: &ParamStore<f64>, per_tensor: usize, seed: u64, loss: F) -> GradReport
where
    F: for<'a, 't> Fn(&'a Ctx<'t, f64>) -> Var<'t, f64>,
{
    let analytic = {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, true);
        let l = loss(&ctx);
        let g = tape.backward(l);
        ctx.param_grads(&g)
    };
    let eval = |s: &ParamStore<f64>| {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, s, true);
        loss(&ctx).value().data()[0]
    };
    let eps = 1e-6;
    let mut r = rng(seed);
    let mut report = GradReport {
        max_rel: 0.0,
        worst: String::new(),
        coords: 0,
    };
    let mut probe = store.clone();
    for (name, g) in &analytic {
        let n = g.numel();
        let coords: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| r.random_range(0..n)).collect()
        };
        let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        for &i in &coords {
            let orig = probe.get(name).unwrap().data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + eps;
            let up = eval(&probe);
            probe.get_mut(name).unwrap().data_mut()[i] = orig - eps;
            let down = eval(&probe);
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let num = (up - down) / (2.0 * eps);
            let a = g.data()[i];
            diff += (a - num).powi(2);
            na += a * a;
            nn += num * num;
        }
        report.coords += coords.len();
        let scale = na.sqrt().max(nn.sqrt());
        // gradients this small are dominated by rounding in the difference quotient
        if scale < 1e-7 {
            continue;
        }
        let rel = diff.sqrt() / scale;
        if rel > report.max_rel {
            report.max_rel = rel;
            report.worst = name.clone();
        }
    }
    report
}

/// Rank-counting top-k: index `i` is chosen iff fewer than `k` indices beat
/// it, where `j` beats `i` when `s_j > s_i`, or `s_j == s_i` and `j < i`.
pub fn top_k_oracle(scores: &[f64], k: usize) -> Vec<usize> {
    let n = scores.len();
    let mut ranked: Vec<(usize, usize)> = (0..n)
        .map(|i| {
            let rank = (0..n)
                .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
                .count();
            (rank, i)
        })
        .filter(|&(rank, _)| rank < k)
        .collect();
    ranked.sort();
    ranked.into_iter().map(|(_, i)| i).collect()
}

/// Band of pixels within chebyshev distance `ceil(t/2) - 1` of some pixel
/// whose 4-neighbourhood contains a different label, by exhaustive scan.
pub fn boundary_oracle(mask: &Grid, thickness: usize) -> Grid {
    let (h, w) = (mask.height, mask.width);
    let mut transitions = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let v = mask.at(y as usize, x as usize);
            let differs = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)].iter().any(|&(dy, dx)| {
                let (yy, xx) = (y + dy, x + dx);
                yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64 && mask.at(yy as usize, xx as usize) != v
            });
            if differs {
                transitions.push((y, x));
            }
        }
    }
    let reach = (thickness.max(1) as i64 + 1) / 2 - 1;
    let mut out = Grid::zeros(h, w);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let nearest = transitions
                .iter()
                .map(|&(ty, tx)| (ty - y).abs().max((tx - x).abs()))
                .min();
            if nearest.is_some_and(|d| d <= reach) {
                out.set(y as usize, x as usize, 1);
            }
        }
    }
    out
}

/// Metrics recomputed pixel by pixel without a confusion matrix.
pub struct MetricOracle {
    pub iou: Vec<Option<f64>>,
    pub miou_with_bg: f64,
    pub miou_fg_only: f64,
    pub acc: f64,
    pub mae: f64,
    pub mber: f64,
    pub f_beta: f64,
}

pub fn metric_oracle(pred: &Grid, gt: &Grid, fg_prob: &[f64], n: usize, beta2: f64) -> MetricOracle {
    let px = pred.data.len();
    let mut iou = Vec::new();
    let mut bers = Vec::new();
    for c in 0..n as u8 {
        let (mut inter, mut union, mut pos, mut neg, mut tpos, mut tneg) = (0, 0, 0, 0, 0, 0);
        for i in 0..px {
            let (p, g) = (pred.data[i] == c, gt.data[i] == c);
            if p && g {
                inter += 1;
            }
            if p || g {
                union += 1;
            }
            if g {
                pos += 1;
                if p {
                    tpos += 1;
                }
            } else {
                neg += 1;
                if !p {
                    tneg += 1;
                }
            }
        }
        if union == 0 {
            iou.push(None);
            continue;
        }
        iou.push(Some(inter as f64 / union as f64));
        if c > 0 {
            let tpr = if pos == 0 { 1.0 } else { tpos as f64 / pos as f64 };
            let tnr = if neg == 0 { 1.0 } else { tneg as f64 / neg as f64 };
            bers.push(100.0 * (1.0 - 0.5 * (tpr + tnr)));
        }
    }
    let avg = |v: Vec<f64>| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let correct = (0..px).filter(|&i| pred.data[i] == gt.data[i]).count();
    let mae = (0..px)
        .map(|i| (fg_prob[i] - if gt.data[i] > 0 { 1.0 } else { 0.0 }).abs())
        .sum::<f64>()
        / px as f64;
    let (mut tp, mut pp, mut gp) = (0, 0, 0);
    for i in 0..px {
        let (p, g) = (pred.data[i] > 0, gt.data[i] > 0);
        tp += (p && g) as usize;
        pp += p as usize;
        gp += g as usize;
    }
    let precision = if pp == 0 { 1.0 } else { tp as f64 / pp as f64 };
    let recall = if gp == 0 { 1.0 } else { tp as f64 / gp as f64 };
    let den = beta2 * precision + recall;
    MetricOracle {
        miou_with_bg: avg(iou.iter().flatten().copied().collect()),
        miou_fg_only: avg(iou.iter().skip(1).flatten().copied().collect()),
        iou,
        acc: correct as f64 / px as f64,
        mae,
        mber: avg(bers),
        f_beta: if den == 0.0 { 0.0 } else { (1.0 + beta2) * precision * recall / den },
    }
}

pub fn confusion(pred: &Grid, gt: &Grid, n: usize) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::new(n);
    cm.accumulate(pred, gt).unwrap();
    cm
}
