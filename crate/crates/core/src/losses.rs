//! Joint supervision: cross entropy on the final and per-stage semantic
//! logits, Dice on the per-stage boundary probabilities.
//!
//! `total = L_s_out + λ_s·Σ_i L_s_i + λ_b·Σ_i L_b_i`

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::config::LossConfig;
use crate::error::{Error, Result};
use crate::network::NetworkOutput;
use crate::synthdata::Grid;
use crate::tensor::Real;

/// Checks class ids and flattens a batch of masks to `B·H·W` targets.
pub fn class_targets(masks: &[&Grid], n_classes: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(masks.iter().map(|m| m.data.len()).sum());
    for m in masks {
        for &v in &m.data {
            if v as usize >= n_classes {
                return Err(Error::Data(format!(
                    "mask contains class id {v} but the model predicts {n_classes} classes"
                )));
            }
            out.push(v as usize);
        }
    }
    Ok(out)
}

/// Mean pixel cross entropy of `(B, n, H, W)` logits against `masks`.
pub fn cross_entropy<'t, T: Real>(logits: Var<'t, T>, masks: &[&Grid]) -> Result<Var<'t, T>> {
    let s = logits.shape();
    check_targets(&s, masks)?;
    let t = class_targets(masks, s[1])?;
    Ok(logits.cross_entropy(Rc::new(t)))
}

/// Squared-denominator Dice loss of `(B, 1, H, W)` probabilities, batch mean.
pub fn dice_loss<'t, T: Real>(pred: Var<'t, T>, targets: &[&Grid], smooth: f64) -> Result<Var<'t, T>> {
    let s = pred.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::Shape(format!("dice expects (B, 1, H, W) probabilities, got {s:?}")));
    }
    check_targets(&s, targets)?;
    let t: Vec<T> = targets
        .iter()
        .flat_map(|g| g.data.iter().map(|&v| if v > 0 { T::one() } else { T::zero() }))
        .collect();
    Ok(pred.dice_loss(Rc::new(t), smooth))
}

fn check_targets(shape: &[usize], targets: &[&Grid]) -> Result<()> {
    if shape.len() != 4 || shape[0] != targets.len() {
        return Err(Error::Shape(format!(
            "prediction {shape:?} does not match a batch of {} targets",
            targets.len()
        )));
    }
    for g in targets {
        if (g.height, g.width) != (shape[2], shape[3]) {
            return Err(Error::Shape(format!(
                "target is {}x{} but prediction is {}x{}",
                g.height, g.width, shape[2], shape[3]
            )));
        }
    }
    Ok(())
}

/// Nearest-neighbour downsampling: output `(y, x)` reads `(⌊y·H/h⌋, ⌊x·W/w⌋)`.
pub fn downsample_nearest(g: &Grid, h: usize, w: usize) -> Grid {
    if (g.height, g.width) == (h, w) {
        return g.clone();
    }
    let mut out = Grid::zeros(h, w);
    for y in 0..h {
        let sy = y * g.height / h;
        for x in 0..w {
            out.set(y, x, g.at(sy, x * g.width / w));
        }
    }
    out
}

/// Max-pool downsampling over the source cells that map onto each output cell.
pub fn downsample_max(g: &Grid, h: usize, w: usize) -> Grid {
    if (g.height, g.width) == (h, w) {
        return g.clone();
    }
    let span = |i: usize, src: usize, dst: usize| {
        let lo = i * src / dst;
        let hi = ((i + 1) * src / dst).max(lo + 1);
        lo..hi
    };
    let mut out = Grid::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut m = 0;
            for sy in span(y, g.height, h) {
                for sx in span(x, g.width, w) {
                    m = m.max(g.at(sy, sx));
                }
            }
            out.set(y, x, m);
        }
    }
    out
}

/// Scalar loss terms of one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub l_s_out: f64,
    /// Stage indices the per-stage lists refer to, ascending.
    pub stages: Vec<usize>,
    pub l_s: Vec<f64>,
    pub l_b: Vec<f64>,
    pub lambda_s: f64,
    pub lambda_b: f64,
}

/// Stage indices that appear as columns of the training log.
pub const LOG_STAGES: [usize; 4] = [1, 2, 3, 4];

impl LossReport {
    /// `L_s_out + λ_s·ΣL_s_i + λ_b·ΣL_b_i` from the stored components.
    pub fn recombine(&self) -> f64 {
        self.l_s_out + self.lambda_s * self.l_s.iter().sum::<f64>() + self.lambda_b * self.l_b.iter().sum::<f64>()
    }

    pub fn stage_terms(&self, stage: usize) -> Option<(f64, f64)> {
        let i = self.stages.iter().position(|&s| s == stage)?;
        Some((self.l_s[i], self.l_b[i]))
    }

    pub fn csv_header() -> String {
        let mut cols = vec!["iter".to_string(), "total".into(), "L_s_out".into()];
        cols.extend(LOG_STAGES.iter().map(|i| format!("L_s_{i}")));
        cols.extend(LOG_STAGES.iter().map(|i| format!("L_b_{i}")));
        cols.push("lr".into());
        cols.join(",")
    }

    /// One log row; stages absent from the model leave empty cells.
    pub fn csv_row(&self, iter: usize, lr: f64) -> String {
        let cell = |v: Option<f64>| v.map(|v| format!("{v:.9e}")).unwrap_or_default();
        let mut cols = vec![iter.to_string(), format!("{:.9e}", self.total), format!("{:.9e}", self.l_s_out)];
        cols.extend(LOG_STAGES.iter().map(|&i| cell(self.stage_terms(i).map(|t| t.0))));
        cols.extend(LOG_STAGES.iter().map(|&i| cell(self.stage_terms(i).map(|t| t.1))));
        cols.push(format!("{lr:.9e}"));
        cols.join(",")
    }
}

/// Logits of one supervised stage.
pub struct StageLogits<'t, T: Real> {
    pub index: usize,
    pub semantic: Var<'t, T>,
    pub boundary: Var<'t, T>,
}

pub struct JointLoss<'t, T: Real> {
    pub total: Var<'t, T>,
    pub report: LossReport,
}

/// Differentiable joint loss. Stage targets are downsampled to the stage
/// resolution; boundary logits pass through a sigmoid before Dice.
pub fn joint_loss<'t, T: Real>(
    final_logits: Var<'t, T>,
    stages: &[StageLogits<'t, T>],
    masks: &[&Grid],
    boundaries: &[&Grid],
    cfg: &LossConfig,
) -> Result<JointLoss<'t, T>> {
    if masks.len() != boundaries.len() {
        return Err(Error::Shape("mask and boundary batches differ in length".into()));
    }
    let l_out = cross_entropy(final_logits, masks)?;
    let mut terms = vec![(l_out, 1.0)];
    let mut sorted: Vec<&StageLogits<'t, T>> = stages.iter().collect();
    sorted.sort_by_key(|s| s.index);
    let (mut l_s, mut l_b, mut idx) = (Vec::new(), Vec::new(), Vec::new());
    for st in sorted {
        let sh = st.semantic.shape();
        let (h, w) = (sh[2], sh[3]);
        let m: Vec<Grid> = masks.iter().map(|g| downsample_nearest(g, h, w)).collect();
        let bnd: Vec<Grid> = boundaries.iter().map(|g| downsample_max(g, h, w)).collect();
        let ls = cross_entropy(st.semantic, &m.iter().collect::<Vec<_>>())?;
        let lb = dice_loss(st.boundary.sigmoid(), &bnd.iter().collect::<Vec<_>>(), cfg.dice_smooth)?;
        terms.push((ls, cfg.lambda_s));
        terms.push((lb, cfg.lambda_b));
        l_s.push(ls.value().data()[0].f64());
        l_b.push(lb.value().data()[0].f64());
        idx.push(st.index);
    }
    let total = Var::weighted_sum(&terms);
    let report = LossReport {
        total: total.value().data()[0].f64(),
        l_s_out: l_out.value().data()[0].f64(),
        stages: idx,
        l_s,
        l_b,
        lambda_s: cfg.lambda_s,
        lambda_b: cfg.lambda_b,
    };
    Ok(JointLoss { total, report })
}

/// Joint loss of a network output against a batch of samples' targets.
pub fn attach_supervision<'t, T: Real>(
    out: &NetworkOutput<'t, T>,
    masks: &[&Grid],
    boundaries: &[&Grid],
    cfg: &LossConfig,
) -> Result<JointLoss<'t, T>> {
    let ls = out.logits.shape();
    for g in masks {
        if (g.height, g.width) != (ls[2], ls[3]) {
            return Err(Error::Shape(format!(
                "sample is {}x{} but the network ran on {}x{}",
                g.height, g.width, ls[2], ls[3]
            )));
        }
    }
    let stages: Vec<StageLogits<'t, T>> = out
        .stages
        .iter()
        .map(|s| StageLogits {
            index: s.index,
            semantic: s.sem_logits,
            boundary: s.bnd_logits,
        })
        .collect();
    joint_loss(out.logits, &stages, masks, boundaries, cfg)
}
