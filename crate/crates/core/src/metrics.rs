//! Segmentation metrics: mIoU, pixel accuracy, mAE, mBER and F-beta.
//!
//! Conventions used where the literature is loose:
//! - a class absent from both prediction and ground truth is left out of the
//!   means rather than counted as a perfect (or undefined) score;
//! - a rate whose denominator is zero counts as 1;
//! - BER is reported in percent and averaged over the foreground classes;
//! - mAE is taken on the foreground probability `1 - P(background)`;
//! - F-beta uses the binarized foreground (any non-zero class).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::Grid;

/// `counts[gt * n + pred]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &Grid, gt: &Grid) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::Data(format!(
                "prediction is {}x{} but ground truth is {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            let (p, g) = (p as usize, g as usize);
            if p >= self.n || g >= self.n {
                return Err(Error::Data(format!(
                    "class id {} out of range for {} classes",
                    p.max(g),
                    self.n
                )));
            }
            self.counts[g * self.n + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::Data(format!("cannot merge {}-class and {}-class matrices", self.n, other.n)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `(tp, fp, fn)` of class `c` treated one-vs-rest.
    pub fn class_counts(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.get(c, c);
        let fp = (0..self.n).map(|g| self.get(g, c)).sum::<u64>() - tp;
        let fn_ = (0..self.n).map(|p| self.get(c, p)).sum::<u64>() - tp;
        (tp, fp, fn_)
    }

    /// IoU of class `c`, `None` when it appears in neither map.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let (tp, fp, fn_) = self.class_counts(c);
        let den = tp + fp + fn_;
        (den > 0).then(|| tp as f64 / den as f64)
    }
}

/// Running sums for the mean absolute error of the foreground probability.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbStats {
    pub abs_err_sum: f64,
    pub pixels: u64,
}

impl ProbStats {
    /// `fg_prob` is row-major over the ground-truth grid.
    pub fn accumulate(&mut self, fg_prob: &[f64], gt: &Grid) -> Result<()> {
        if fg_prob.len() != gt.data.len() {
            return Err(Error::Data(format!(
                "{} probabilities for a {}x{} ground truth",
                fg_prob.len(),
                gt.height,
                gt.width
            )));
        }
        for (&p, &g) in fg_prob.iter().zip(&gt.data) {
            let y = if g > 0 { 1.0 } else { 0.0 };
            self.abs_err_sum += (p - y).abs();
        }
        self.pixels += gt.data.len() as u64;
        Ok(())
    }

    pub fn merge(&mut self, other: &ProbStats) {
        self.abs_err_sum += other.abs_err_sum;
        self.pixels += other.pixels;
    }

    pub fn mae(&self) -> f64 {
        if self.pixels == 0 {
            0.0
        } else {
            self.abs_err_sum / self.pixels as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Same as `miou_with_bg`.
    pub miou: f64,
    pub miou_with_bg: f64,
    pub miou_fg_only: f64,
    pub acc: f64,
    pub mae: f64,
    pub mber: f64,
    pub f_beta: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub config_echo: BTreeMap<String, String>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Balance error rate of class `c` in percent, `None` when it appears in
/// neither map.
pub fn ber(cm: &ConfusionMatrix, c: usize) -> Option<f64> {
    let (tp, fp, fn_) = cm.class_counts(c);
    if tp + fp + fn_ == 0 {
        return None;
    }
    let tn = cm.total() - tp - fp - fn_;
    Some(100.0 * (1.0 - 0.5 * (ratio(tp, tp + fn_) + ratio(tn, tn + fp))))
}

/// F-beta of the binarized foreground.
pub fn f_beta(cm: &ConfusionMatrix, beta2: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for g in 0..cm.n {
        for p in 0..cm.n {
            let c = cm.get(g, p);
            match (g > 0, p > 0) {
                (true, true) => tp += c,
                (false, true) => fp += c,
                (true, false) => fn_ += c,
                _ => {}
            }
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let den = beta2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * precision * recall / den
    }
}

pub fn compute_report(
    cm: &ConfusionMatrix,
    probs: &ProbStats,
    beta2: f64,
    config_echo: BTreeMap<String, String>,
) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Data("no pixels were evaluated".into()));
    }
    let per_class_iou: Vec<Option<f64>> = (0..cm.n).map(|c| cm.iou(c)).collect();
    let miou_with_bg = mean(per_class_iou.iter().flatten().copied());
    let miou_fg_only = mean(per_class_iou.iter().skip(1).flatten().copied());
    let trace: u64 = (0..cm.n).map(|c| cm.get(c, c)).sum();
    Ok(MetricsReport {
        miou: miou_with_bg,
        miou_with_bg,
        miou_fg_only,
        acc: trace as f64 / total as f64,
        mae: probs.mae(),
        mber: mean((1..cm.n).filter_map(|c| ber(cm, c))),
        f_beta: f_beta(cm, beta2),
        per_class_iou,
        config_echo,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn csv_header(&self) -> String {
        let mut cols: Vec<String> = ["miou", "miou_with_bg", "miou_fg_only", "acc", "mae", "mber", "f_beta"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        cols.extend((0..self.per_class_iou.len()).map(|c| format!("iou_{c}")));
        cols.extend(self.config_echo.keys().cloned());
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols: Vec<String> = [
            self.miou,
            self.miou_with_bg,
            self.miou_fg_only,
            self.acc,
            self.mae,
            self.mber,
            self.f_beta,
        ]
        .iter()
        .map(|v| format!("{v:.10}"))
        .collect();
        cols.extend(
            self.per_class_iou
                .iter()
                .map(|v| v.map(|v| format!("{v:.10}")).unwrap_or_default()),
        );
        cols.extend(self.config_echo.values().cloned());
        cols.join(",")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_matrix() {
        let gt = Grid::from_vec(2, 2, vec![0, 1, 1, 2]);
        let pred = Grid::from_vec(2, 2, vec![0, 1, 2, 2]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&pred, &gt).unwrap();
        assert_eq!(cm.counts, vec![1, 0, 0, 0, 1, 1, 0, 0, 1]);
    }

    #[test]
    fn absent_class_is_excluded() {
        let gt = Grid::from_vec(1, 2, vec![0, 1]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&gt, &gt).unwrap();
        let r = compute_report(&cm, &ProbStats::default(), 0.3, BTreeMap::new()).unwrap();
        assert_eq!(r.per_class_iou, vec![Some(1.0), Some(1.0), None]);
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.mber, 0.0);
    }

    #[test]
    fn mismatched_dims_are_data_errors() {
        let mut cm = ConfusionMatrix::new(2);
        let err = cm.accumulate(&Grid::zeros(2, 2), &Grid::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }
}
