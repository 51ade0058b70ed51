//! Overlap metrics and threshold-sweep ROC analysis.
//!
//! For a prediction `p` and ground truth `g` (both binary):
//!
//! - DSC = 2·Σpg / Σ(p + g)
//! - sensitivity = Σpg / Σg
//! - IoU = Σpg / (Σ(p + g) − Σpg)
//!
//! Both-empty DSC and IoU are 1.0. ROC points are `(fpr, tpr)` pairs from
//! thresholds evenly spaced over `[0, 1]`, with a voxel counted positive
//! when its probability is `>=` the threshold.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

pub const DEFAULT_N_THRESHOLDS: usize = 101;

/// Counts shared by all overlap metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Overlap {
    pub intersection: u64,
    pub pred: u64,
    pub truth: u64,
}

fn as_bit(v: f32, what: &str) -> Result<bool> {
    if v == 1.0 {
        Ok(true)
    } else if v == 0.0 {
        Ok(false)
    } else {
        Err(Error::InvalidValue(format!("{what} value {v} is not binary")))
    }
}

impl Overlap {
    pub fn count(pred: &[f32], truth: &[f32]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::Shape(format!(
                "prediction has {} voxels, ground truth {}",
                pred.len(),
                truth.len()
            )));
        }
        let mut o = Overlap::default();
        for (&p, &t) in pred.iter().zip(truth) {
            let (p, t) = (as_bit(p, "prediction")?, as_bit(t, "ground truth")?);
            o.pred += p as u64;
            o.truth += t as u64;
            o.intersection += (p && t) as u64;
        }
        Ok(o)
    }

    pub fn dsc(&self) -> f64 {
        let denom = self.pred + self.truth;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / denom as f64
        }
    }

    /// Recall. When the ground truth is empty the value is 1.0 for an empty
    /// prediction and 0.0 otherwise; see [`Overlap::sensitivity_defined`].
    pub fn sensitivity(&self) -> f64 {
        if self.truth == 0 {
            if self.pred == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            self.intersection as f64 / self.truth as f64
        }
    }

    pub fn sensitivity_defined(&self) -> bool {
        self.truth > 0
    }

    pub fn iou(&self) -> f64 {
        let union = self.pred + self.truth - self.intersection;
        if union == 0 {
            1.0
        } else {
            self.intersection as f64 / union as f64
        }
    }
}

pub fn dsc(pred: &[f32], truth: &[f32]) -> Result<f64> {
    Ok(Overlap::count(pred, truth)?.dsc())
}

pub fn sensitivity(pred: &[f32], truth: &[f32]) -> Result<f64> {
    Ok(Overlap::count(pred, truth)?.sensitivity())
}

pub fn iou(pred: &[f32], truth: &[f32]) -> Result<f64> {
    Ok(Overlap::count(pred, truth)?.iou())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

/// `i / (n - 1)` for `i in 0..n`.
pub fn thresholds(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

/// ROC curve from `n_thresholds` evenly spaced thresholds, sorted by fpr
/// (then tpr), deduplicated, with `(0, 0)` and `(1, 1)` present.
pub fn roc_curve(prob: &[f32], truth: &[f32], n_thresholds: usize) -> Result<Vec<RocPoint>> {
    if prob.len() != truth.len() {
        return Err(Error::Shape(format!(
            "probabilities have {} voxels, ground truth {}",
            prob.len(),
            truth.len()
        )));
    }
    if n_thresholds < 2 {
        return Err(Error::InvalidValue(format!(
            "ROC needs at least 2 thresholds, got {n_thresholds}"
        )));
    }
    let ts = thresholds(n_thresholds);
    let last = n_thresholds - 1;
    // hist[k] counts voxels whose highest passed threshold is ts[k].
    let mut pos_hist = vec![0u64; n_thresholds];
    let mut neg_hist = vec![0u64; n_thresholds];
    for (&p, &t) in prob.iter().zip(truth) {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidValue(format!("probability {p} outside [0, 1]")));
        }
        let p = p as f64;
        let mut k = ((p * last as f64).floor() as usize).min(last);
        while k < last && p >= ts[k + 1] {
            k += 1;
        }
        while k > 0 && p < ts[k] {
            k -= 1;
        }
        if as_bit(t, "ground truth")? {
            pos_hist[k] += 1;
        } else {
            neg_hist[k] += 1;
        }
    }
    let positives: u64 = pos_hist.iter().sum();
    let negatives: u64 = neg_hist.iter().sum();
    if positives == 0 || negatives == 0 {
        return Err(Error::InvalidValue(
            "ROC is undefined unless the ground truth has both classes".into(),
        ));
    }
    let mut points = Vec::with_capacity(n_thresholds + 2);
    let (mut tp, mut fp) = (0u64, 0u64);
    for k in (0..n_thresholds).rev() {
        tp += pos_hist[k];
        fp += neg_hist[k];
        points.push(RocPoint {
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
        });
    }
    points.push(RocPoint { fpr: 0.0, tpr: 0.0 });
    points.push(RocPoint { fpr: 1.0, tpr: 1.0 });
    sort_points(&mut points);
    points.dedup();
    Ok(points)
}

fn sort_points(points: &mut [RocPoint]) {
    points.sort_by(|a, b| a.fpr.total_cmp(&b.fpr).then(a.tpr.total_cmp(&b.tpr)));
}

/// Trapezoidal area under an ROC curve.
pub fn auc(points: &[RocPoint]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::InvalidValue(format!(
            "AUC needs at least 2 ROC points, got {}",
            points.len()
        )));
    }
    if let Some(p) = points
        .iter()
        .find(|p| !(0.0..=1.0).contains(&p.fpr) || !(0.0..=1.0).contains(&p.tpr))
    {
        return Err(Error::InvalidValue(format!("ROC point {p:?} outside the unit square")));
    }
    let mut sorted = points.to_vec();
    sort_points(&mut sorted);
    let area = sorted
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum::<f64>();
    Ok(area.clamp(0.0, 1.0))
}

/// Point metrics and ROC analysis for one prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dsc: f64,
    pub sensitivity: f64,
    pub iou: f64,
    /// Set when the ground truth is empty and sensitivity fell back to a convention.
    pub sensitivity_undefined: bool,
    pub threshold: f64,
    pub n_thresholds: usize,
    pub auc: f64,
    pub roc: Vec<RocPoint>,
}

/// Scores a probability volume against a binary ground truth: point metrics
/// after thresholding at `threshold`, ROC/AUC over `n_thresholds`.
pub fn evaluate(prob: &Volume, truth: &Volume, threshold: f64, n_thresholds: usize) -> Result<MetricReport> {
    if prob.dims() != truth.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} and ground truth {:?} differ in dims",
            prob.dims(),
            truth.dims()
        )));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidValue(format!("threshold {threshold} outside [0, 1]")));
    }
    let mask: Vec<f32> = prob
        .data()
        .iter()
        .map(|&p| if p as f64 >= threshold { 1.0 } else { 0.0 })
        .collect();
    let overlap = Overlap::count(&mask, truth.data())?;
    let roc = roc_curve(prob.data(), truth.data(), n_thresholds)?;
    Ok(MetricReport {
        dsc: overlap.dsc(),
        sensitivity: overlap.sensitivity(),
        iou: overlap.iou(),
        sensitivity_undefined: !overlap.sensitivity_defined(),
        threshold,
        n_thresholds,
        auc: auc(&roc)?,
        roc,
    })
}

/// Mean of per-volume metrics for one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub model: String,
    pub n_volumes: usize,
    pub dsc: f64,
    pub sensitivity: f64,
    pub iou: f64,
    pub auc: f64,
}

pub fn aggregate(model: &str, reports: &[MetricReport]) -> Result<AggregateRow> {
    if reports.is_empty() {
        return Err(Error::Precondition(format!("no reports to aggregate for {model}")));
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(AggregateRow {
        model: model.to_string(),
        n_volumes: reports.len(),
        dsc: mean(|r| r.dsc),
        sensitivity: mean(|r| r.sensitivity),
        iou: mean(|r| r.iou),
        auc: mean(|r| r.auc),
    })
}

/// Renders rows as a fixed-width table (DSC, sensitivity and IoU in percent).
pub fn format_table(rows: &[AggregateRow]) -> String {
    let mut out = format!(
        "{:<12} {:>8} {:>12} {:>8} {:>7}\n",
        "model", "DSC", "Sensitivity", "IoU", "AUC"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<12} {:>7.1}% {:>11.1}% {:>7.1}% {:>7.3}",
            r.model,
            100.0 * r.dsc,
            100.0 * r.sensitivity,
            100.0 * r.iou,
            r.auc
        );
    }
    out
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("fpr,tpr\n");
    for p in points {
        let _ = writeln!(out, "{},{}", p.fpr, p.tpr);
    }
    out
}

pub fn write_roc_csv(points: &[RocPoint], path: &Path) -> Result<()> {
    fs::write(path, roc_csv(points)).map_err(|e| Error::io(path, e))
}
