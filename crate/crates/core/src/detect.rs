//! Windowed theft verdicts, majority ensembling, ROC threshold tuning and
//! evaluation metrics. Theft is the positive class throughout.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::format_real;
use crate::reconstruct::ErrorSeries;
use crate::windowing::seconds_to_samples;

pub const DEFAULT_DETECTION_WINDOW_S: f64 = 32.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    pub detection_window_s: f64,
    pub sample_period_s: f64,
    pub threshold: f64,
    detection_len: usize,
}

impl DetectionConfig {
    pub fn new(detection_window_s: f64, sample_period_s: f64, threshold: f64) -> Result<Self> {
        if !(detection_window_s.is_finite() && detection_window_s > 0.0) {
            return Err(Error::Config(format!(
                "detection window must be positive, got {detection_window_s}"
            )));
        }
        if !(sample_period_s.is_finite() && sample_period_s > 0.0) {
            return Err(Error::Config(format!(
                "sample period must be positive, got {sample_period_s}"
            )));
        }
        if !(threshold.is_finite() && threshold >= 0.0) {
            return Err(Error::Config(format!("threshold must be nonnegative, got {threshold}")));
        }
        let detection_len = seconds_to_samples(detection_window_s, sample_period_s);
        if detection_len < 1 {
            return Err(Error::Config(format!(
                "detection window of {detection_window_s} s is shorter than one sample"
            )));
        }
        Ok(Self {
            detection_window_s,
            sample_period_s,
            threshold,
            detection_len,
        })
    }

    pub fn detection_len(&self) -> usize {
        self.detection_len
    }

    pub fn with_threshold(self, threshold: f64) -> Result<Self> {
        Self::new(self.detection_window_s, self.sample_period_s, threshold)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub window_start: usize,
    pub representative_error: f64,
    pub is_theft: bool,
}

/// Mean error of each consecutive, non-overlapping detection window. A
/// trailing partial window is dropped.
pub fn representative_errors(errors: &[f64], detection_len: usize) -> Result<Vec<(usize, f64)>> {
    if detection_len == 0 {
        return Err(Error::Config("detection window must span at least one sample".into()));
    }
    if errors.len() < detection_len {
        return Err(Error::TooShort {
            len: errors.len(),
            required: detection_len,
        });
    }
    Ok(errors
        .chunks_exact(detection_len)
        .enumerate()
        .map(|(i, w)| (i * detection_len, w.iter().sum::<f64>() / detection_len as f64))
        .collect())
}

/// Flags each detection window whose mean error is strictly above the
/// threshold.
pub fn windows_verdicts(err: &ErrorSeries, cfg: &DetectionConfig) -> Result<Vec<Verdict>> {
    Ok(representative_errors(&err.errors, cfg.detection_len())?
        .into_iter()
        .map(|(window_start, e)| Verdict {
            window_start,
            representative_error: e,
            is_theft: e > cfg.threshold,
        })
        .collect())
}

/// Per-window majority over aligned model verdicts. A window is theft when
/// more than half of the models say so (3 of 5). The representative error of
/// an ensemble verdict is its theft vote count.
pub fn ensemble_vote(models: &[Vec<Verdict>]) -> Result<Vec<Verdict>> {
    let Some(first) = models.first() else {
        return Err(Error::Misaligned("no model verdicts to combine".into()));
    };
    for (m, list) in models.iter().enumerate() {
        if list.len() != first.len() {
            return Err(Error::Misaligned(format!(
                "model {m} has {} windows, model 0 has {}",
                list.len(),
                first.len()
            )));
        }
        if let Some((i, _)) = list
            .iter()
            .zip(first)
            .enumerate()
            .find(|(_, (a, b))| a.window_start != b.window_start)
        {
            return Err(Error::Misaligned(format!("model {m} window {i} starts elsewhere")));
        }
    }
    Ok((0..first.len())
        .map(|i| {
            let votes = models.iter().filter(|m| m[i].is_theft).count();
            Verdict {
                window_start: first[i].window_start,
                representative_error: votes as f64,
                is_theft: 2 * votes > models.len(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Sorted by ascending threshold.
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Midpoints between consecutive distinct errors plus one sentinel below the
/// minimum and one above the maximum.
pub fn threshold_grid(errors: &[f64]) -> Vec<f64> {
    let mut sorted: Vec<f64> = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let (Some(&lo), Some(&hi)) = (sorted.first(), sorted.last()) else {
        return Vec::new();
    };
    let mut grid = Vec::with_capacity(sorted.len() + 1);
    grid.push(lo - 1.0);
    grid.extend(sorted.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    grid.push(hi + 1.0);
    grid
}

/// True and false positive rates at each threshold under the strict-greater
/// rule, with the area under the curve by trapezoids over ascending FPR. The
/// curve is anchored at (0, 0) and (1, 1).
pub fn roc_sweep(labeled: &[(f64, bool)], thresholds: &[f64]) -> Result<RocCurve> {
    let positives = labeled.iter().filter(|(_, y)| *y).count();
    let negatives = labeled.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::DegenerateLabels);
    }
    if thresholds.is_empty() {
        return Err(Error::Config("ROC sweep needs at least one threshold".into()));
    }
    let mut thresholds = thresholds.to_vec();
    thresholds.sort_by(f64::total_cmp);

    // Sort scores once; count how many of each class are strictly above t.
    let mut pos: Vec<f64> = labeled.iter().filter(|(_, y)| *y).map(|(e, _)| *e).collect();
    let mut neg: Vec<f64> = labeled.iter().filter(|(_, y)| !*y).map(|(e, _)| *e).collect();
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let above = |sorted: &[f64], t: f64| sorted.len() - sorted.partition_point(|e| *e <= t);

    let points: Vec<RocPoint> = thresholds
        .iter()
        .map(|&t| RocPoint {
            threshold: t,
            tpr: above(&pos, t) as f64 / positives as f64,
            fpr: above(&neg, t) as f64 / negatives as f64,
        })
        .collect();

    let mut xy: Vec<(f64, f64)> = points.iter().map(|p| (p.fpr, p.tpr)).collect();
    xy.push((0.0, 0.0));
    xy.push((1.0, 1.0));
    xy.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let auc = xy.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum();
    Ok(RocCurve { points, auc })
}

/// Threshold maximizing Youden's J = TPR − FPR; ties go to the larger
/// threshold.
pub fn optimize_threshold(curve: &RocCurve) -> f64 {
    let mut best: Option<(f64, f64)> = None;
    for p in &curve.points {
        let j = p.tpr - p.fpr;
        best = match best {
            Some((bj, bt)) if j < bj || (j == bj && p.threshold <= bt) => Some((bj, bt)),
            _ => Some((j, p.threshold)),
        };
    }
    best.map(|(_, t)| t).expect("ROC curve has at least one point")
}

pub fn write_roc_csv<W: Write>(mut out: W, curve: &RocCurve) -> std::io::Result<()> {
    writeln!(out, "threshold,tpr,fpr")?;
    for p in &curve.points {
        writeln!(out, "{},{},{}", format_real(p.threshold), format_real(p.tpr), format_real(p.fpr))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: f64,
    /// Zero when nothing was predicted positive (see `precision_defined`).
    pub precision: f64,
    /// Zero when there are no positives (see `recall_defined`).
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision_defined: bool,
    pub recall_defined: bool,
}

impl MetricSet {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let total = tp + fp + tn + fn_;
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        // Harmonic mean of precision and recall, computed from the counts so
        // it is exact.
        let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
        Self {
            accuracy: ratio(tp + tn, total),
            precision,
            recall,
            f1,
            tp,
            fp,
            tn,
            fn_,
            precision_defined: tp + fp > 0,
            recall_defined: tp + fn_ > 0,
        }
    }
}

pub fn compute_metrics(predictions: &[bool], labels: &[bool]) -> Result<MetricSet> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: labels.len(),
            actual: predictions.len(),
        });
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(MetricSet::from_counts(tp, fp, tn, fn_))
}

/// Verdicts of one trip under one single-feature model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub feature: String,
    pub threshold: f64,
    pub verdicts: Vec<Verdict>,
    pub metrics: Option<MetricSet>,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub rule: String,
    pub verdicts: Vec<Verdict>,
    pub metrics: Option<MetricSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub trip_id: String,
    pub detection_window_s: f64,
    pub detection_len: usize,
    pub models: Vec<ModelReport>,
    pub ensemble: EnsembleReport,
    /// Ground-truth window labels when known.
    pub labels: Option<Vec<bool>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn errs(v: &[f64]) -> ErrorSeries {
        ErrorSeries {
            feature: "f".into(),
            errors: v.to_vec(),
        }
    }

    fn v(t: bool) -> Verdict {
        Verdict {
            window_start: 0,
            representative_error: 0.0,
            is_theft: t,
        }
    }

    #[test]
    fn zero_errors_are_owner() {
        let cfg = DetectionConfig::new(32.0, 1.0, 6.0).unwrap();
        let out = windows_verdicts(&errs(&[0.0; 100]), &cfg).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|v| !v.is_theft));
        assert_eq!(out.iter().map(|v| v.window_start).collect::<Vec<_>>(), [0, 32, 64]);
    }

    #[test]
    fn mean_error_above_oil_temperature_threshold_is_theft() {
        let cfg = DetectionConfig::new(32.0, 1.0, 6.0).unwrap();
        let out = windows_verdicts(&errs(&[10.0; 32]), &cfg).unwrap();
        assert!(out[0].is_theft);
        assert_eq!(out[0].representative_error, 10.0);
    }

    #[test]
    fn mean_equal_to_threshold_is_owner() {
        let cfg = DetectionConfig::new(4.0, 1.0, 2.0).unwrap();
        let out = windows_verdicts(&errs(&[1.0, 3.0, 2.0, 2.0]), &cfg).unwrap();
        assert_eq!(out[0].representative_error, 2.0);
        assert!(!out[0].is_theft);
    }

    #[test]
    fn short_error_series_rejected() {
        let cfg = DetectionConfig::new(32.0, 1.0, 6.0).unwrap();
        assert!(matches!(windows_verdicts(&errs(&[0.0; 31]), &cfg), Err(Error::TooShort { .. })));
        assert!(DetectionConfig::new(32.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn majority_votes() {
        let vote = |p: [bool; 5]| ensemble_vote(&p.map(|t| vec![v(t)])).unwrap()[0];
        assert!(vote([true, true, true, false, false]).is_theft);
        assert!(!vote([true, true, false, false, false]).is_theft);
        let all = vote([true; 5]);
        assert!(all.is_theft);
        assert_eq!(all.representative_error, 5.0);
    }

    #[test]
    fn misaligned_lists_rejected() {
        let a = vec![v(true), v(false)];
        let b = vec![v(true)];
        assert!(ensemble_vote(&[a.clone(), b]).is_err());
        let mut c = a.clone();
        c[1].window_start = 5;
        assert!(ensemble_vote(&[a, c]).is_err());
        assert!(ensemble_vote(&[]).is_err());
    }

    #[test]
    fn perfect_separation_auc_one() {
        let data = [(1.0, false), (2.0, false), (3.0, true), (4.0, true)];
        let curve = roc_sweep(&data, &threshold_grid(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(curve.auc, 1.0);
    }

    #[test]
    fn uninformative_scores_auc_half() {
        let data = [(1.0, false), (1.0, true), (1.0, false), (1.0, true)];
        let curve = roc_sweep(&data, &threshold_grid(&[1.0])).unwrap();
        assert_eq!(curve.auc, 0.5);
        // flat curve: J = 0 everywhere, largest threshold wins
        assert_eq!(optimize_threshold(&curve), 2.0);
    }

    #[test]
    fn toy_set_matches_exhaustive_counts() {
        let data = [(1.0, false), (2.0, false), (3.0, true), (4.0, true)];
        let ts = [0.5, 1.5, 2.5, 3.5, 4.5];
        let curve = roc_sweep(&data, &ts).unwrap();
        for p in &curve.points {
            let tp = data.iter().filter(|(e, y)| *y && *e > p.threshold).count();
            let fp = data.iter().filter(|(e, y)| !*y && *e > p.threshold).count();
            assert_eq!(p.tpr, tp as f64 / 2.0);
            assert_eq!(p.fpr, fp as f64 / 2.0);
        }
        let tpr: Vec<f64> = curve.points.iter().map(|p| p.tpr).collect();
        let fpr: Vec<f64> = curve.points.iter().map(|p| p.fpr).collect();
        assert_eq!(tpr, [1.0, 1.0, 1.0, 0.5, 0.0]);
        assert_eq!(fpr, [1.0, 0.5, 0.0, 0.0, 0.0]);
        assert_eq!(optimize_threshold(&curve), 2.5);
    }

    #[test]
    fn single_candidate_threshold() {
        let curve = roc_sweep(&[(1.0, false), (3.0, true)], &[7.0]).unwrap();
        assert_eq!(optimize_threshold(&curve), 7.0);
    }

    #[test]
    fn single_class_is_degenerate() {
        assert!(matches!(roc_sweep(&[(1.0, true)], &[0.0]), Err(Error::DegenerateLabels)));
    }

    #[test]
    fn metric_arithmetic() {
        let m = MetricSet::from_counts(2, 1, 6, 1);
        assert_eq!(m.accuracy, 0.8);
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        let p = [true, false, true];
        let all = compute_metrics(&p, &p).unwrap();
        assert_eq!((all.accuracy, all.precision, all.recall, all.f1), (1.0, 1.0, 1.0, 1.0));
        assert!(compute_metrics(&p, &p[..2]).is_err());
    }

    #[test]
    fn undefined_ratios_are_flagged() {
        let m = compute_metrics(&[false, false], &[false, false]).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert!(!m.precision_defined && !m.recall_defined);
    }
}
