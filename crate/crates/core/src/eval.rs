//! Ranking and classification metrics with exact tie handling.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::path::Path;

/// Default decision threshold on the fraud-class probability.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub ap: f64,
    pub macro_f1: f64,
    pub threshold: f64,
    /// Set when `threshold` came from a sweep instead of the default.
    #[serde(default)]
    pub threshold_swept: bool,
    pub n: usize,
    pub n_positive: usize,
    /// `(fpr, tpr)` pairs from `(0,0)` to `(1,1)`.
    pub roc_points: Vec<(f64, f64)>,
    /// `(recall, precision)` pairs, one per distinct score.
    pub pr_points: Vec<(f64, f64)>,
}

fn validate<T: Scalar>(scores: &[T], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric("non-finite score".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Metric("labels must be 0 or 1".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

fn both_classes(pos: usize, neg: usize) -> Result<()> {
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(format!(
            "both classes required ({pos} positive, {neg} negative)"
        )));
    }
    Ok(())
}

/// Indices sorted by descending score; ties keep index order.
fn descending<T: Scalar>(scores: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    idx
}

/// Cumulative `(tp, fp)` after each group of tied scores, in descending order.
fn tie_groups<T: Scalar>(scores: &[T], labels: &[u8]) -> Vec<(T, usize, usize)> {
    let order = descending(scores);
    let mut out: Vec<(T, usize, usize)> = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (k, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = order.get(k + 1).is_none_or(|&j| scores[j] != scores[i]);
        if last_of_group {
            out.push((scores[i], tp, fp));
        }
    }
    out
}

/// Probability that a random positive outranks a random negative, ties counting ½.
pub fn auc<T: Scalar>(scores: &[T], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = validate(scores, labels)?;
    both_classes(pos, neg)?;
    // midranks over ascending scores
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && scores[idx[end]] == scores[idx[start]] {
            end += 1;
        }
        let midrank = (start + 1 + end) as f64 / 2.0;
        let pos_in_group = idx[start..end].iter().filter(|&&i| labels[i] == 1).count();
        rank_sum_pos += midrank * pos_in_group as f64;
        start = end;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Step-wise average precision `Σ (R_k - R_{k-1}) P_k` over descending thresholds.
pub fn average_precision<T: Scalar>(scores: &[T], labels: &[u8]) -> Result<f64> {
    let (pos, _) = validate(scores, labels)?;
    if pos == 0 {
        return Err(Error::Metric("average precision needs a positive sample".into()));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (_, tp, fp) in tie_groups(scores, labels) {
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Unweighted mean of per-class F1 when predicting fraud for `score >= threshold`.
pub fn macro_f1<T: Scalar>(scores: &[T], labels: &[u8], threshold: f64) -> Result<f64> {
    let (pos, neg) = validate(scores, labels)?;
    both_classes(pos, neg)?;
    let t = T::of(threshold);
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= t, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok((f1(tp, fp, fn_) + f1(tn, fn_, fp)) / 2.0)
}

/// Threshold (among observed scores) maximising macro-F1. Not the default protocol.
pub fn best_f1_threshold<T: Scalar>(scores: &[T], labels: &[u8]) -> Result<(f64, f64)> {
    let (pos, neg) = validate(scores, labels)?;
    both_classes(pos, neg)?;
    let mut best = (DEFAULT_THRESHOLD, f64::NEG_INFINITY);
    for (s, _, _) in tie_groups(scores, labels) {
        let t = s.to_f64_lossy();
        let f = macro_f1(scores, labels, t)?;
        if f > best.1 {
            best = (t, f);
        }
    }
    Ok(best)
}

pub fn roc_points<T: Scalar>(scores: &[T], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = validate(scores, labels)?;
    both_classes(pos, neg)?;
    let mut pts = vec![(0.0, 0.0)];
    pts.extend(
        tie_groups(scores, labels)
            .into_iter()
            .map(|(_, tp, fp)| (fp as f64 / neg as f64, tp as f64 / pos as f64)),
    );
    Ok(pts)
}

pub fn pr_points<T: Scalar>(scores: &[T], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    let (pos, _) = validate(scores, labels)?;
    if pos == 0 {
        return Err(Error::Metric("precision-recall curve needs a positive sample".into()));
    }
    Ok(tie_groups(scores, labels)
        .into_iter()
        .map(|(_, tp, fp)| (tp as f64 / pos as f64, tp as f64 / (tp + fp) as f64))
        .collect())
}

/// All metrics at the default threshold, or at the best swept one when `sweep` is set.
pub fn evaluate<T: Scalar>(scores: &[T], labels: &[u8], sweep: bool) -> Result<MetricsReport> {
    let (pos, _) = validate(scores, labels)?;
    let (threshold, macro_f1) = if sweep {
        best_f1_threshold(scores, labels)?
    } else {
        (DEFAULT_THRESHOLD, macro_f1(scores, labels, DEFAULT_THRESHOLD)?)
    };
    Ok(MetricsReport {
        auc: auc(scores, labels)?,
        ap: average_precision(scores, labels)?,
        macro_f1,
        threshold,
        threshold_swept: sweep,
        n: scores.len(),
        n_positive: pos,
        roc_points: roc_points(scores, labels)?,
        pr_points: pr_points(scores, labels)?,
    })
}

impl MetricsReport {
    /// Writes `metrics.json`, `roc.csv` (fpr,tpr) and `pr.csv` (recall,precision) into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(self)?)?;
        let mut roc = csv::Writer::from_path(dir.join("roc.csv"))?;
        roc.write_record(["fpr", "tpr"])?;
        for (x, y) in &self.roc_points {
            roc.write_record([x.to_string(), y.to_string()])?;
        }
        roc.flush()?;
        let mut pr = csv::Writer::from_path(dir.join("pr.csv"))?;
        pr.write_record(["recall", "precision"])?;
        for (x, y) in &self.pr_points {
            pr.write_record([x.to_string(), y.to_string()])?;
        }
        pr.flush()?;
        Ok(())
    }
}
