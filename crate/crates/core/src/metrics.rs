//! Localization (mIOU) and multi-label recognition (mAP, macro AUROC) metrics.
//! The `oracle` submodule holds direct-enumeration twins used for testing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub gt_bbox: [f64; 4],
    pub pred_bbox: [f64; 4],
    pub gt_labels: Vec<bool>,
    pub pred_scores: Vec<f64>,
}

fn sanitize(b: &[f64; 4]) -> [f64; 4] {
    b.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
}

fn area(b: &[f64; 4]) -> f64 {
    if b[0] >= b[2] || b[1] >= b[3] {
        0.0
    } else {
        (b[2] - b[0]) * (b[3] - b[1])
    }
}

/// Intersection over union after clamping to the unit square. Inverted boxes
/// have zero area; two empty boxes score 0.
pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let (a, b) = (sanitize(a), sanitize(b));
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let union = area(&a) + area(&b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

pub fn mean_iou(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Metric("mIOU over an empty record set".into()));
    }
    let total: f64 = records.iter().map(|r| iou(&r.gt_bbox, &r.pred_bbox)).sum();
    Ok(total / records.len() as f64)
}

/// Per-class label and score columns, checked for consistent widths and
/// finite scores.
fn columns(records: &[EvalRecord]) -> Result<Vec<(Vec<bool>, Vec<f64>)>> {
    let Some(first) = records.first() else {
        return Err(Error::Metric("no records".into()));
    };
    let classes = first.gt_labels.len();
    for r in records {
        if r.gt_labels.len() != classes || r.pred_scores.len() != classes {
            return Err(Error::Metric(format!(
                "record {} has {} labels and {} scores, expected {classes}",
                r.sample_id,
                r.gt_labels.len(),
                r.pred_scores.len()
            )));
        }
        if r.pred_scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Metric(format!("record {} has a non-finite score", r.sample_id)));
        }
    }
    Ok((0..classes)
        .map(|c| {
            (
                records.iter().map(|r| r.gt_labels[c]).collect(),
                records.iter().map(|r| r.pred_scores[c]).collect(),
            )
        })
        .collect())
}

/// Average precision of one ranking; ties keep sample order. `None` without
/// positives.
pub fn average_precision(labels: &[bool], scores: &[f64]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Mann–Whitney AUC with tied scores counting one half. `None` unless both
/// classes occur.
pub fn roc_auc(labels: &[bool], scores: &[f64]) -> Option<f64> {
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    // Sum of midranks of the positives.
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let midrank = (start + end + 1) as f64 / 2.0;
        let group_pos = order[start..end].iter().filter(|&&i| labels[i]).count();
        rank_sum += midrank * group_pos as f64;
        start = end;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean AP over classes with at least one positive.
pub fn multilabel_map(records: &[EvalRecord]) -> Result<f64> {
    let aps: Vec<f64> = columns(records)?
        .iter()
        .filter_map(|(l, s)| average_precision(l, s))
        .collect();
    if aps.is_empty() {
        return Err(Error::Metric("mAP needs at least one class with a positive".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Macro AUROC over classes with both a positive and a negative.
pub fn auroc(records: &[EvalRecord]) -> Result<f64> {
    let aucs: Vec<f64> = columns(records)?
        .iter()
        .filter_map(|(l, s)| roc_auc(l, s))
        .collect();
    if aucs.is_empty() {
        return Err(Error::Metric("AUROC needs a class with both positives and negatives".into()));
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    #[serde(rename = "mIOU")]
    pub miou: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "AUROC")]
    pub auroc: f64,
}

pub fn summarize(records: &[EvalRecord]) -> Result<MetricSummary> {
    Ok(MetricSummary {
        miou: mean_iou(records)?,
        map: multilabel_map(records)?,
        auroc: auroc(records)?,
    })
}

/// Quadratic-time references: every precision and every pair is counted
/// directly.
pub mod oracle {
    use super::EvalRecord;

    /// Rank of sample `i`: samples scoring higher, or equal and earlier, come
    /// first.
    fn ahead(scores: &[f64], i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..scores.len()).filter(move |&j| scores[j] > scores[i] || (scores[j] == scores[i] && j <= i))
    }

    pub fn average_precision(labels: &[bool], scores: &[f64]) -> Option<f64> {
        let positives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
        if positives.is_empty() {
            return None;
        }
        let mut sum = 0.0;
        for &i in &positives {
            let (mut rank, mut hits) = (0usize, 0usize);
            for j in ahead(scores, i) {
                rank += 1;
                if labels[j] {
                    hits += 1;
                }
            }
            sum += hits as f64 / rank as f64;
        }
        Some(sum / positives.len() as f64)
    }

    pub fn roc_auc(labels: &[bool], scores: &[f64]) -> Option<f64> {
        let (mut concordant, mut pairs) = (0.0, 0usize);
        for i in (0..labels.len()).filter(|&i| labels[i]) {
            for j in (0..labels.len()).filter(|&j| !labels[j]) {
                pairs += 1;
                if scores[i] > scores[j] {
                    concordant += 1.0;
                } else if scores[i] == scores[j] {
                    concordant += 0.5;
                }
            }
        }
        (pairs > 0).then(|| concordant / pairs as f64)
    }

    fn per_class(records: &[EvalRecord], f: fn(&[bool], &[f64]) -> Option<f64>) -> Option<f64> {
        let classes = records.first()?.gt_labels.len();
        let vals: Vec<f64> = (0..classes)
            .filter_map(|c| {
                let l: Vec<bool> = records.iter().map(|r| r.gt_labels[c]).collect();
                let s: Vec<f64> = records.iter().map(|r| r.pred_scores[c]).collect();
                f(&l, &s)
            })
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn multilabel_map(records: &[EvalRecord]) -> Option<f64> {
        per_class(records, average_precision)
    }

    pub fn auroc(records: &[EvalRecord]) -> Option<f64> {
        per_class(records, roc_auc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(labels: &[bool], scores: &[f64]) -> Vec<EvalRecord> {
        labels
            .iter()
            .zip(scores)
            .enumerate()
            .map(|(i, (l, s))| EvalRecord {
                sample_id: i.to_string(),
                gt_bbox: [0.0, 0.0, 1.0, 1.0],
                pred_bbox: [0.0, 0.0, 1.0, 1.0],
                gt_labels: vec![*l],
                pred_scores: vec![*s],
            })
            .collect()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&[0.0, 0.0, 1.0, 1.0], &[0.0, 0.0, 1.0, 1.0]), 1.0);
        assert_eq!(iou(&[0.0, 0.0, 0.2, 0.2], &[0.5, 0.5, 0.7, 0.7]), 0.0);
        let v = iou(&[0.0, 0.0, 0.2, 0.2], &[0.1, 0.0, 0.3, 0.2]);
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou(&[0.5, 0.5, 0.2, 0.2], &[0.5, 0.5, 0.2, 0.2]), 0.0);
        assert_eq!(iou(&[-1.0, -1.0, 2.0, 2.0], &[0.0, 0.0, 1.0, 1.0]), 1.0);
    }

    #[test]
    fn mean_iou_examples() {
        let mut r = rec(&[true, true], &[0.5, 0.5]);
        assert_eq!(mean_iou(&r).unwrap(), 1.0);
        r[1].gt_bbox = [0.0, 0.0, 0.2, 0.2];
        r[1].pred_bbox = [0.1, 0.0, 0.3, 0.2];
        assert!((mean_iou(&r).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        r.iter_mut().for_each(|x| x.pred_bbox = [0.9, 0.9, 1.0, 1.0]);
        r[0].gt_bbox = [0.0, 0.0, 0.5, 0.5];
        assert_eq!(mean_iou(&r).unwrap(), 0.0);
        assert!(mean_iou(&[]).is_err());
    }

    #[test]
    fn map_examples() {
        assert_eq!(multilabel_map(&rec(&[true, false], &[0.9, 0.2])).unwrap(), 1.0);
        assert_eq!(multilabel_map(&rec(&[true, false], &[0.2, 0.9])).unwrap(), 0.5);
        assert_eq!(multilabel_map(&rec(&[true, true], &[0.1, 0.7])).unwrap(), 1.0);
        assert!(matches!(multilabel_map(&rec(&[false, false], &[0.1, 0.7])), Err(Error::Metric(_))));
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&rec(&[true, false], &[0.9, 0.1])).unwrap(), 1.0);
        assert_eq!(auroc(&rec(&[true, false, true, false], &[0.5; 4])).unwrap(), 0.5);
        let r = rec(&[true, false, true, false], &[0.9, 0.8, 0.7, 0.6]);
        assert_eq!(auroc(&r).unwrap(), 0.75);
        assert!(auroc(&rec(&[true, true], &[0.1, 0.2])).is_err());
    }

    #[test]
    fn ties_follow_sample_order() {
        // Equal scores: the earlier sample ranks first.
        assert_eq!(average_precision(&[false, true], &[0.5, 0.5]), Some(0.5));
        assert_eq!(average_precision(&[true, false], &[0.5, 0.5]), Some(1.0));
        assert_eq!(oracle::average_precision(&[false, true], &[0.5, 0.5]), Some(0.5));
    }

    #[test]
    fn ragged_records_rejected() {
        let mut r = rec(&[true, false], &[0.1, 0.2]);
        r[1].pred_scores.push(0.3);
        assert!(multilabel_map(&r).is_err());
        let mut r = rec(&[true, false], &[0.1, 0.2]);
        r[0].pred_scores[0] = f64::NAN;
        assert!(auroc(&r).is_err());
    }
}
