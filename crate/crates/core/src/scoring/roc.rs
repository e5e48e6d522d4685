use std::collections::BTreeMap;

use ndarray::{ArrayView, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{degenerate, invalid, Error, Result};

pub const ROC_THRESHOLDS: usize = 1000;

/// Key of the pooled curve over all abnormality classes.
pub const ANY_CLASS: &str = "any";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRoc {
    pub positives: usize,
    /// One value per threshold, aligned with [`RocResult::thresholds`].
    pub tpr: Vec<f64>,
    pub auc: f64,
    /// Youden-optimal point.
    pub operating: OperatingPoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    /// Ascending; a voxel is called positive at threshold `t` when its score is `>= t`.
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub negatives: usize,
    /// `None` for classes without positive voxels inside the evaluation region.
    pub classes: BTreeMap<String, Option<ClassRoc>>,
}

impl RocResult {
    pub fn auc(&self, class: &str) -> Option<f64> {
        self.classes.get(class).and_then(|c| c.as_ref()).map(|c| c.auc)
    }
}

/// Order statistics at `ROC_THRESHOLDS` equally spaced quantile levels of `values`.
fn quantile_thresholds(mut values: Vec<f64>) -> Vec<f64> {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    (0..ROC_THRESHOLDS)
        .map(|i| values[((i as f64 / (ROC_THRESHOLDS - 1) as f64) * (n - 1) as f64).round() as usize])
        .collect()
}

/// Number of `sorted` values `>= t` for every threshold.
fn counts_at_or_above(sorted: &[f64], thresholds: &[f64]) -> Vec<usize> {
    thresholds.iter().map(|t| sorted.len() - sorted.partition_point(|v| v < t)).collect()
}

/// Trapezoidal area under the curve through `(fpr, tpr)` points plus the `(0, 0)` and `(1, 1)` corners.
fn trapezoid(fpr: &[f64], tpr: &[f64]) -> f64 {
    let mut pts: Vec<(f64, f64)> = fpr.iter().copied().zip(tpr.iter().copied()).collect();
    pts.push((0.0, 0.0));
    pts.push((1.0, 1.0));
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

/// Rectified multi-label ROC over the voxels inside `mask`.
///
/// Negatives are in-mask voxels without any abnormality label. For each class, true positives
/// at a threshold are that class's voxels scoring at or above it; precision counts them against
/// all negatives called positive. The pooled [`ANY_CLASS`] curve uses the union of labels.
pub fn evaluate_detection<D: Dimension>(
    scores: ArrayView<'_, f64, D>,
    labels: &BTreeMap<String, ArrayView<'_, u8, D>>,
    mask: ArrayView<'_, u8, D>,
) -> Result<RocResult> {
    if mask.shape() != scores.shape() || labels.values().any(|l| l.shape() != scores.shape()) {
        return Err(invalid("scores, labels and mask must share one shape"));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFailure("non-finite score in evaluation".into()));
    }
    let flat_labels: Vec<(&String, Vec<u8>)> = labels.iter().map(|(k, v)| (k, v.iter().copied().collect())).collect();
    let mut in_mask = Vec::new();
    let mut negatives = Vec::new();
    let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); flat_labels.len()];
    let mut any = Vec::new();
    for (idx, (&s, &m)) in scores.iter().zip(mask.iter()).enumerate() {
        if m == 0 {
            continue;
        }
        in_mask.push(s);
        let mut labelled = false;
        for (c, (_, l)) in flat_labels.iter().enumerate() {
            if l[idx] != 0 {
                per_class[c].push(s);
                labelled = true;
            }
        }
        if labelled {
            any.push(s);
        } else {
            negatives.push(s);
        }
    }
    if negatives.is_empty() {
        return Err(degenerate("evaluation region has no negative voxels"));
    }
    let thresholds = quantile_thresholds(in_mask);
    negatives.sort_by(f64::total_cmp);
    let fp = counts_at_or_above(&negatives, &thresholds);
    let n_neg = negatives.len() as f64;
    let fpr: Vec<f64> = fp.iter().map(|&c| c as f64 / n_neg).collect();

    let curve = |mut pos: Vec<f64>| -> Option<ClassRoc> {
        if pos.is_empty() {
            return None;
        }
        pos.sort_by(f64::total_cmp);
        let tp = counts_at_or_above(&pos, &thresholds);
        let tpr: Vec<f64> = tp.iter().map(|&c| c as f64 / pos.len() as f64).collect();
        let auc = trapezoid(&fpr, &tpr);
        let best = (0..thresholds.len())
            .max_by(|&a, &b| (tpr[a] - fpr[a]).total_cmp(&(tpr[b] - fpr[b])).then(b.cmp(&a)))
            .expect("thresholds are non-empty");
        let called = tp[best] + fp[best];
        let precision = if called > 0 { tp[best] as f64 / called as f64 } else { 0.0 };
        let sensitivity = tpr[best];
        let f1 = if precision + sensitivity > 0.0 { 2.0 * precision * sensitivity / (precision + sensitivity) } else { 0.0 };
        Some(ClassRoc {
            positives: pos.len(),
            tpr,
            auc,
            operating: OperatingPoint { threshold: thresholds[best], sensitivity, specificity: 1.0 - fpr[best], precision, f1 },
        })
    };

    let mut classes = BTreeMap::new();
    for ((name, _), pos) in flat_labels.iter().zip(per_class) {
        classes.insert((*name).clone(), curve(pos));
    }
    classes.insert(ANY_CLASS.to_string(), curve(any));
    Ok(RocResult { thresholds, fpr, negatives: negatives.len(), classes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    fn eval(scores: &[f64], pos: &[u8]) -> RocResult {
        let s = Array1::from_vec(scores.to_vec());
        let l = Array1::from_vec(pos.to_vec());
        let m = Array1::from_elem(scores.len(), 1u8);
        let labels = BTreeMap::from([("lesion".to_string(), l.view())]);
        evaluate_detection(s.view(), &labels, m.view()).unwrap()
    }

    #[test]
    fn perfect_and_constant_scores() {
        let r = eval(&[0.1, 0.2, 0.3, 0.8, 0.9], &[0, 0, 0, 1, 1]);
        assert_eq!(r.auc("lesion"), Some(1.0));
        let op = &r.classes["lesion"].as_ref().unwrap().operating;
        assert_eq!((op.sensitivity, op.specificity, op.precision, op.f1), (1.0, 1.0, 1.0, 1.0));
        let r = eval(&[0.5; 6], &[0, 1, 0, 1, 0, 0]);
        assert_eq!(r.auc("lesion"), Some(0.5));
    }

    #[test]
    fn missing_class_is_absent_not_zero() {
        let s = Array1::from_vec(vec![0.1, 0.5, 0.9]);
        let l = Array1::from_vec(vec![0u8, 0, 1]);
        let none = Array1::from_vec(vec![0u8, 0, 0]);
        let m = Array1::from_elem(3, 1u8);
        let labels = BTreeMap::from([("a".to_string(), l.view()), ("b".to_string(), none.view())]);
        let r = evaluate_detection(s.view(), &labels, m.view()).unwrap();
        assert_eq!(r.classes["b"], None);
        assert_eq!(r.auc("a"), Some(1.0));
    }
}
