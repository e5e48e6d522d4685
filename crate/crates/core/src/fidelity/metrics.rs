use std::collections::BTreeSet;

use anomaly_nn::Scalar;
use ndarray::{Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use super::seg::{argmax_labels, predict, SegModel};
use crate::error::{invalid, Result};
use crate::volume::Slice;

/// `-sum p ln p` over classes and pixels of a `(C, H, W)` probability map, with `0 ln 0 = 0`.
pub fn entropy<T: Scalar>(probs: &Array3<T>) -> Result<f64> {
    let mut h = 0.0;
    for &p in probs.iter() {
        let p = p.to_f64_lossy();
        if p < 0.0 || !p.is_finite() {
            return Err(invalid(format!("invalid probability {p}")));
        }
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    Ok(h)
}

/// Dice coefficient of two binary masks; `None` when both are empty.
pub fn dice(a: &Array2<bool>, b: &Array2<bool>) -> Option<f64> {
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b.iter()) {
        na += usize::from(x);
        nb += usize::from(y);
        inter += usize::from(x && y);
    }
    (na + nb > 0).then(|| 2.0 * inter as f64 / (na + nb) as f64)
}

/// Mean Dice between two label maps over the non-background classes present in `reference`;
/// `None` when the reference holds only background.
pub fn label_overlap(reference: &Array2<u8>, other: &Array2<u8>) -> Option<f64> {
    let classes: BTreeSet<u8> = reference.iter().copied().filter(|&c| c != 0).collect();
    if classes.is_empty() {
        return None;
    }
    let total: f64 = classes
        .iter()
        .map(|&k| dice(&reference.mapv(|v| v == k), &other.mapv(|v| v == k)).expect("class present in reference"))
        .sum();
    Some(total / classes.len() as f64)
}

fn slice_batch<T: Scalar>(s: &[&Slice]) -> Array4<T> {
    crate::data_pipeline::slices_to_batch(s.iter().copied()).mapv(|v| T::of(f64::from(v)))
}

fn check_pair(x: &Slice, x_hat: &Slice) -> Result<()> {
    if x.data.dim() != x_hat.data.dim() {
        return Err(invalid("slice and reconstruction differ in shape"));
    }
    Ok(())
}

/// `Entropy(x) - Entropy(x_hat)` of the segmentation softmax; higher means sharper.
pub fn quality_score<T: Scalar>(model: &SegModel<T>, x: &Slice, x_hat: &Slice) -> Result<f64> {
    check_pair(x, x_hat)?;
    let p = predict(model, &slice_batch(&[x, x_hat]))?;
    Ok(entropy(&p.index_axis(Axis(0), 0).to_owned())? - entropy(&p.index_axis(Axis(0), 1).to_owned())?)
}

/// Mean Dice between the argmax segmentations of `x` and `x_hat` over the foreground classes
/// found in `x`; `None` when `x` segments to background only.
pub fn overlap_score<T: Scalar>(model: &SegModel<T>, x: &Slice, x_hat: &Slice) -> Result<Option<f64>> {
    check_pair(x, x_hat)?;
    let p = predict(model, &slice_batch(&[x, x_hat]))?;
    let lx = argmax_labels(&p.index_axis(Axis(0), 0).to_owned());
    let lh = argmax_labels(&p.index_axis(Axis(0), 1).to_owned());
    Ok(label_overlap(&lx, &lh))
}

/// Both fidelity scores for many pairs, evaluated in batches.
pub fn fidelity_scores<T: Scalar>(model: &SegModel<T>, pairs: &[(&Slice, &Slice)], batch: usize) -> Result<Vec<(f64, Option<f64>)>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch.max(1)) {
        let mut refs = Vec::with_capacity(2 * chunk.len());
        for (x, xh) in chunk {
            check_pair(x, xh)?;
            refs.push(*x);
            refs.push(*xh);
        }
        let p = predict(model, &slice_batch(&refs))?;
        for i in 0..chunk.len() {
            let px = p.index_axis(Axis(0), 2 * i).to_owned();
            let ph = p.index_axis(Axis(0), 2 * i + 1).to_owned();
            let q = entropy(&px)? - entropy(&ph)?;
            out.push((q, label_overlap(&argmax_labels(&px), &argmax_labels(&ph))));
        }
    }
    Ok(out)
}

/// Pooled per-class Dice of predicted against reference label maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDice {
    /// `None` for classes absent from both prediction and reference.
    pub per_class: Vec<Option<f64>>,
}

impl ClassDice {
    /// Mean over non-background classes that occur.
    pub fn foreground_mean(&self) -> Option<f64> {
        let v: Vec<f64> = self.per_class.iter().skip(1).flatten().copied().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub fn class_dice(pred: &[Array2<u8>], truth: &[Array2<u8>], classes: usize) -> Result<ClassDice> {
    if pred.len() != truth.len() {
        return Err(invalid("prediction and reference counts differ"));
    }
    let mut inter = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for (p, t) in pred.iter().zip(truth) {
        if p.dim() != t.dim() {
            return Err(invalid("label map shapes differ"));
        }
        for (&a, &b) in p.iter().zip(t.iter()) {
            let (a, b) = (usize::from(a), usize::from(b));
            if a >= classes || b >= classes {
                return Err(invalid("label outside class range"));
            }
            total[a] += 1;
            total[b] += 1;
            if a == b {
                inter[a] += 1;
            }
        }
    }
    let per_class = (0..classes).map(|k| (total[k] > 0).then(|| 2.0 * inter[k] as f64 / total[k] as f64)).collect();
    Ok(ClassDice { per_class })
}

/// Argmax segmentation of every slice, in batches.
pub fn segment_slices<T: Scalar>(model: &SegModel<T>, slices: &[&Slice], batch: usize) -> Result<Vec<Array2<u8>>> {
    let mut out = Vec::with_capacity(slices.len());
    for chunk in slices.chunks(batch.max(1)) {
        let p = predict(model, &slice_batch(chunk))?;
        for i in 0..chunk.len() {
            out.push(argmax_labels(&p.index_axis(Axis(0), i).to_owned()));
        }
    }
    Ok(out)
}
