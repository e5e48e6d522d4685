//! Intensity standardization by CDF matching against a pooled template.

use serde::{Deserialize, Serialize};

use crate::error::{degenerate, invalid, Result};
use crate::volume::Volume;

/// Lowest intensity assigned to foreground voxels when a template is built from volumes, so
/// matched foreground never collides with the zero background.
pub const FOREGROUND_FLOOR: f64 = 0.02;

/// Target intensity of the dominant tissue peak.
pub const TISSUE_PEAK_TARGET: f64 = 0.5;

/// Monotone quantile function sampled at equally spaced probabilities `0, 1/(n-1), ..., 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityTemplate {
    pub quantiles: Vec<f64>,
    /// When set, only voxels above zero are matched and the zero background is left untouched.
    pub foreground_only: bool,
}

impl IntensityTemplate {
    pub fn new(quantiles: Vec<f64>, foreground_only: bool) -> Result<Self> {
        if quantiles.len() < 2 {
            return Err(invalid("template needs at least two quantiles"));
        }
        if quantiles.windows(2).any(|w| w[1] < w[0]) || quantiles.iter().any(|q| !q.is_finite()) {
            return Err(invalid("template quantiles must be finite and non-decreasing"));
        }
        Ok(Self { quantiles, foreground_only })
    }

    pub fn uniform(lo: f64, hi: f64, points: usize) -> Self {
        let q = (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect();
        Self { quantiles: q, foreground_only: false }
    }

    /// Template from samples: their empirical quantile function.
    pub fn from_samples(samples: &[f64], points: usize, foreground_only: bool) -> Result<Self> {
        let mut s: Vec<f64> = samples.iter().copied().filter(|v| v.is_finite()).collect();
        if s.len() < 2 {
            return Err(degenerate("too few samples for an intensity template"));
        }
        s.sort_by(f64::total_cmp);
        Self::new((0..points).map(|i| empirical_quantile(&s, i as f64 / (points - 1) as f64)).collect(), foreground_only)
    }

    /// Pools the foreground quantile functions of `volumes` (pointwise average) and remaps the
    /// result so that its minimum lands on [`FOREGROUND_FLOOR`], its dominant tissue peak on
    /// [`TISSUE_PEAK_TARGET`] and its maximum on 1.
    pub fn from_volumes(volumes: &[&Volume], points: usize) -> Result<Self> {
        if volumes.is_empty() {
            return Err(invalid("no volumes to build a template from"));
        }
        let mut pooled = vec![0.0; points];
        for v in volumes {
            let mut fg: Vec<f64> = v.data.iter().filter(|x| **x > 0.0).map(|x| f64::from(*x)).collect();
            if fg.len() < 2 {
                return Err(degenerate(format!("volume {} has no foreground", v.id)));
            }
            fg.sort_by(f64::total_cmp);
            for (i, p) in pooled.iter_mut().enumerate() {
                *p += empirical_quantile(&fg, i as f64 / (points - 1) as f64) / volumes.len() as f64;
            }
        }
        let lo = pooled[0];
        let hi = pooled[points - 1];
        if !(hi > lo) {
            return Err(degenerate("pooled foreground is constant"));
        }
        let peak = quantile_mode(&pooled, 64);
        let remap = |x: f64| {
            if x <= peak {
                FOREGROUND_FLOOR + (TISSUE_PEAK_TARGET - FOREGROUND_FLOOR) * (x - lo) / (peak - lo).max(f64::EPSILON)
            } else {
                TISSUE_PEAK_TARGET + (1.0 - TISSUE_PEAK_TARGET) * (x - peak) / (hi - peak).max(f64::EPSILON)
            }
        };
        Self::new(pooled.into_iter().map(remap).collect(), true)
    }

    /// Inverse CDF by linear interpolation between stored quantiles.
    pub fn quantile(&self, p: f64) -> f64 {
        let n = self.quantiles.len();
        let pos = p.clamp(0.0, 1.0) * (n - 1) as f64;
        let i = (pos.floor() as usize).min(n - 2);
        let f = pos - i as f64;
        self.quantiles[i] * (1.0 - f) + self.quantiles[i + 1] * f
    }

    /// CDF of the piecewise-linear distribution described by the quantiles.
    pub fn cdf(&self, x: f64) -> f64 {
        let q = &self.quantiles;
        let n = q.len();
        if x < q[0] {
            return 0.0;
        }
        if x >= q[n - 1] {
            return 1.0;
        }
        // last index with q[i] <= x
        let i = q.partition_point(|v| *v <= x) - 1;
        let span = q[i + 1] - q[i];
        let f = if span > 0.0 { (x - q[i]) / span } else { 1.0 };
        (i as f64 + f) / (n - 1) as f64
    }

    /// Location of the highest density bin of the template distribution.
    pub fn mode(&self) -> f64 {
        quantile_mode(&self.quantiles, 64)
    }
}

/// Linear-interpolated empirical quantile of sorted data.
pub fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let f = pos - i as f64;
    if i + 1 >= sorted.len() {
        sorted[sorted.len() - 1]
    } else {
        sorted[i] * (1.0 - f) + sorted[i + 1] * f
    }
}

/// Mode of a distribution given by equally spaced quantiles: the histogram bin (over `bins`
/// equal-width bins) that receives the most probability mass.
fn quantile_mode(quantiles: &[f64], bins: usize) -> f64 {
    let lo = quantiles[0];
    let hi = quantiles[quantiles.len() - 1];
    let width = (hi - lo) / bins as f64;
    let mut mass = vec![0usize; bins];
    for q in quantiles {
        let b = (((q - lo) / width) as usize).min(bins - 1);
        mass[b] += 1;
    }
    let best = mass.iter().enumerate().max_by_key(|(i, m)| (**m, usize::MAX - *i)).map(|(i, _)| i).unwrap_or(0);
    lo + (best as f64 + 0.5) * width
}

/// Foreground histogram mode of a volume (`bins` equal-width bins over the positive voxels).
pub fn foreground_mode(v: &Volume, bins: usize) -> Option<f64> {
    let fg: Vec<f64> = v.data.iter().filter(|x| **x > 0.0).map(|x| f64::from(*x)).collect();
    let lo = fg.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = fg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return None;
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for x in &fg {
        counts[(((x - lo) / width) as usize).min(bins - 1)] += 1;
    }
    let best = counts.iter().enumerate().max_by_key(|(i, c)| (**c, usize::MAX - *i)).map(|(i, _)| i)?;
    Some(lo + (best as f64 + 0.5) * width)
}

/// Maps voxel intensities through `template` by rank.
///
/// Tied voxels share the midpoint of their CDF interval; midpoints are rescaled so the lowest
/// value maps to the template minimum and the highest to its maximum. With distinct values this
/// is the usual `rank / (n - 1)` matching, and voxel order is always preserved.
pub fn histogram_match(v: &Volume, template: &IntensityTemplate) -> Result<Volume> {
    v.validate()?;
    let values: Vec<(usize, f32)> = v
        .data
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, x)| !template.foreground_only || *x > 0.0)
        .collect();
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|a, b| values[*a].1.total_cmp(&values[*b].1));
    let n = values.len() as f64;
    // (value, cdf midpoint) per distinct value, ascending
    let mut groups: Vec<(f32, f64, usize, usize)> = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let val = values[order[start]].1;
        let mut end = start;
        while end < order.len() && values[order[end]].1 == val {
            end += 1;
        }
        groups.push((val, (start as f64 + end as f64) / 2.0 / n, start, end));
        start = end;
    }
    if groups.len() < 2 {
        return Err(degenerate(format!("volume {} has constant intensity", v.id)));
    }
    let m_lo = groups[0].1;
    let m_hi = groups[groups.len() - 1].1;
    let mut out = v.data.clone();
    let flat = out.as_slice_mut().expect("contiguous");
    for (_, mid, s, e) in &groups {
        let mapped = template.quantile((mid - m_lo) / (m_hi - m_lo)) as f32;
        for &o in &order[*s..*e] {
            flat[values[o].0] = mapped;
        }
    }
    Volume::new(out, v.spacing, v.id.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn two_value_volume_maps_to_template_extremes() {
        let data = Array3::from_shape_fn((2, 2, 2), |(k, _, _)| if k == 0 { 0.0 } else { 100.0 });
        let v = Volume::new(data, [1.0; 3], "v").unwrap();
        let out = histogram_match(&v, &IntensityTemplate::uniform(0.0, 1.0, 101)).unwrap();
        assert!(out.data[[0, 0, 0]].abs() < 1e-6);
        assert!((out.data[[1, 0, 0]] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_volume_is_degenerate() {
        let v = Volume::new(Array3::from_elem((2, 2, 2), 3.0), [1.0; 3], "v").unwrap();
        assert!(matches!(
            histogram_match(&v, &IntensityTemplate::uniform(0.0, 1.0, 11)),
            Err(crate::Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn volume_drawn_from_template_is_unchanged() {
        let t = IntensityTemplate::new((0..257).map(|i| (i as f64 / 256.0).powi(2)).collect(), false).unwrap();
        let data = Array3::from_shape_vec((1, 1, 257), t.quantiles.iter().map(|q| *q as f32).collect()).unwrap();
        let v = Volume::new(data.clone(), [1.0; 3], "v").unwrap();
        let out = histogram_match(&v, &t).unwrap();
        let step = 1.0 / 256.0;
        for (a, b) in out.data.iter().zip(data.iter()) {
            assert!((a - b).abs() <= step);
        }
    }

    #[test]
    fn cdf_inverts_quantile() {
        let t = IntensityTemplate::new(vec![0.0, 0.1, 0.5, 0.6, 1.0], false).unwrap();
        for p in [0.0, 0.1, 0.3, 0.62, 0.9] {
            assert!((t.cdf(t.quantile(p)) - p).abs() < 1e-12);
        }
    }
}
