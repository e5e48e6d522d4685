use anomaly_nn::Scalar;
use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::discriminative::{embed, DiscModel};
use crate::error::{degenerate, invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Raw,
    Zscored,
}

impl Normalization {
    pub fn key(self) -> &'static str {
        match self {
            Normalization::Raw => "raw",
            Normalization::Zscored => "zscored",
        }
    }
}

/// Scores for one axial slice.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub scores: Array2<f64>,
    pub normalization: Normalization,
    pub stride: usize,
    pub index_k: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVolume {
    pub scores: Array3<f64>,
    pub normalization: Normalization,
    pub stride: usize,
}

/// Patches evaluated per forward pass.
const EMBED_CHUNK: usize = 512;

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Window of `size` centred on `(i, j)` (centre at index `size / 2`), mirrored at the borders.
fn reflected_patch(img: &Array2<f32>, (i, j): (usize, usize), size: usize) -> Array2<f32> {
    let (h, w) = img.dim();
    let half = (size / 2) as isize;
    Array2::from_shape_fn((size, size), |(a, b)| {
        img[[reflect(i as isize - half + a as isize, h), reflect(j as isize - half + b as isize, w)]]
    })
}

/// `0, stride, 2 stride, ...` plus the last index, so interpolation covers the whole axis.
fn grid(n: usize, stride: usize) -> Vec<usize> {
    let mut g: Vec<usize> = (0..n).step_by(stride).collect();
    if *g.last().expect("non-empty axis") != n - 1 {
        g.push(n - 1);
    }
    g
}

fn interp_weights(g: &[usize], p: usize) -> (usize, f64) {
    let k = g.partition_point(|v| *v <= p).saturating_sub(1).min(g.len().saturating_sub(2));
    if g.len() == 1 {
        return (0, 0.0);
    }
    let t = (p as f64 - g[k] as f64) / (g[k + 1] - g[k]) as f64;
    (k, t)
}

/// Embedding distance of co-located patches of `x` and `x_hat`, evaluated on a `stride` grid of
/// centres and bilinearly interpolated to every pixel.
pub fn abnormality_map<T: Scalar>(model: &DiscModel<T>, x: &Array2<f32>, x_hat: &Array2<f32>, stride: usize) -> Result<Array2<f64>> {
    if model.steps == 0 {
        return Err(Error::UntrainedModel("discriminative network has no completed training steps".into()));
    }
    if stride == 0 {
        return Err(invalid("stride must be positive"));
    }
    if x.dim() != x_hat.dim() || x.is_empty() {
        return Err(invalid(format!("slice {:?} and reconstruction {:?} must match", x.dim(), x_hat.dim())));
    }
    let (h, w) = x.dim();
    let p = model.arch.patch_size;
    let (gy, gx) = (grid(h, stride), grid(w, stride));
    let centres: Vec<(usize, usize)> = gy.iter().flat_map(|&i| gx.iter().map(move |&j| (i, j))).collect();
    let mut dist = Vec::with_capacity(centres.len());
    for chunk in centres.chunks(EMBED_CHUNK) {
        let n = chunk.len();
        let mut batch = Array4::<T>::zeros((2 * n, 1, p, p));
        for (b, &c) in chunk.iter().enumerate() {
            for (img, row) in [(x, b), (x_hat, n + b)] {
                let patch = reflected_patch(img, c, p);
                batch.slice_mut(ndarray::s![row, 0, .., ..]).assign(&patch.mapv(|v| T::of(f64::from(v))));
            }
        }
        let e = embed(model, &batch)?;
        for b in 0..n {
            let d: f64 = e
                .row(b)
                .iter()
                .zip(e.row(n + b).iter())
                .map(|(u, v)| (u.to_f64_lossy() - v.to_f64_lossy()).powi(2))
                .sum();
            dist.push(d.sqrt());
        }
    }
    let coarse = Array2::from_shape_vec((gy.len(), gx.len()), dist).expect("grid size");
    if stride == 1 {
        return Ok(coarse);
    }
    Ok(Array2::from_shape_fn((h, w), |(i, j)| {
        let (ky, ty) = interp_weights(&gy, i);
        let (kx, tx) = interp_weights(&gx, j);
        let at = |a: usize, b: usize| coarse[[a.min(gy.len() - 1), b.min(gx.len() - 1)]];
        at(ky, kx) * (1.0 - ty) * (1.0 - tx)
            + at(ky, kx + 1) * (1.0 - ty) * tx
            + at(ky + 1, kx) * ty * (1.0 - tx)
            + at(ky + 1, kx + 1) * ty * tx
    }))
}

/// Mean absolute intensity difference, the plain residual baseline.
pub fn residual_map(x: &Array2<f32>, x_hat: &Array2<f32>) -> Result<Array2<f64>> {
    if x.dim() != x_hat.dim() {
        return Err(invalid("slice and reconstruction differ in shape"));
    }
    Ok(ndarray::Zip::from(x).and(x_hat).map_collect(|a, b| f64::from((a - b).abs())))
}

/// Standardizes with the mean and population standard deviation of `region` (the whole map when
/// `None`); pixels outside the region take the smallest standardized value.
pub fn zscore_normalize(scores: &Array2<f64>, region: Option<&Array2<bool>>) -> Result<Array2<f64>> {
    if let Some(r) = region {
        if r.dim() != scores.dim() {
            return Err(invalid("normalization region does not match the score map"));
        }
    }
    let inside = |idx: (usize, usize)| region.is_none_or(|r| r[idx]);
    let vals: Vec<f64> = scores.indexed_iter().filter(|(i, _)| inside(*i)).map(|(_, v)| *v).collect();
    if vals.len() < 2 {
        return Err(degenerate("normalization region needs at least two pixels"));
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFailure("non-finite score".into()));
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(degenerate("scores have zero variance over the normalization region"));
    }
    let sd = var.sqrt();
    let lowest = vals.iter().map(|v| (v - mean) / sd).fold(f64::INFINITY, f64::min);
    Ok(Array2::from_shape_fn(scores.dim(), |idx| if inside(idx) { (scores[idx] - mean) / sd } else { lowest }))
}

/// Stacks slice maps into a volume by their `index_k`; every index below `depth` must occur once.
pub fn volume_assemble(slices: &[ScoreMap], depth: usize) -> Result<ScoreVolume> {
    let first = slices.first().ok_or_else(|| invalid("no slice maps to assemble"))?;
    let (h, w) = first.scores.dim();
    let mut seen = vec![false; depth];
    let mut out = Array3::<f64>::zeros((depth, h, w));
    for s in slices {
        if s.scores.dim() != (h, w) || s.normalization != first.normalization || s.stride != first.stride {
            return Err(invalid("slice maps differ in shape or metadata"));
        }
        if s.index_k >= depth || seen[s.index_k] {
            return Err(invalid(format!("slice index {} out of range or repeated", s.index_k)));
        }
        seen[s.index_k] = true;
        out.index_axis_mut(ndarray::Axis(0), s.index_k).assign(&s.scores);
    }
    if let Some(k) = seen.iter().position(|s| !s) {
        return Err(invalid(format!("missing slice index {k}")));
    }
    Ok(ScoreVolume { scores: out, normalization: first.normalization, stride: first.stride })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflection_mirrors_without_repeating_the_edge() {
        let idx: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
    }

    #[test]
    fn grid_always_ends_on_the_last_pixel() {
        assert_eq!(grid(10, 4), vec![0, 4, 8, 9]);
        assert_eq!(grid(9, 4), vec![0, 4, 8]);
        assert_eq!(grid(5, 1), vec![0, 1, 2, 3, 4]);
    }
}
