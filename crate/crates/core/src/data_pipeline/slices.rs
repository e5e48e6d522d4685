use ndarray::{s, Array2, Array3, Array4, ArrayView2, Axis};
use rand::Rng;

use crate::error::{degenerate, Result};
use super::histogram::{histogram_match, IntensityTemplate};
use super::resample::{resample_labels, resample_volume};
use crate::volume::{LabelVolume, Slice, Volume};

/// Centre crop (or zero pad) a 2D array to `size x size`. With an odd surplus the extra row or
/// column is dropped (or padded) on the trailing side.
pub fn crop_or_pad<T: Clone + Default>(a: ArrayView2<'_, T>, size: usize) -> Array2<T> {
    let (h, w) = a.dim();
    let mut out = Array2::<T>::default((size, size));
    let place = |n: usize| -> (usize, usize, usize) {
        // (source start, destination start, length)
        if n >= size {
            ((n - size) / 2, 0, size)
        } else {
            (0, (size - n) / 2, n)
        }
    };
    let (sy, dy, ly) = place(h);
    let (sx, dx, lx) = place(w);
    out.slice_mut(s![dy..dy + ly, dx..dx + lx]).assign(&a.slice(s![sy..sy + ly, sx..sx + lx]));
    out
}

/// Splits a volume into axial slices, each centre cropped or padded to `size x size`.
pub fn decompose_and_crop(v: &Volume, size: usize) -> Vec<Slice> {
    v.data
        .axis_iter(Axis(0))
        .enumerate()
        .map(|(k, plane)| Slice { data: crop_or_pad(plane, size), source_id: v.id.clone(), index_k: k })
        .collect()
}

/// Same cropping applied to a per-voxel array (labels, masks, score maps).
pub fn decompose_array<T: Clone + Default>(a: &Array3<T>, size: usize) -> Vec<Array2<T>> {
    a.axis_iter(Axis(0)).map(|plane| crop_or_pad(plane, size)).collect()
}

/// Affine min-max map onto `[-1, 1]`.
pub fn renormalize(a: &Array2<f32>) -> Result<Array2<f32>> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in a.iter() {
        let v = f64::from(*v);
        if !v.is_finite() {
            return Err(degenerate("non-finite value in slice"));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        return Err(degenerate("constant slice cannot be renormalized"));
    }
    Ok(a.mapv(|v| ((f64::from(v) - lo) / (hi - lo) * 2.0 - 1.0) as f32))
}

/// Full preprocessing chain: cubic resampling to `spacing` (negative ringing clamped to zero),
/// histogram matching, axial decomposition to `size x size` and renormalization.
///
/// Slices without any foreground cannot be renormalized and are dropped; `index_k` keeps the
/// position of the survivors.
pub fn preprocess_volume(v: &Volume, template: &IntensityTemplate, spacing: [f64; 3], size: usize) -> Result<Vec<Slice>> {
    let matched = preprocess_intensity(v, template, spacing, size)?;
    let mut out = Vec::new();
    for s in decompose_and_crop(&matched, size) {
        if s.data.iter().all(|x| *x == s.data[[0, 0]]) {
            continue;
        }
        let data = renormalize(&s.data)?;
        out.push(Slice { data, ..s });
    }
    Ok(out)
}

/// Resampled, histogram-matched volume on the `size x size` slice grid, before per-slice
/// renormalization. Background stays at 0, which is what [`crate::scoring::body_mask`] expects.
pub fn preprocess_intensity(v: &Volume, template: &IntensityTemplate, spacing: [f64; 3], size: usize) -> Result<Volume> {
    let mut r = resample_volume(v, spacing)?;
    r.data.mapv_inplace(|x| x.max(0.0));
    let matched = histogram_match(&r, template)?;
    let planes: Vec<Array2<f32>> = decompose_array(&matched.data, size);
    let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
    let data = ndarray::stack(Axis(0), &views).map_err(|e| degenerate(e.to_string()))?;
    Volume::new(data, matched.spacing, matched.id)
}

/// Anatomy label maps on the grid of [`preprocess_volume`], one per axial index `k` (align with
/// slices through `Slice::index_k`).
pub fn preprocess_anatomy(labels: &LabelVolume, from: [f64; 3], spacing: [f64; 3], size: usize) -> Result<Vec<Array2<u8>>> {
    let r = resample_labels(labels, from, spacing)?;
    let Some(first) = r.masks.values().next() else {
        return Ok(Vec::new());
    };
    let (k, i, j) = first.dim();
    Ok(decompose_array(&r.anatomy_map([k, i, j]), size))
}

/// Abnormality masks (union over classes, or one class) on the grid of [`preprocess_volume`].
pub fn preprocess_mask(labels: &LabelVolume, class: Option<&str>, from: [f64; 3], spacing: [f64; 3], size: usize) -> Result<Vec<Array2<u8>>> {
    let r = resample_labels(labels, from, spacing)?;
    let Some(first) = r.masks.values().next() else {
        return Ok(Vec::new());
    };
    let (k, i, j) = first.dim();
    let m = match class {
        None => r.any_abnormality([k, i, j]),
        Some(c) => r.mask(c).cloned().unwrap_or_else(|| Array3::zeros((k, i, j))),
    };
    Ok(decompose_array(&m, size))
}

/// Stacks slices into an `(N, 1, H, W)` batch.
pub fn slices_to_batch<'a>(slices: impl IntoIterator<Item = &'a Slice>) -> Array4<f32> {
    let planes: Vec<_> = slices.into_iter().map(|s| s.data.view().insert_axis(Axis(0))).collect();
    if planes.is_empty() {
        return Array4::zeros((0, 1, 0, 0));
    }
    ndarray::stack(Axis(0), &planes).expect("slices share one shape")
}

/// Parameters of one augmentation draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub scale: f64,
    pub rotation_deg: f64,
}

impl AugmentParams {
    pub const IDENTITY: Self = Self { flip: false, scale: 1.0, rotation_deg: 0.0 };
    pub const SCALE_RANGE: (f64, f64) = (0.9, 1.1);
    pub const ROTATION_RANGE_DEG: f64 = 10.0;

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            flip: rng.random_bool(0.5),
            scale: rng.random_range(Self::SCALE_RANGE.0..=Self::SCALE_RANGE.1),
            rotation_deg: rng.random_range(-Self::ROTATION_RANGE_DEG..=Self::ROTATION_RANGE_DEG),
        }
    }

    /// Source coordinate `(y, x)` sampled for output pixel `(y, x)` of an `h x w` image.
    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> (f64, f64) {
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        let (sin, cos) = (-self.rotation_deg.to_radians()).sin_cos();
        let sy = cy + (cos * dy - sin * dx) / self.scale;
        let mut sx = cx + (sin * dy + cos * dx) / self.scale;
        if self.flip {
            sx = (w as f64 - 1.0) - sx;
        }
        (sy, sx)
    }
}

/// Horizontal flip, isotropic scaling and rotation about the image centre (bilinear, `-1`
/// outside the source, result clamped to `[-1, 1]`).
pub fn augment_with(s: &Slice, p: &AugmentParams) -> Slice {
    let (h, w) = s.data.dim();
    let sample = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            -1.0
        } else {
            f64::from(s.data[[y as usize, x as usize]])
        }
    };
    let data = Array2::from_shape_fn((h, w), |(y, x)| {
        let (sy, sx) = p.source(y, x, h, w);
        let (y0, x0) = (sy.floor(), sx.floor());
        let (fy, fx) = (sy - y0, sx - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let mut v = sample(y0, x0) * (1.0 - fy) * (1.0 - fx);
        if fx != 0.0 {
            v += sample(y0, x0 + 1) * (1.0 - fy) * fx;
        }
        if fy != 0.0 {
            v += sample(y0 + 1, x0) * fy * (1.0 - fx);
            if fx != 0.0 {
                v += sample(y0 + 1, x0 + 1) * fy * fx;
            }
        }
        v.clamp(-1.0, 1.0) as f32
    });
    Slice { data, source_id: s.source_id.clone(), index_k: s.index_k }
}

/// Nearest-neighbour version of [`augment_with`] for label maps (`fill` outside the source).
pub fn augment_labels_with(labels: &Array2<u8>, p: &AugmentParams, fill: u8) -> Array2<u8> {
    let (h, w) = labels.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (sy, sx) = p.source(y, x, h, w);
        let (yi, xi) = (sy.round(), sx.round());
        if yi < 0.0 || xi < 0.0 || yi >= h as f64 || xi >= w as f64 {
            fill
        } else {
            labels[[yi as usize, xi as usize]]
        }
    })
}

pub fn augment<R: Rng + ?Sized>(s: &Slice, rng: &mut R) -> Slice {
    augment_with(s, &AugmentParams::sample(rng))
}
