use ndarray::{Array3, Axis};

use crate::error::{invalid, Result};
use crate::volume::{LabelVolume, Volume};

/// Keys cubic convolution kernel with `a = -0.5` (Catmull-Rom). Reproduces linear ramps exactly.
pub fn cubic_kernel(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

/// Number of samples along an axis after resampling; keeps the physical extent within one voxel.
pub fn resampled_len(n: usize, from: f64, to: f64) -> usize {
    ((n as f64 * from / to).round() as usize).max(1)
}

/// Source-grid coordinate of output sample `i`. First voxel centres coincide.
pub fn source_coord(i: usize, from: f64, to: f64) -> f64 {
    i as f64 * to / from
}

fn check_spacing(s: [f64; 3]) -> Result<()> {
    if s.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(invalid(format!("spacing must be positive, got {s:?}")));
    }
    Ok(())
}

fn resample_axis(data: &Array3<f64>, axis: usize, n_out: usize, from: f64, to: f64) -> Array3<f64> {
    let n_in = data.len_of(Axis(axis));
    let mut shape = [data.dim().0, data.dim().1, data.dim().2];
    shape[axis] = n_out;
    let mut out = Array3::<f64>::zeros(shape);
    let last = n_in as isize - 1;
    for i in 0..n_out {
        let u = source_coord(i, from, to);
        let base = u.floor();
        let frac = u - base;
        let base = base as isize;
        let mut lane = out.index_axis_mut(Axis(axis), i);
        for tap in -1..=2isize {
            let w = cubic_kernel(frac - tap as f64);
            if w == 0.0 {
                continue;
            }
            let src = (base + tap).clamp(0, last) as usize;
            lane.scaled_add(w, &data.index_axis(Axis(axis), src));
        }
    }
    out
}

/// Resamples to `target` spacing with separable cubic convolution (edge samples clamped).
pub fn resample_volume(v: &Volume, target: [f64; 3]) -> Result<Volume> {
    check_spacing(target)?;
    v.validate()?;
    let mut data = v.data.mapv(f64::from);
    for axis in 0..3 {
        let n_out = resampled_len(data.len_of(Axis(axis)), v.spacing[axis], target[axis]);
        if n_out == data.len_of(Axis(axis)) && v.spacing[axis] == target[axis] {
            continue;
        }
        data = resample_axis(&data, axis, n_out, v.spacing[axis], target[axis]);
    }
    Volume::new(data.mapv(|x| x as f32), target, v.id.clone())
}

/// Nearest-neighbour resampling of binary masks onto the grid produced by [`resample_volume`].
pub fn resample_labels(labels: &LabelVolume, from: [f64; 3], target: [f64; 3]) -> Result<LabelVolume> {
    check_spacing(from)?;
    check_spacing(target)?;
    let mut out = LabelVolume::default();
    for (name, mask) in &labels.masks {
        let (k, i, j) = mask.dim();
        let dims = [k, i, j];
        let n: Vec<usize> = (0..3).map(|a| resampled_len(dims[a], from[a], target[a])).collect();
        let nearest = |a: usize, o: usize| -> usize {
            (source_coord(o, from[a], target[a]).round() as usize).min(dims[a] - 1)
        };
        let resampled = Array3::from_shape_fn((n[0], n[1], n[2]), |(z, y, x)| mask[[nearest(0, z), nearest(1, y), nearest(2, x)]]);
        out.masks.insert(name.clone(), resampled);
    }
    Ok(out)
}
