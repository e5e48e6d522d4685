use std::collections::VecDeque;

use ndarray::{Array3, Axis};

use crate::data_pipeline::empirical_quantile;
use crate::error::{degenerate, Result};
use crate::volume::Volume;

/// Percentile of the non-zero voxels used as the body threshold.
pub const BODY_PERCENTILE: f64 = 0.05;

const NEIGHBOURS: [(isize, isize, isize); 6] = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)];

/// Labels the 6-connected components of `m` that satisfy `want`; returns component ids
/// (0 = not part of any) and the size of each component.
fn components(m: &Array3<bool>, want: bool) -> (Array3<u32>, Vec<usize>) {
    let (d, h, w) = m.dim();
    let mut id = Array3::<u32>::zeros(m.dim());
    let mut sizes = vec![0];
    let mut queue = VecDeque::new();
    for start in ndarray::indices((d, h, w)) {
        if m[start] != want || id[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32;
        sizes.push(0);
        id[start] = label;
        queue.push_back(start);
        while let Some((z, y, x)) = queue.pop_front() {
            sizes[label as usize] += 1;
            for (dz, dy, dx) in NEIGHBOURS {
                let (nz, ny, nx) = (z as isize + dz, y as isize + dy, x as isize + dx);
                if nz < 0 || ny < 0 || nx < 0 || nz >= d as isize || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let n = (nz as usize, ny as usize, nx as usize);
                if m[n] == want && id[n] == 0 {
                    id[n] = label;
                    queue.push_back(n);
                }
            }
        }
    }
    (id, sizes)
}

/// Fills background components that do not touch the border of `m`. With `planar` only the
/// in-plane border counts, so each axial slice of a one-slice volume is filled in 2D.
fn fill_holes(m: &mut Array3<bool>, planar: bool) {
    let (d, h, w) = m.dim();
    let (id, sizes) = components(m, false);
    let mut outside = vec![false; sizes.len()];
    for ((z, y, x), &c) in id.indexed_iter() {
        let z_edge = !planar && (z == 0 || z == d - 1);
        if c != 0 && (z_edge || y == 0 || x == 0 || y == h - 1 || x == w - 1) {
            outside[c as usize] = true;
        }
    }
    for (v, &c) in m.iter_mut().zip(id.iter()) {
        if c != 0 && !outside[c as usize] {
            *v = true;
        }
    }
}

/// Body region: voxels above the 5th percentile of the non-zero intensities, reduced to the
/// largest 6-connected component and with enclosed holes filled (in 3D, then per axial slice).
pub fn body_mask(v: &Volume) -> Result<Array3<u8>> {
    v.validate()?;
    let mut nz: Vec<f64> = v.data.iter().filter(|x| **x != 0.0).map(|x| f64::from(*x)).collect();
    if nz.is_empty() {
        return Err(degenerate(format!("volume {} has no non-zero voxels", v.id)));
    }
    nz.sort_by(f64::total_cmp);
    let t = empirical_quantile(&nz, BODY_PERCENTILE);
    let above = v.data.mapv(|x| f64::from(x) > t);
    let (id, sizes) = components(&above, true);
    let Some(best) = (1..sizes.len()).max_by_key(|&c| (sizes[c], usize::MAX - c)) else {
        return Err(degenerate(format!("volume {} has no voxels above the body threshold", v.id)));
    };
    let mut m = id.mapv(|c| c as usize == best);
    fill_holes(&mut m, false);
    for mut plane in m.axis_iter_mut(Axis(0)) {
        let mut p3 = plane.to_owned().insert_axis(Axis(0));
        fill_holes(&mut p3, true);
        plane.assign(&p3.index_axis(Axis(0), 0));
    }
    Ok(m.mapv(u8::from))
}

/// Intersection over union of two binary volumes; `None` when both are empty.
pub fn mask_iou(a: &Array3<u8>, b: &Array3<u8>) -> Option<f64> {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += usize::from(x != 0 && y != 0);
        union += usize::from(x != 0 || y != 0);
    }
    (union > 0).then(|| inter as f64 / union as f64)
}

/// Number of 6-connected foreground components and of enclosed background components.
pub fn topology(m: &Array3<u8>) -> (usize, usize) {
    let b = m.mapv(|v| v != 0);
    let fg = components(&b, true).1.len() - 1;
    let mut filled = b.clone();
    fill_holes(&mut filled, false);
    let holes = components(&b, false).1.len() - components(&filled, false).1.len();
    (fg, holes)
}
