use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{degenerate, invalid, Result};
use crate::volume::Slice;

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub data: Array2<f32>,
    /// Pixel `(i, j)` at index `(size / 2, size / 2)` of the window.
    pub center: (usize, usize),
    pub source: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub anchor: Patch,
    pub positive: Patch,
    pub negative: Patch,
}

/// Ranges of the random perturbation that turns an anchor into its positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletConfig {
    pub patch_size: usize,
    /// Maximum translation in pixels (per axis).
    pub max_shift: f64,
    /// Maximum relative change of the window size.
    pub max_scale: f64,
    /// Maximum relative intensity gain change.
    pub max_intensity_scale: f64,
    pub max_intensity_offset: f64,
    /// Minimum distance between anchor and negative centres.
    pub min_negative_distance: f64,
    /// Pixels above this value belong to the body region.
    pub body_threshold: f32,
}

impl TripletConfig {
    pub fn with_patch_size(patch_size: usize) -> Self {
        Self {
            patch_size,
            max_shift: 3.0,
            max_scale: 0.05,
            max_intensity_scale: 0.05,
            max_intensity_offset: 0.05,
            min_negative_distance: 8.0,
            body_threshold: -0.95,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 2 || self.patch_size % 2 != 0 {
            return Err(invalid("patch size must be even and at least 2"));
        }
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ![self.max_shift, self.max_scale, self.max_intensity_scale, self.max_intensity_offset, self.min_negative_distance]
            .into_iter()
            .all(ok)
            || self.max_scale >= 1.0
        {
            return Err(invalid("triplet jitter ranges must be finite, non-negative and scale < 1"));
        }
        Ok(())
    }

    /// Distance from a window centre to the slice border needed so the jittered window fits.
    fn margin(&self) -> usize {
        let half = self.patch_size as f64 / 2.0;
        (half * (1.0 + self.max_scale) + self.max_shift).ceil() as usize + 1
    }
}

/// One draw of the positive-pair perturbation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub shift: (f64, f64),
    pub scale: f64,
    pub intensity_scale: f64,
    pub intensity_offset: f64,
}

impl Jitter {
    pub const NONE: Self = Self { shift: (0.0, 0.0), scale: 1.0, intensity_scale: 1.0, intensity_offset: 0.0 };

    pub fn sample<R: Rng + ?Sized>(cfg: &TripletConfig, rng: &mut R) -> Self {
        let mut sym = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        Self {
            shift: (sym(cfg.max_shift), sym(cfg.max_shift)),
            scale: 1.0 + sym(cfg.max_scale),
            intensity_scale: 1.0 + sym(cfg.max_intensity_scale),
            intensity_offset: sym(cfg.max_intensity_offset),
        }
    }
}

/// Copies the `size x size` window centred on `center`; the window must lie inside `img`.
pub fn extract_patch(img: &Array2<f32>, center: (usize, usize), size: usize) -> Array2<f32> {
    let h = size / 2;
    img.slice(ndarray::s![center.0 - h..center.0 - h + size, center.1 - h..center.1 - h + size]).to_owned()
}

/// Bilinear resampling of a jittered window.
fn jittered_patch(img: &Array2<f32>, center: (usize, usize), size: usize, j: &Jitter) -> Array2<f32> {
    let (hgt, wid) = img.dim();
    let half = (size / 2) as f64;
    let at = |y: isize, x: isize| f64::from(img[[y.clamp(0, hgt as isize - 1) as usize, x.clamp(0, wid as isize - 1) as usize]]);
    Array2::from_shape_fn((size, size), |(a, b)| {
        let sy = center.0 as f64 + j.shift.0 + (a as f64 - half) * j.scale;
        let sx = center.1 as f64 + j.shift.1 + (b as f64 - half) * j.scale;
        let (y0, x0) = (sy.floor(), sx.floor());
        let (fy, fx) = (sy - y0, sx - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let mut v = at(y0, x0) * (1.0 - fy) * (1.0 - fx);
        if fx != 0.0 {
            v += at(y0, x0 + 1) * (1.0 - fy) * fx;
        }
        if fy != 0.0 {
            v += at(y0 + 1, x0) * fy * (1.0 - fx);
            if fx != 0.0 {
                v += at(y0 + 1, x0 + 1) * fy * fx;
            }
        }
        (v * j.intensity_scale + j.intensity_offset).clamp(-1.0, 1.0) as f32
    })
}

/// Window centres inside the body region whose jittered windows stay inside the slice.
pub fn valid_centers(s: &Slice, cfg: &TripletConfig) -> Vec<(usize, usize)> {
    let (h, w) = s.data.dim();
    let m = cfg.margin();
    if h <= 2 * m || w <= 2 * m {
        return Vec::new();
    }
    let mut out = Vec::new();
    for i in m..h - m {
        for j in m..w - m {
            if s.data[[i, j]] > cfg.body_threshold {
                out.push((i, j));
            }
        }
    }
    out
}

fn far_enough(a: (usize, usize), b: (usize, usize), d: f64) -> bool {
    let dy = a.0 as f64 - b.0 as f64;
    let dx = a.1 as f64 - b.1 as f64;
    dy * dy + dx * dx >= d * d
}

/// Builds a triplet from explicit choices; used by [`sample_triplet`].
pub fn triplet_from(s: &Slice, cfg: &TripletConfig, anchor: (usize, usize), jitter: &Jitter, negative: (usize, usize)) -> Triplet {
    let p = cfg.patch_size;
    let patch = |data, center| Patch { data, center, source: s.source_id.clone() };
    Triplet {
        anchor: patch(extract_patch(&s.data, anchor, p), anchor),
        positive: patch(jittered_patch(&s.data, anchor, p, jitter), anchor),
        negative: patch(extract_patch(&s.data, negative, p), negative),
    }
}

/// Anchor uniform over the valid body region, positive a jittered copy, negative uniform over
/// valid centres at least `min_negative_distance` away from the anchor.
pub fn sample_triplet<R: Rng + ?Sized>(s: &Slice, cfg: &TripletConfig, rng: &mut R) -> Result<Triplet> {
    let centers = valid_centers(s, cfg);
    if centers.is_empty() {
        return Err(degenerate(format!("slice {}:{} has no body region for patches", s.source_id, s.index_k)));
    }
    let anchor = centers[rng.random_range(0..centers.len())];
    let jitter = Jitter::sample(cfg, rng);
    let candidates: Vec<(usize, usize)> =
        centers.iter().copied().filter(|c| far_enough(*c, anchor, cfg.min_negative_distance)).collect();
    if candidates.is_empty() {
        return Err(degenerate("body region too small for a distant negative"));
    }
    let negative = candidates[rng.random_range(0..candidates.len())];
    Ok(triplet_from(s, cfg, anchor, &jitter, negative))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn disc_slice() -> Slice {
        let data = Array2::from_shape_fn((40, 40), |(i, j)| {
            let r = ((i as f64 - 20.0).powi(2) + (j as f64 - 20.0).powi(2)).sqrt();
            if r < 16.0 { ((i * j) as f32 * 0.1).sin() * 0.5 } else { -1.0 }
        });
        Slice { data, source_id: "s".into(), index_k: 0 }
    }

    #[test]
    fn zero_jitter_positive_equals_anchor() {
        let s = disc_slice();
        let cfg = TripletConfig::with_patch_size(8);
        let t = triplet_from(&s, &cfg, (20, 20), &Jitter::NONE, (10, 12));
        assert_eq!(t.anchor.data, t.positive.data);
        assert_eq!(t.negative.center, (10, 12));
        let shifted = Jitter { shift: (1.0, -2.0), ..Jitter::NONE };
        let t2 = triplet_from(&s, &cfg, (20, 20), &shifted, (10, 12));
        assert_eq!(t2.positive.data, extract_patch(&s.data, (21, 18), 8));
    }

    #[test]
    fn sampling_is_deterministic_and_respects_constraints() {
        let s = disc_slice();
        let cfg = TripletConfig::with_patch_size(8);
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let t = sample_triplet(&s, &cfg, &mut a).unwrap();
            assert_eq!(t, sample_triplet(&s, &cfg, &mut b).unwrap());
            assert!(far_enough(t.anchor.center, t.negative.center, 8.0));
            assert!(s.data[t.anchor.center] > cfg.body_threshold);
            assert!(t.positive.data.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn empty_body_is_degenerate() {
        let s = Slice { data: Array2::from_elem((40, 40), -1.0), source_id: "e".into(), index_k: 0 };
        let cfg = TripletConfig::with_patch_size(8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(sample_triplet(&s, &cfg, &mut rng), Err(crate::Error::DegenerateInput(_))));
    }
}
