//! Procedural head phantoms with known anatomy and injected abnormalities.

use std::collections::BTreeMap;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::volume::{anatomy_key, LabelVolume, Volume, ABNORMALITY_CLASSES, ANATOMY_CLASSES};

const SKULL: f64 = 1.0;
const BRAIN: f64 = 0.55;
const VENTRICLE: f64 = 0.15;
const EYE: f64 = 0.8;
const SOFT_TISSUE: f64 = 0.45;
const MIN_BODY: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbnormalityClass {
    /// Bright enhancing blob inside the brain.
    MetastaticTumor,
    /// Mass sitting on the skull, partly outside the head outline.
    ExtracranialTumor,
    /// Fluid-filled (dark) hole in the brain.
    Cavity,
    /// Mild intensity change with local mass effect.
    StructuralChange,
}

impl AbnormalityClass {
    pub const ALL: [AbnormalityClass; 4] =
        [Self::MetastaticTumor, Self::ExtracranialTumor, Self::Cavity, Self::StructuralChange];

    pub fn key(self) -> &'static str {
        ABNORMALITY_CLASSES[self as usize]
    }

    pub fn from_key(key: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.key() == key)
    }

    pub fn default_offset_range(self) -> (f64, f64) {
        match self {
            Self::MetastaticTumor => (0.3, 0.45),
            Self::ExtracranialTumor => (0.25, 0.4),
            Self::Cavity => (-0.45, -0.35),
            Self::StructuralChange => (-0.25, -0.15),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyConfig {
    pub class: AbnormalityClass,
    pub count_range: (usize, usize),
    /// Radius in millimetres.
    pub radius_range: (f64, f64),
    /// Added to the tissue intensity inside the lesion (unit: brain intensity is 0.55).
    pub intensity_offset_range: (f64, f64),
    /// Peak outward displacement of surrounding anatomy, millimetres.
    pub deformation_amplitude: f64,
}

impl AnomalyConfig {
    pub fn new(class: AbnormalityClass, count_range: (usize, usize), radius_range: (f64, f64)) -> Self {
        let deformation_amplitude = if class == AbnormalityClass::StructuralChange { 2.0 } else { 0.0 };
        Self { class, count_range, radius_range, intensity_offset_range: class.default_offset_range(), deformation_amplitude }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    /// Voxel grid `(K, I, J)`.
    pub shape: [usize; 3],
    /// Voxel spacing `(dz, dy, dx)` in millimetres.
    pub spacing: [f64; 3],
    /// Semi-axes of the head ellipsoid `(z, y, x)` in millimetres.
    pub head_axes: [f64; 3],
    /// Relative per-axis jitter of the head size.
    pub axis_jitter: f64,
    /// In-plane jitter of the head centre, millimetres.
    pub center_jitter: f64,
    pub skull_thickness: f64,
    pub ventricle_axes: [f64; 3],
    pub eye_radius: f64,
    /// Relative amplitude of the smooth multiplicative texture.
    pub texture_noise_scale: f64,
    /// Standard deviation of additive white noise inside the body.
    pub voxel_noise: f64,
    /// Global intensity gain (scanner scaling) drawn per phantom.
    pub gain_range: (f64, f64),
    pub anomaly: Option<AnomalyConfig>,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            shape: [12, 64, 64],
            spacing: [2.0, 1.0, 1.0],
            head_axes: [17.0, 27.0, 22.0],
            axis_jitter: 0.06,
            center_jitter: 1.5,
            skull_thickness: 3.0,
            ventricle_axes: [5.0, 9.0, 2.5],
            eye_radius: 4.5,
            texture_noise_scale: 0.06,
            voxel_noise: 0.02,
            gain_range: (700.0, 1300.0),
            anomaly: None,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |r: (f64, f64)| r.0.is_finite() && r.1.is_finite() && r.0 <= r.1;
        if self.shape.contains(&0) {
            return Err(invalid("phantom shape must be non-zero"));
        }
        if self.spacing.iter().chain(&self.head_axes).chain(&self.ventricle_axes).any(|v| !(*v > 0.0)) {
            return Err(invalid("phantom spacing and axes must be positive"));
        }
        if !(self.skull_thickness > 0.0) || self.skull_thickness * 2.0 >= self.head_axes.iter().copied().fold(f64::INFINITY, f64::min) {
            return Err(invalid("skull thickness must be positive and smaller than the head"));
        }
        if !range_ok(self.gain_range) || !(self.gain_range.0 > 0.0) {
            return Err(invalid("gain range must be a non-empty positive range"));
        }
        if let Some(a) = &self.anomaly {
            if a.count_range.0 > a.count_range.1 || !range_ok(a.radius_range) || !range_ok(a.intensity_offset_range) {
                return Err(invalid("anomaly ranges must be non-empty"));
            }
            if !(a.radius_range.0 > 0.0) {
                return Err(invalid("anomaly radius must be positive"));
            }
            let brain_min = self.brain_axes(&self.head_axes).iter().copied().fold(f64::INFINITY, f64::min);
            if a.radius_range.1 * 2.0 >= brain_min {
                return Err(invalid(format!(
                    "anomaly radius {} mm does not fit in the brain region (smallest semi-axis {brain_min:.1} mm)",
                    a.radius_range.1
                )));
            }
        }
        Ok(())
    }

    fn brain_axes(&self, head: &[f64; 3]) -> [f64; 3] {
        head.map(|a| a - self.skull_thickness)
    }
}

/// One injected lesion, recorded in dataset manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalySummary {
    pub class: AbnormalityClass,
    /// Centre in voxel coordinates `(k, i, j)`.
    pub center_voxel: [f64; 3],
    pub radius_mm: f64,
    pub intensity_offset: f64,
    pub voxels: usize,
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub volume: Volume,
    pub labels: LabelVolume,
    pub anomalies: Vec<AnomalySummary>,
}

struct Wave {
    k: [f64; 3],
    phase: f64,
}

struct Lesion {
    class: AbnormalityClass,
    center: [f64; 3],
    radius: f64,
    offset: f64,
    deformation: f64,
}

struct Anatomy {
    head: [f64; 3],
    brain: [f64; 3],
    ventricles: [[f64; 3]; 2],
    ventricle_axes: [f64; 3],
    eyes: [[f64; 3]; 2],
    eye_radius: f64,
}

fn ellipsoid_r2(p: [f64; 3], c: [f64; 3], a: [f64; 3]) -> f64 {
    (0..3).map(|i| ((p[i] - c[i]) / a[i]).powi(2)).sum()
}

fn dist(p: [f64; 3], c: [f64; 3]) -> f64 {
    (0..3).map(|i| (p[i] - c[i]).powi(2)).sum::<f64>().sqrt()
}

impl Anatomy {
    /// Anatomy class index at point `p` (millimetres, head-centred).
    fn classify(&self, p: [f64; 3]) -> u8 {
        for (e, c) in self.eyes.iter().enumerate() {
            if dist(p, *c) <= self.eye_radius {
                return 4 + e as u8;
            }
        }
        if ellipsoid_r2(p, [0.0; 3], self.head) > 1.0 {
            return 0;
        }
        if ellipsoid_r2(p, [0.0; 3], self.brain) > 1.0 {
            return 1;
        }
        if self.ventricles.iter().any(|c| ellipsoid_r2(p, *c, self.ventricle_axes) <= 1.0) {
            return 3;
        }
        2
    }
}

fn base_intensity(class: u8) -> f64 {
    match class {
        1 => SKULL,
        2 => BRAIN,
        3 => VENTRICLE,
        4 | 5 => EYE,
        _ => 0.0,
    }
}

fn bump(t: f64) -> f64 {
    if t >= 1.0 {
        0.0
    } else {
        (1.0 - t * t).powi(2)
    }
}

/// Generates a phantom; a pure function of `cfg`.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<Phantom> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut jitter = |a: f64| a * (1.0 + rng.random_range(-cfg.axis_jitter..=cfg.axis_jitter));
    let head = [jitter(cfg.head_axes[0]), jitter(cfg.head_axes[1]), jitter(cfg.head_axes[2])];
    let brain = cfg.brain_axes(&head);
    let shift = [
        0.0,
        rng.random_range(-cfg.center_jitter..=cfg.center_jitter),
        rng.random_range(-cfg.center_jitter..=cfg.center_jitter),
    ];
    let vent_scale = rng.random_range(0.85..=1.15);
    let vx = 0.22 * head[2];
    let anatomy = Anatomy {
        head,
        brain,
        ventricles: [[0.1 * head[0], -0.05 * head[1], -vx], [0.1 * head[0], -0.05 * head[1], vx]],
        ventricle_axes: cfg.ventricle_axes.map(|a| a * vent_scale),
        eyes: [
            [-0.55 * head[0], -(head[1] - 0.3 * cfg.eye_radius), 0.38 * head[2]],
            [-0.55 * head[0], -(head[1] - 0.3 * cfg.eye_radius), -0.38 * head[2]],
        ],
        eye_radius: cfg.eye_radius,
    };
    let gain = rng.random_range(cfg.gain_range.0..=cfg.gain_range.1);
    let waves: Vec<Wave> = (0..8)
        .map(|_| {
            let len = rng.random_range(5.0..=14.0);
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let phi = rng.random_range(-1.0f64..=1.0).acos();
            let m = std::f64::consts::TAU / len;
            Wave {
                k: [m * phi.cos(), m * phi.sin() * theta.sin(), m * phi.sin() * theta.cos()],
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect();
    let texture = |p: [f64; 3]| -> f64 {
        let s: f64 = waves.iter().map(|w| (w.k[0] * p[0] + w.k[1] * p[1] + w.k[2] * p[2] + w.phase).cos()).sum();
        cfg.texture_noise_scale * s / (waves.len() as f64 / 2.0).sqrt()
    };

    let [nk, ni, nj] = cfg.shape;
    let extent = [nk as f64 * cfg.spacing[0], ni as f64 * cfg.spacing[1], nj as f64 * cfg.spacing[2]];
    let to_mm = |k: usize, i: usize, j: usize| -> [f64; 3] {
        [
            (k as f64 + 0.5) * cfg.spacing[0] - extent[0] / 2.0 - shift[0],
            (i as f64 + 0.5) * cfg.spacing[1] - extent[1] / 2.0 - shift[1],
            (j as f64 + 0.5) * cfg.spacing[2] - extent[2] / 2.0 - shift[2],
        ]
    };
    let to_voxel = |p: [f64; 3]| -> [f64; 3] {
        [
            (p[0] + shift[0] + extent[0] / 2.0) / cfg.spacing[0] - 0.5,
            (p[1] + shift[1] + extent[1] / 2.0) / cfg.spacing[1] - 0.5,
            (p[2] + shift[2] + extent[2] / 2.0) / cfg.spacing[2] - 0.5,
        ]
    };

    let lesions = match &cfg.anomaly {
        Some(a) => place_lesions(a, &anatomy, extent[0] / 2.0, &mut rng)?,
        None => Vec::new(),
    };

    let mut data = Array3::<f32>::zeros((nk, ni, nj));
    let mut anatomy_map = Array3::<u8>::zeros((nk, ni, nj));
    let mut lesion_masks: Vec<Array3<u8>> = lesions.iter().map(|_| Array3::zeros((nk, ni, nj))).collect();
    for k in 0..nk {
        for i in 0..ni {
            for j in 0..nj {
                let p = to_mm(k, i, j);
                let mut q = p;
                for l in lesions.iter().filter(|l| l.deformation > 0.0) {
                    let r = dist(p, l.center);
                    if r > 1e-9 {
                        let d = l.deformation * bump(r / (2.5 * l.radius));
                        for a in 0..3 {
                            q[a] -= d * (p[a] - l.center[a]) / r;
                        }
                    }
                }
                let class = anatomy.classify(q);
                anatomy_map[[k, i, j]] = class;
                let mut value = base_intensity(class);
                for (li, l) in lesions.iter().enumerate() {
                    if dist(p, l.center) <= l.radius {
                        lesion_masks[li][[k, i, j]] = 1;
                        value = match l.class {
                            AbnormalityClass::ExtracranialTumor => SOFT_TISSUE + l.offset,
                            _ => value + l.offset,
                        };
                    }
                }
                if value > 0.0 {
                    let noisy: f64 = value * (1.0 + texture(p)) + cfg.voxel_noise * {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z
                    };
                    data[[k, i, j]] = (noisy.max(MIN_BODY) * gain) as f32;
                }
            }
        }
    }

    let mut masks = BTreeMap::new();
    for class in AbnormalityClass::ALL {
        let mut m = Array3::<u8>::zeros((nk, ni, nj));
        for (l, lm) in lesions.iter().zip(&lesion_masks) {
            if l.class == class {
                ndarray::Zip::from(&mut m).and(lm).for_each(|o, &v| *o |= v);
            }
        }
        masks.insert(class.key().to_string(), m);
    }
    for (idx, class) in ANATOMY_CLASSES.iter().enumerate() {
        masks.insert(anatomy_key(class), anatomy_map.mapv(|c| u8::from(c as usize == idx)));
    }
    let anomalies = lesions
        .iter()
        .zip(&lesion_masks)
        .map(|(l, m)| AnomalySummary {
            class: l.class,
            center_voxel: to_voxel(l.center),
            radius_mm: l.radius,
            intensity_offset: l.offset,
            voxels: m.iter().filter(|v| **v != 0).count(),
        })
        .collect();
    Ok(Phantom {
        volume: Volume::new(data, cfg.spacing, format!("phantom-{}", cfg.seed))?,
        labels: LabelVolume { masks },
        anomalies,
    })
}

fn place_lesions(a: &AnomalyConfig, anat: &Anatomy, half_depth: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Lesion>> {
    let count = rng.random_range(a.count_range.0..=a.count_range.1);
    let mut out: Vec<Lesion> = Vec::with_capacity(count);
    for _ in 0..count {
        let radius = rng.random_range(a.radius_range.0..=a.radius_range.1);
        let offset = rng.random_range(a.intensity_offset_range.0..=a.intensity_offset_range.1);
        let z_lim = (half_depth - radius * 0.5).max(0.0);
        let mut placed = None;
        for _ in 0..10_000 {
            let c = match a.class {
                AbnormalityClass::ExtracranialTumor => {
                    // on the skull shell, away from the eyes
                    let theta = rng.random_range(0.0..std::f64::consts::TAU);
                    let z = rng.random_range(-z_lim..=z_lim).clamp(-0.6 * anat.head[0], 0.6 * anat.head[0]);
                    let ring = (1.0 - (z / anat.head[0]).powi(2)).max(0.0).sqrt();
                    let shell = 1.0 - 0.5 * (anat.head[1] - anat.brain[1]) / anat.head[1];
                    [z, anat.head[1] * ring * shell * theta.sin(), anat.head[2] * ring * shell * theta.cos()]
                }
                _ => [
                    rng.random_range(-z_lim..=z_lim),
                    rng.random_range(-anat.brain[1]..=anat.brain[1]),
                    rng.random_range(-anat.brain[2]..=anat.brain[2]),
                ],
            };
            if c[0].abs() > z_lim {
                continue;
            }
            let clear_of_others = out.iter().all(|l| dist(c, l.center) > l.radius + radius + 2.0);
            let clear_of_eyes = anat.eyes.iter().all(|e| dist(c, *e) > anat.eye_radius + radius + 1.0);
            let ok = match a.class {
                AbnormalityClass::ExtracranialTumor => clear_of_eyes,
                _ => {
                    let margin = (radius + 1.5) / anat.brain.iter().copied().fold(f64::INFINITY, f64::min);
                    let inside = ellipsoid_r2(c, [0.0; 3], anat.brain).sqrt() <= 1.0 - margin;
                    let grown = anat.ventricle_axes.map(|v| v + radius + 1.5);
                    let clear_of_ventricles = anat.ventricles.iter().all(|v| ellipsoid_r2(c, *v, grown) > 1.0);
                    inside && clear_of_ventricles && clear_of_eyes
                }
            };
            if ok && clear_of_others {
                placed = Some(c);
                break;
            }
        }
        let center = placed.ok_or_else(|| invalid("could not place anomaly inside the phantom anatomy"))?;
        out.push(Lesion { class: a.class, center, radius, offset, deformation: a.deformation_amplitude });
    }
    Ok(out)
}

/// Ground-truth body region: any voxel with anatomy or lesion.
pub fn true_body_mask(labels: &LabelVolume) -> Option<Array3<u8>> {
    let bg = labels.mask(&anatomy_key(ANATOMY_CLASSES[0]))?;
    let mut body = bg.mapv(|v| 1 - v);
    for class in ABNORMALITY_CLASSES {
        if let Some(m) = labels.mask(class) {
            ndarray::Zip::from(&mut body).and(m).for_each(|b, &v| *b |= v);
        }
    }
    Some(body)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_anomaly(class: AbnormalityClass, radius: f64, offset: f64) -> PhantomConfig {
        let mut a = AnomalyConfig::new(class, (1, 1), (radius, radius));
        a.intensity_offset_range = (offset, offset);
        PhantomConfig {
            shape: [24, 64, 64],
            spacing: [1.0, 1.0, 1.0],
            gain_range: (1.0, 1.0),
            anomaly: Some(a),
            seed: 11,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn normal_phantom_has_empty_abnormality_masks() {
        let p = generate_phantom(&PhantomConfig { seed: 3, ..PhantomConfig::default() }).unwrap();
        for class in ABNORMALITY_CLASSES {
            assert!(p.labels.mask(class).unwrap().iter().all(|v| *v == 0));
        }
        assert!(p.anomalies.is_empty());
        p.labels.validate(p.volume.shape()).unwrap();
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = with_anomaly(AbnormalityClass::MetastaticTumor, 4.0, 0.4);
        let a = generate_phantom(&cfg).unwrap();
        let b = generate_phantom(&cfg).unwrap();
        assert_eq!(a.volume, b.volume);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn background_is_exactly_zero_and_body_is_positive() {
        let p = generate_phantom(&PhantomConfig { seed: 4, ..PhantomConfig::default() }).unwrap();
        let body = true_body_mask(&p.labels).unwrap();
        ndarray::Zip::from(&p.volume.data).and(&body).for_each(|v, b| {
            if *b == 0 {
                assert_eq!(*v, 0.0);
            } else {
                assert!(*v > 0.0);
            }
        });
    }

    #[test]
    fn oversized_anomaly_is_rejected() {
        let cfg = with_anomaly(AbnormalityClass::MetastaticTumor, 15.0, 0.4);
        assert!(matches!(generate_phantom(&cfg), Err(crate::Error::InvalidArgument(_))));
    }

    #[test]
    fn every_class_places_a_visible_lesion() {
        for class in AbnormalityClass::ALL {
            let p = generate_phantom(&with_anomaly(class, 3.0, 0.3)).unwrap();
            assert_eq!(p.anomalies.len(), 1);
            assert!(p.anomalies[0].voxels > 20, "{class:?} has {} voxels", p.anomalies[0].voxels);
            assert!(p.labels.mask(class.key()).unwrap().iter().any(|v| *v == 1));
        }
    }
}
