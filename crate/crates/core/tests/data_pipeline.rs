use anomaly_recon_core::data_pipeline::*;
use anomaly_recon_core::volume::{anatomy_key, Volume};
use ndarray::{Array2, Array3};
use proptest::prelude::*;

/// Direct (non-separable) evaluation of the clamped-edge cubic interpolant.
fn dense_cubic(src: &Array3<f32>, at: [f64; 3]) -> f64 {
    let dims = src.shape().to_vec();
    let base: Vec<i64> = at.iter().map(|c| c.floor() as i64).collect();
    let mut acc = 0.0;
    for dk in -1..=2 {
        for di in -1..=2 {
            for dj in -1..=2 {
                let n = [base[0] + dk, base[1] + di, base[2] + dj];
                let w: f64 = (0..3).map(|a| cubic_kernel(at[a] - n[a] as f64)).product();
                let idx: Vec<usize> = (0..3).map(|a| n[a].clamp(0, dims[a] as i64 - 1) as usize).collect();
                acc += w * f64::from(src[[idx[0], idx[1], idx[2]]]);
            }
        }
    }
    acc
}

#[test]
fn ramp_resample_matches_dense_cubic_oracle() {
    let src = Array3::from_shape_fn((8, 8, 8), |(k, i, j)| (0.5 * k as f64 + 1.5 * i as f64 - 0.75 * j as f64) as f32);
    let v = Volume::new(src.clone(), [1.0; 3], "ramp").unwrap();
    let out = resample_volume(&v, [0.5; 3]).unwrap();
    assert_eq!(out.spacing, [0.5; 3]);
    let [nk, ni, nj] = out.shape();
    let mut worst = 0.0f64;
    for k in 0..nk {
        for i in 0..ni {
            for j in 0..nj {
                let at = [source_coord(k, 1.0, 0.5), source_coord(i, 1.0, 0.5), source_coord(j, 1.0, 0.5)];
                let want = dense_cubic(&src, at);
                worst = worst.max((f64::from(out.data[[k, i, j]]) - want).abs());
            }
        }
    }
    assert!(worst < 1e-6, "max deviation {worst}");
}

fn phantom_volume(seed: u64) -> Volume {
    generate_phantom(&PhantomConfig { seed, ..PhantomConfig::default() }).unwrap().volume
}

#[test]
fn matched_phantom_cdf_is_close_to_template() {
    let train: Vec<Volume> = (0..4).map(phantom_volume).collect();
    let template = IntensityTemplate::from_volumes(&train.iter().collect::<Vec<_>>(), 1001).unwrap();
    let matched = histogram_match(&phantom_volume(99), &template).unwrap();
    let mut fg: Vec<f64> = matched.data.iter().filter(|v| **v > 0.0).map(|v| f64::from(*v)).collect();
    fg.sort_by(f64::total_cmp);
    let n = fg.len() as f64;
    let mut sup = 0.0f64;
    for (idx, x) in fg.iter().enumerate() {
        // both one-sided limits of the empirical CDF at x
        let below = idx as f64 / n;
        let at = fg.partition_point(|v| v <= x) as f64 / n;
        let g = template.cdf(*x);
        sup = sup.max((g - below).abs()).max((g - at).abs());
    }
    assert!(sup < 0.02, "sup distance {sup}");
}

#[test]
fn matched_brain_peak_lands_near_midpoint() {
    let train: Vec<Volume> = (0..4).map(phantom_volume).collect();
    let template = IntensityTemplate::from_volumes(&train.iter().collect::<Vec<_>>(), 1001).unwrap();
    let p = generate_phantom(&PhantomConfig { seed: 42, ..PhantomConfig::default() }).unwrap();
    let matched = histogram_match(&p.volume, &template).unwrap();
    let brain = p.labels.mask(&anatomy_key("brain_analog")).unwrap();
    let mut values: Vec<f64> = matched
        .data
        .iter()
        .zip(brain.iter())
        .filter(|(_, m)| **m == 1)
        .map(|(v, _)| f64::from(*v))
        .collect();
    values.sort_by(f64::total_cmp);
    let median = values[values.len() / 2];
    assert!((median - 0.5).abs() <= 0.025, "brain median {median}");
    let mode = foreground_mode(&matched, 64).unwrap();
    assert!((mode - 0.5).abs() <= 0.025, "foreground mode {mode}");
}

#[test]
fn lesion_offset_is_visible_in_mask_statistics() {
    let mut anomaly = AnomalyConfig::new(AbnormalityClass::MetastaticTumor, (1, 1), (5.0, 5.0));
    anomaly.intensity_offset_range = (0.5, 0.5);
    let cfg = PhantomConfig {
        shape: [32, 64, 64],
        spacing: [1.0; 3],
        head_axes: [26.0, 28.0, 24.0],
        gain_range: (1.0, 1.0),
        anomaly: Some(anomaly),
        seed: 8,
        ..PhantomConfig::default()
    };
    let p = generate_phantom(&cfg).unwrap();
    let mask = p.labels.mask(AbnormalityClass::MetastaticTumor.key()).unwrap();
    let brain = p.labels.mask(&anatomy_key("brain_analog")).unwrap();
    let c = p.anomalies[0].center_voxel;
    let (mut inside, mut ni, mut shell, mut ns) = (0.0, 0.0, 0.0, 0.0);
    for ((k, i, j), v) in p.volume.data.indexed_iter() {
        let r = ((k as f64 - c[0]).powi(2) + (i as f64 - c[1]).powi(2) + (j as f64 - c[2]).powi(2)).sqrt();
        if mask[[k, i, j]] == 1 {
            inside += f64::from(*v);
            ni += 1.0;
        } else if r <= 8.0 && brain[[k, i, j]] == 1 {
            shell += f64::from(*v);
            ns += 1.0;
        }
    }
    let diff = inside / ni - shell / ns;
    assert!((diff - 0.5).abs() < 0.05, "mean difference {diff}");
}

proptest! {
    #[test]
    fn renormalize_is_affine_and_idempotent(vals in prop::collection::vec(-1e3f32..1e3, 16)) {
        let a = Array2::from_shape_vec((4, 4), vals).unwrap();
        let lo = a.iter().copied().fold(f32::INFINITY, f32::min) as f64;
        let hi = a.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        prop_assume!(hi > lo);
        let once = renormalize(&a).unwrap();
        for (o, x) in once.iter().zip(a.iter()) {
            let want = (f64::from(*x) - lo) / (hi - lo) * 2.0 - 1.0;
            prop_assert!((f64::from(*o) - want).abs() < 1e-6);
        }
        let twice = renormalize(&once).unwrap();
        for (a, b) in once.iter().zip(twice.iter()) {
            prop_assert!((f64::from(*a) - f64::from(*b)).abs() <= 1e-12);
        }
    }

    #[test]
    fn augmentation_stays_in_range(seed in 0u64..200) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = Array2::from_shape_fn((16, 16), |(i, j)| (((i * 7 + j * 3) % 11) as f32 / 5.0) - 1.0);
        let s = anomaly_recon_core::volume::Slice { data, source_id: "t".into(), index_k: 0 };
        let out = augment(&s, &mut rng);
        prop_assert_eq!(out.data.dim(), (16, 16));
        prop_assert!(out.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
