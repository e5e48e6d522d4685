use std::collections::BTreeMap;

use anomaly_recon_core::data_pipeline::*;
use anomaly_recon_core::discriminative::*;
use anomaly_recon_core::scoring::*;
use anomaly_recon_core::volume::{Slice, Volume};
use anomaly_recon_core::Error;
use ndarray::{Array1, Array2, Array3};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn roc(scores: &Array1<f64>, pos: &Array1<u8>) -> RocResult {
    let m = Array1::from_elem(scores.len(), 1u8);
    let labels = BTreeMap::from([("lesion".to_string(), pos.view())]);
    evaluate_detection(scores.view(), &labels, m.view()).unwrap()
}

/// Tie-corrected Mann-Whitney estimate of `P(score_pos > score_neg)`.
fn mann_whitney(scores: &[f64], pos: &[u8]) -> f64 {
    let (mut u, mut n1, mut n0) = (0.0, 0.0, 0.0);
    for (i, &a) in scores.iter().enumerate() {
        if pos[i] == 0 {
            n0 += 1.0;
            continue;
        }
        n1 += 1.0;
        for (j, &b) in scores.iter().enumerate() {
            if pos[j] == 0 {
                u += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
            }
        }
    }
    u / (n1 * n0)
}

#[test]
fn auc_matches_mann_whitney() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos = Array1::from_shape_fn(200, |_| u8::from(rng.random_bool(0.3)));
        // coarse rounding produces ties
        let scores = Array1::from_shape_fn(200, |i| ((rng.random_range(0.0..1.0) + 0.4 * f64::from(pos[i])) * 20.0).round());
        let r = roc(&scores, &pos);
        let want = mann_whitney(scores.as_slice().unwrap(), pos.as_slice().unwrap());
        let got = r.auc("lesion").unwrap();
        assert!((got - want).abs() <= 1e-3, "seed {seed}: {got} vs {want}");
        assert_eq!(r.thresholds.len(), 1000);
    }
}

proptest! {
    #[test]
    fn auc_is_invariant_under_increasing_transforms(seed in 0u64..500, a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos = Array1::from_shape_fn(150, |_| u8::from(rng.random_bool(0.4)));
        let scores = Array1::from_shape_fn(150, |i| rng.random_range(0.0..1.0) + 0.3 * f64::from(pos[i]));
        let base = roc(&scores, &pos).auc("lesion").unwrap();
        let affine = roc(&scores.mapv(|v| a * v + b), &pos).auc("lesion").unwrap();
        let exp = roc(&scores.mapv(f64::exp), &pos).auc("lesion").unwrap();
        prop_assert!((base - affine).abs() < 1e-12);
        prop_assert!((base - exp).abs() < 1e-12);
    }

    #[test]
    fn rates_do_not_increase_with_threshold(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos = Array1::from_shape_fn(120, |_| u8::from(rng.random_bool(0.2)));
        let scores = Array1::from_shape_fn(120, |_| rng.random_range(-3.0..3.0));
        let r = roc(&scores, &pos);
        let c = r.classes["lesion"].as_ref().unwrap();
        for w in 0..r.thresholds.len() - 1 {
            prop_assert!(r.thresholds[w] <= r.thresholds[w + 1]);
            prop_assert!(r.fpr[w] >= r.fpr[w + 1] && c.tpr[w] >= c.tpr[w + 1]);
        }
        prop_assert!((0.0..=1.0).contains(&c.auc));
    }

    #[test]
    fn zscore_is_idempotent(vals in prop::collection::vec(-100.0f64..100.0, 12..40)) {
        let n = vals.len();
        let m = Array2::from_shape_vec((1, n), vals).unwrap();
        prop_assume!(m.iter().any(|v| (v - m[[0, 0]]).abs() > 1e-3));
        let region = Array2::from_shape_fn((1, n), |(_, j)| j % 5 != 0);
        prop_assume!(m.indexed_iter().filter(|(i, _)| region[*i]).any(|(_, v)| (v - m[[0, 1]]).abs() > 1e-3));
        for r in [None, Some(&region)] {
            let once = zscore_normalize(&m, r).unwrap();
            let twice = zscore_normalize(&once, r).unwrap();
            prop_assert!(once.iter().zip(twice.iter()).all(|(a, b)| (a - b).abs() < 1e-9));
        }
    }
}

#[test]
fn body_mask_rectification_never_lowers_fpr() {
    // background voxels carry the minimum score, as z-scored maps do outside the body
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let body = Array1::from_shape_fn(400, |i| u8::from(i >= 150));
    let pos = Array1::from_shape_fn(400, |i| u8::from(i >= 150 && rng.random_bool(0.15)));
    let scores = Array1::from_shape_fn(400, |i| if body[i] == 0 { -2.0 } else { rng.random_range(-1.0..1.0) + f64::from(pos[i]) });
    let labels = BTreeMap::from([("lesion".to_string(), pos.view())]);
    let full = evaluate_detection(scores.view(), &labels, Array1::from_elem(400, 1u8).view()).unwrap();
    let masked = evaluate_detection(scores.view(), &labels, body.view()).unwrap();
    for &t in &masked.thresholds {
        let at = |r: &RocResult| r.fpr[r.thresholds.partition_point(|v| *v < t).min(r.thresholds.len() - 1)];
        if full.thresholds.iter().any(|v| *v == t) {
            assert!(at(&masked) >= at(&full));
        }
    }
    assert!(full.auc("lesion").unwrap() >= masked.auc("lesion").unwrap());
}

#[test]
fn zscore_arithmetic_and_statistics() {
    let m = Array2::from_shape_vec((1, 3), vec![1.0, 2.0, 3.0]).unwrap();
    let z = zscore_normalize(&m, None).unwrap();
    for (a, b) in z.iter().zip([-1.2247, 0.0, 1.2247]) {
        assert!((a - b).abs() < 1e-4);
    }
    let unit = Array2::from_shape_vec((1, 2), vec![-1.0, 1.0]).unwrap();
    assert!(zscore_normalize(&unit, None).unwrap().iter().zip(unit.iter()).all(|(a, b)| (a - b).abs() < 1e-9));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let r = Array2::from_shape_fn((30, 30), |_| rng.random_range(-4.0..9.0f64).powi(3));
    let region = Array2::from_shape_fn((30, 30), |(i, j)| (i + j) % 3 != 0);
    let z = zscore_normalize(&r, Some(&region)).unwrap();
    let inside: Vec<f64> = z.indexed_iter().filter(|(i, _)| region[*i]).map(|(_, v)| *v).collect();
    let n = inside.len() as f64;
    let mean = inside.iter().sum::<f64>() / n;
    let sd = (inside.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 1e-9 && (sd - 1.0).abs() < 1e-9);
    let lowest = inside.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(z.indexed_iter().filter(|(i, _)| !region[*i]).all(|(_, v)| *v == lowest));
    assert!(matches!(zscore_normalize(&Array2::from_elem((3, 3), 2.0), None), Err(Error::DegenerateInput(_))));
}

fn matched_phantom(seed: u64) -> (Volume, Array3<u8>) {
    let ph = generate_phantom(&PhantomConfig { seed, ..PhantomConfig::default() }).unwrap();
    let template = IntensityTemplate::from_volumes(&[&ph.volume], 1001).unwrap();
    let truth = true_body_mask(&ph.labels).unwrap();
    (histogram_match(&ph.volume, &template).unwrap(), truth)
}

#[test]
fn body_mask_matches_generator_truth() {
    for seed in [1, 7, 23] {
        let (v, truth) = matched_phantom(seed);
        let m = body_mask(&v).unwrap();
        let iou = mask_iou(&m, &truth).unwrap();
        assert!(iou >= 0.98, "seed {seed}: IoU {iou}");
        assert_eq!(topology(&m), (1, 0));
    }
    let empty = Volume::new(Array3::zeros((3, 8, 8)), [1.0; 3], "empty").unwrap();
    assert!(matches!(body_mask(&empty), Err(Error::DegenerateInput(_))));
}

fn score_maps(depth: usize) -> (Array3<f64>, Vec<ScoreMap>) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let vol = Array3::from_shape_fn((depth, 5, 6), |_| rng.random_range(-1.0..1.0));
    let maps = decompose_array(&vol, 5)
        .into_iter()
        .enumerate()
        .map(|(k, s)| ScoreMap { scores: s, normalization: Normalization::Raw, stride: 4, index_k: k })
        .collect();
    (vol, maps)
}

#[test]
fn volume_assembly_orders_by_index() {
    let (vol, maps) = score_maps(1);
    assert_eq!(volume_assemble(&maps, 1).unwrap().scores, crop_all(&vol));
    let (vol, mut maps) = score_maps(6);
    let ordered = volume_assemble(&maps, 6).unwrap();
    assert_eq!(ordered.scores, crop_all(&vol));
    maps.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(volume_assemble(&maps, 6).unwrap(), ordered);
    maps.pop();
    assert!(matches!(volume_assemble(&maps, 6), Err(Error::InvalidArgument(_))));
}

fn crop_all(v: &Array3<f64>) -> Array3<f64> {
    let planes = decompose_array(v, 5);
    ndarray::stack(ndarray::Axis(0), &planes.iter().map(|p| p.view()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn round_trip_decompose_assemble_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let vol = Array3::from_shape_fn((4, 7, 7), |_| rng.random_range(-1.0..1.0));
    let maps: Vec<ScoreMap> = decompose_array(&vol, 7)
        .into_iter()
        .enumerate()
        .map(|(k, s)| ScoreMap { scores: s, normalization: Normalization::Zscored, stride: 1, index_k: k })
        .collect();
    let back = volume_assemble(&maps, 4).unwrap().scores;
    assert!(back.iter().zip(vol.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

fn phantom_slices(seeds: std::ops::Range<u64>) -> Vec<Slice> {
    let vols: Vec<_> =
        seeds.map(|seed| generate_phantom(&PhantomConfig { seed, ..PhantomConfig::default() }).unwrap().volume).collect();
    let template = IntensityTemplate::from_volumes(&vols.iter().collect::<Vec<_>>(), 1001).unwrap();
    vols.iter().flat_map(|v| preprocess_volume(v, &template, [2.0, 1.0, 1.0], 64).unwrap()).collect()
}

#[test]
fn untrained_model_is_refused() {
    let model = DiscModel::<f32>::new(DiscArch::desk(), 0).unwrap();
    let x = Array2::zeros((32, 32));
    assert!(matches!(abnormality_map(&model, &x, &x, 4), Err(Error::UntrainedModel(_))));
}

#[test]
fn trained_maps_are_consistent_and_separate_a_blob() {
    let slices = phantom_slices(0..2);
    let cfg = TripletConfig::with_patch_size(DiscArch::desk().patch_size);
    let mut model = DiscModel::<f32>::new(DiscArch::desk(), 4).unwrap();
    let mut opt = disc_optimizer(&model, 1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..300 {
        let batch: Vec<_> =
            (0..16).map(|_| sample_triplet(&slices[rng.random_range(0..slices.len())], &cfg, &mut rng).unwrap()).collect();
        train_discriminator_step(&mut model, &mut opt, &batch).unwrap();
    }
    let x = &slices[slices.len() / 4].data;
    assert!(abnormality_map(&model, x, x, 4).unwrap().iter().all(|v| *v == 0.0));

    let mut blob = x.clone();
    let mut inside = Array2::from_elem(x.dim(), false);
    for ((i, j), v) in blob.indexed_iter_mut() {
        if (i as f64 - 30.0).powi(2) + (j as f64 - 36.0).powi(2) < 36.0 {
            *v = 0.95;
            inside[[i, j]] = true;
        }
    }
    let dense = abnormality_map(&model, &blob, x, 1).unwrap();
    let strided = abnormality_map(&model, &blob, x, 4).unwrap();
    let n = dense.len() as f64;
    let mean = dense.sum() / n;
    let sd = (dense.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mad = dense.iter().zip(strided.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    assert!(mad < 0.1 * sd, "strided deviation {mad} vs dense std {sd}");

    let mean_in = dense.iter().zip(inside.iter()).filter(|(_, m)| **m).map(|(v, _)| *v).sum::<f64>()
        / inside.iter().filter(|m| **m).count() as f64;
    let mean_out = dense.iter().zip(inside.iter()).filter(|(_, m)| !**m).map(|(v, _)| *v).sum::<f64>()
        / inside.iter().filter(|m| !**m).count() as f64;
    assert!(mean_in > mean_out, "inside {mean_in} vs outside {mean_out}");
}
