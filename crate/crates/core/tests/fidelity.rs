use anomaly_recon_core::data_pipeline::*;
use anomaly_recon_core::fidelity::*;
use anomaly_recon_core::volume::{Slice, ANATOMY_CLASSES};
use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn random_simplex(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
    let mut p = Array3::from_shape_fn((c, h, w), |_| rng.random_range(0.0..1.0f64).powi(3));
    for i in 0..h {
        for j in 0..w {
            let z: f64 = p.slice(s![.., i, j]).sum();
            p.slice_mut(s![.., i, j]).mapv_inplace(|v| v / z);
        }
    }
    p
}

#[test]
fn entropy_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = random_simplex(&mut rng, 6, 32, 32);
    let mut direct = 0.0;
    for i in 0..32 {
        for j in 0..32 {
            for k in 0..6 {
                let v = p[[k, i, j]];
                direct -= v * v.ln();
            }
        }
    }
    assert!((entropy(&p).unwrap() - direct).abs() < 1e-8);
}

#[test]
fn entropy_extremes() {
    let uniform = Array3::from_elem((6, 256, 256), 1.0 / 6.0);
    let want = 256.0 * 256.0 * 6f64.ln();
    assert!(rel_err(entropy(&uniform).unwrap(), want) < 1e-9);
    let mut onehot = Array3::<f64>::zeros((6, 8, 8));
    onehot.slice_mut(s![2, .., ..]).fill(1.0);
    assert_eq!(entropy(&onehot).unwrap(), 0.0);
    let mut bad = onehot.clone();
    bad[[0, 0, 0]] = -0.1;
    assert!(entropy(&bad).is_err());
}

#[test]
fn dice_pixel_count_fixture() {
    // class 1: 100 px in the reference, 60 px in the other map, 40 px shared
    let mut a = Array2::<u8>::zeros((20, 20));
    let mut b = Array2::<u8>::zeros((20, 20));
    a.slice_mut(s![0..10, 0..10]).fill(1);
    b.slice_mut(s![6..12, 0..10]).fill(1);
    // class 2: identical 4 px
    a.slice_mut(s![15..17, 15..17]).fill(2);
    b.slice_mut(s![15..17, 15..17]).fill(2);
    let d1 = dice(&a.mapv(|v| v == 1), &b.mapv(|v| v == 1)).unwrap();
    assert!((d1 - 0.5).abs() < 1e-12);
    let count = |m: &Array2<u8>, k: u8| m.iter().filter(|v| **v == k).count() as f64;
    let shared = a.iter().zip(b.iter()).filter(|(x, y)| **x == 1 && **y == 1).count() as f64;
    assert_eq!((count(&a, 1), count(&b, 1), shared), (100.0, 60.0, 40.0));
    let want = (2.0 * shared / (count(&a, 1) + count(&b, 1)) + 1.0) / 2.0;
    assert!((label_overlap(&a, &b).unwrap() - want).abs() < 1e-12);
    assert_eq!(label_overlap(&a, &a), Some(1.0));
    let disjoint = a.mapv(|v| if v == 0 { 1 } else { 0 });
    assert_eq!(label_overlap(&a, &disjoint.mapv(|v| v * 3)), Some(0.0));
    assert_eq!(label_overlap(&Array2::zeros((4, 4)), &a.slice(s![0..4, 0..4]).to_owned()), None);
    assert_eq!(dice(&a.mapv(|v| v == 1), &b.mapv(|v| v == 1)), dice(&b.mapv(|v| v == 1), &a.mapv(|v| v == 1)));
}

#[test]
fn perfect_prediction_has_near_zero_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let labels = Array3::from_shape_fn((2, 6, 6), |_| rng.random_range(0..4u8));
    let target = one_hot::<f64>(&labels, 4).unwrap();
    let (loss, _) = seg_loss_terms(&target, &target).unwrap();
    assert!(loss.dice.abs() < 1e-9 && loss.focal.abs() < 1e-9, "{loss:?}");
    let uniform = Array4::from_elem(target.dim(), 0.25);
    assert!(seg_loss_terms(&uniform, &target).unwrap().0.total() > 0.5);
    assert!(one_hot::<f64>(&labels, 3).is_err());
}

fn mini_arch() -> SegArch {
    SegArch { filters: vec![2, 3], classes: 3 }
}

#[test]
fn segmentation_gradients_match_finite_differences() {
    let model = SegModel::<f64>::new(mini_arch(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Array4::from_shape_fn((2, 1, 6, 6), |_| rng.random_range(-1.0..1.0));
    let labels = Array3::from_shape_fn((2, 6, 6), |_| rng.random_range(0..3u8));
    let (_, grads) = seg_loss_grads(&model, &x, &labels).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for id in model.store.ids() {
        if !model.store.iter().nth(id.index()).unwrap().trainable {
            continue;
        }
        let n = model.store.get(id).len();
        for k in (0..n).step_by((n / 5).max(1)) {
            let mut mp = model.clone();
            let mut mm = model.clone();
            mp.store.get_mut(id).as_slice_mut().unwrap()[k] += h;
            mm.store.get_mut(id).as_slice_mut().unwrap()[k] -= h;
            let fp = seg_loss_grads(&mp, &x, &labels).unwrap().0.total();
            let fm = seg_loss_grads(&mm, &x, &labels).unwrap().0.total();
            worst = worst.max(rel_err((fp - fm) / (2.0 * h), grads.get(id).as_slice().unwrap()[k]));
        }
    }
    assert!(worst < 1e-4, "worst relative gradient error {worst}");
}

#[test]
fn zero_learning_rate_and_label_mismatch() {
    let mut model = SegModel::<f32>::new(mini_arch(), 1).unwrap();
    let x = Array4::from_elem((1, 1, 4, 4), 0.3f32);
    let labels = Array3::from_elem((1, 4, 4), 1u8);
    let mut opt = seg_optimizer(&model, 0.0);
    let before: Vec<_> = model.store.iter().filter(|p| p.trainable).map(|p| p.value.clone()).collect();
    train_segmentation_step(&mut model, &mut opt, &x, &labels).unwrap();
    let after: Vec<_> = model.store.iter().filter(|p| p.trainable).map(|p| p.value.clone()).collect();
    assert_eq!(before, after);
    assert!(train_segmentation_step(&mut model, &mut opt, &x, &Array3::from_elem((1, 4, 4), 5u8)).is_err());
    assert!(train_segmentation_step(&mut model, &mut opt, &x, &Array3::from_elem((2, 4, 4), 0u8)).is_err());
}

#[test]
fn softmax_is_a_simplex_and_identical_inputs_score_trivially() {
    let model = SegModel::<f32>::new(SegArch::desk(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = Slice { data: Array2::from_shape_fn((64, 64), |_| rng.random_range(-1.0..1.0)), source_id: "r".into(), index_k: 0 };
    let p = predict(&model, &slices_to_batch([&s]).mapv(f64::from).mapv(|v| v as f32)).unwrap();
    for i in 0..64 {
        for j in 0..64 {
            let z: f32 = p.slice(s![0, .., i, j]).sum();
            assert!((z - 1.0).abs() < 1e-6 && p.slice(s![0, .., i, j]).iter().all(|v| *v >= 0.0));
        }
    }
    assert_eq!(quality_score(&model, &s, &s).unwrap(), 0.0);
    if let Some(o) = overlap_score(&model, &s, &s).unwrap() {
        assert_eq!(o, 1.0);
    }
}

fn gaussian_blur(img: &Array2<f32>, sigma: f64) -> Array2<f32> {
    let r = (3.0 * sigma).ceil() as isize;
    let w: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = w.iter().sum();
    let (h, wd) = img.dim();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
        }
        i as usize
    };
    let rows = Array2::from_shape_fn((h, wd), |(i, j)| {
        (-r..=r).map(|d| w[(d + r) as usize] * f64::from(img[[i, reflect(j as isize + d, wd)]])).sum::<f64>() / z
    });
    Array2::from_shape_fn((h, wd), |(i, j)| {
        ((-r..=r).map(|d| w[(d + r) as usize] * rows[[reflect(i as isize + d, h), j]]).sum::<f64>() / z) as f32
    })
}

fn labelled_slices(seeds: std::ops::Range<u64>, template: &IntensityTemplate) -> Vec<(Slice, Array2<u8>)> {
    let mut out = Vec::new();
    for seed in seeds {
        let cfg = PhantomConfig { seed, ..PhantomConfig::default() };
        let ph = generate_phantom(&cfg).unwrap();
        let anat = preprocess_anatomy(&ph.labels, cfg.spacing, cfg.spacing, 64).unwrap();
        for s in preprocess_volume(&ph.volume, template, cfg.spacing, 64).unwrap() {
            let l = anat[s.index_k].clone();
            out.push((s, l));
        }
    }
    out
}

#[test]
fn trained_segmentation_is_accurate_and_penalizes_blur() {
    let vols: Vec<_> = (0..4).map(|seed| generate_phantom(&PhantomConfig { seed, ..PhantomConfig::default() }).unwrap().volume).collect();
    let template = IntensityTemplate::from_volumes(&vols.iter().collect::<Vec<_>>(), 1001).unwrap();
    let train = labelled_slices(0..7, &template);
    let test = labelled_slices(100..103, &template);
    let mut model = SegModel::<f32>::new(SegArch::desk(), 1).unwrap();
    let mut opt = seg_optimizer(&model, 3e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..250 {
        let idx: Vec<usize> = (0..8).map(|_| rng.random_range(0..train.len())).collect();
        let x = slices_to_batch(idx.iter().map(|&i| &train[i].0));
        let labels = ndarray::stack(Axis(0), &idx.iter().map(|&i| train[i].1.view()).collect::<Vec<_>>()).unwrap();
        train_segmentation_step(&mut model, &mut opt, &x, &labels).unwrap();
    }
    let slices: Vec<&Slice> = test.iter().map(|(s, _)| s).collect();
    let pred = segment_slices(&model, &slices, 16).unwrap();
    let truth: Vec<Array2<u8>> = test.iter().map(|(_, l)| l.clone()).collect();
    let d = class_dice(&pred, &truth, ANATOMY_CLASSES.len()).unwrap();
    let mean = d.foreground_mean().unwrap();
    assert!(mean >= 0.85, "held-out mean Dice {mean}, per class {:?}", d.per_class);

    let blurred: Vec<Slice> = slices.iter().map(|s| Slice { data: gaussian_blur(&s.data, 4.0), ..(*s).clone() }).collect();
    let pairs: Vec<(&Slice, &Slice)> = slices.iter().copied().zip(blurred.iter()).collect();
    let scores = fidelity_scores(&model, &pairs, 16).unwrap();
    let negative = scores.iter().filter(|(q, _)| *q < 0.0).count() as f64 / scores.len() as f64;
    assert!(negative >= 0.9, "blur lowered the quality score on only {negative} of slices");
}
