use anomaly_nn::conv::{col2im, im2col};
use anomaly_nn::{Activation, Adam, AdamConfig, Builder, Conv2d, Linear, Mode, Module, ParamStore};
use ndarray::{Array2, Array4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random4(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
    Array4::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Scalar objective `sum(y * r)` for a fixed random probe `r`.
fn objective(m: &Module, store: &ParamStore<f64>, x: &Array4<f64>, probe: &Array4<f64>, mode: Mode) -> f64 {
    let y = m.apply(store, x.clone(), mode);
    (&y * probe).sum()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares analytic input and parameter gradients against central differences.
fn check(m: &Module, store: &ParamStore<f64>, x: &Array4<f64>, mode: Mode, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = m.apply(store, x.clone(), mode);
    let probe = Array4::from_shape_fn(y.dim(), |_| rng.random_range(-1.0..1.0));
    let (_, cache) = m.forward(store, x.clone(), mode);
    let mut grads = store.zero_grads();
    let dx = m.backward(store, &cache, probe.clone(), Some(&mut grads));
    let h = 1e-5;
    let mut worst = 0.0f64;
    for idx in 0..x.len().min(40) {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.as_slice_mut().unwrap()[idx] += h;
        xm.as_slice_mut().unwrap()[idx] -= h;
        let fd = (objective(m, store, &xp, &probe, mode) - objective(m, store, &xm, &probe, mode)) / (2.0 * h);
        worst = worst.max(rel_err(fd, dx.as_slice().unwrap()[idx]));
    }
    for id in store.ids() {
        if !store.iter().nth(id.index()).unwrap().trainable {
            continue;
        }
        let n = store.get(id).len();
        for k in (0..n).step_by((n / 8).max(1)) {
            let mut sp = store.clone();
            let mut sm = store.clone();
            sp.get_mut(id).as_slice_mut().unwrap()[k] += h;
            sm.get_mut(id).as_slice_mut().unwrap()[k] -= h;
            let fd = (objective(m, &sp, x, &probe, mode) - objective(m, &sm, x, &probe, mode)) / (2.0 * h);
            worst = worst.max(rel_err(fd, grads.get(id).as_slice().unwrap()[k]));
        }
    }
    assert!(worst < 1e-4, "worst relative gradient error {worst}");
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    let conv = Conv2d::new(&mut Builder::new(&mut store, &mut rng), "c", 3, 4, 3, true, 0.0);
    let x = random4(&mut rng, (2, 3, 5, 6));
    check(&Module::Conv(conv), &store, &x, Mode::Train, 2);
}

#[test]
fn residual_block_gradients_train_and_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let block = Module::res_block(&mut Builder::new(&mut store, &mut rng), "r", 2, 3, Activation::LeakyRelu(0.2));
    let x = random4(&mut rng, (3, 2, 4, 4));
    check(&block, &store, &x, Mode::Train, 4);
    check(&block, &store, &x, Mode::Eval, 5);
}

#[test]
fn pooling_upsampling_and_linear_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::<f64>::new();
    let mut b = Builder::new(&mut store, &mut rng);
    let net = Module::Seq(vec![
        Module::Upsample2,
        Module::AvgPool2,
        Module::MaxPool2,
        Module::Act(Activation::Tanh),
        Module::Flatten,
        Module::Linear(Linear::new(&mut b, "fc", 2 * 2 * 2, 3, 0.0)),
        Module::Act(Activation::Relu),
    ]);
    let x = random4(&mut rng, (2, 2, 4, 4));
    check(&net, &store, &x, Mode::Train, 7);
}

#[test]
fn eval_mode_is_batch_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::<f64>::new();
    let block = Module::res_block(&mut Builder::new(&mut store, &mut rng), "r", 1, 2, Activation::Relu);
    let x = random4(&mut rng, (4, 1, 6, 6));
    let full = block.apply(&store, x.clone(), Mode::Eval);
    let single = block.apply(&store, x.slice(ndarray::s![2..3, .., .., ..]).to_owned(), Mode::Eval);
    let diff = (&full.slice(ndarray::s![2..3, .., .., ..]) - &single).mapv(f64::abs).sum();
    assert!(diff < 1e-12);
}

#[test]
fn committed_statistics_move_toward_batch_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::<f64>::new();
    let block = Module::res_block(&mut Builder::new(&mut store, &mut rng), "r", 1, 1, Activation::Relu);
    let x = random4(&mut rng, (4, 1, 6, 6)).mapv(|v| v + 3.0);
    let before = store.clone();
    let (_, cache) = block.forward(&store, x, Mode::Train);
    block.commit_stats(&cache, &mut store, 0.1);
    assert!(!store.bitwise_eq(&before));
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::<f32>::new();
    let _ = Conv2d::new(&mut Builder::new(&mut store, &mut rng), "c", 1, 2, 3, true, 0.0);
    let before = store.clone();
    let mut grads = store.zero_grads();
    for id in store.ids() {
        grads.get_mut(id).fill(0.37);
    }
    let mut adam = Adam::new(AdamConfig::with_lr(0.0), &store);
    adam.step(&mut store, &grads);
    assert!(store.bitwise_eq(&before));
}

proptest! {
    #[test]
    fn col2im_is_the_adjoint_of_im2col(seed in 0u64..1000, k in prop::sample::select(vec![1usize, 3]), h in 2usize..6, w in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random4(&mut rng, (2, 2, h, w));
        let col = im2col(&x, k, k / 2);
        let c = Array2::from_shape_fn(col.dim(), |_| rng.random_range(-1.0..1.0));
        let lhs = (&col * &c).sum();
        let rhs = (&x * &col2im(&c, 2, 2, h, w, k, k / 2)).sum();
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }
}
