use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, Axis, Ix2};

use crate::conv::Conv2d;
use crate::params::{Builder, Grads, ParamId, ParamStore};
use crate::Scalar;

/// He gain for a (leaky) rectifier with the given negative slope.
pub fn leaky_gain(slope: f64) -> f64 {
    (2.0 / (1.0 + slope * slope)).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running statistics may be committed afterwards.
    Train,
    /// Running statistics; the network is a pure function of its input.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
}

impl Activation {
    pub fn slope(self) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::LeakyRelu(s) => s,
            Activation::Tanh => 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, channels: usize) -> Self {
        b.push(name);
        let gamma = b.constant("gamma", &[channels], 1.0, true);
        let beta = b.constant("beta", &[channels], 0.0, true);
        let running_mean = b.constant("running_mean", &[channels], 0.0, false);
        let running_var = b.constant("running_var", &[channels], 1.0, false);
        b.pop();
        Self { gamma, beta, running_mean, running_var, channels, eps: 1e-5 }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, in_features: usize, out_features: usize, slope: f64) -> Self {
        b.push(name);
        let weight = b.he_normal("weight", &[out_features, in_features], in_features, leaky_gain(slope));
        let bias = b.constant("bias", &[out_features], 0.0, true);
        b.pop();
        Self { weight, bias, in_features, out_features }
    }
}

/// `body(x) + skip(x)`, where `skip` is the identity unless a projection is given.
#[derive(Clone, Debug)]
pub struct Residual {
    pub body: Vec<Module>,
    pub skip: Option<Conv2d>,
}

#[derive(Clone, Debug)]
pub enum Module {
    Conv(Conv2d),
    BatchNorm(BatchNorm2d),
    Act(Activation),
    AvgPool2,
    MaxPool2,
    Upsample2,
    Linear(Linear),
    /// `(N, C, H, W) -> (N, C*H*W, 1, 1)`.
    Flatten,
    Residual(Box<Residual>),
    Seq(Vec<Module>),
}

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    xhat: Array4<T>,
    inv_std: Array1<T>,
    batch_mean: Array1<T>,
    batch_var: Array1<T>,
    mode: Mode,
}

/// Whatever a module must remember from its forward pass to run backward.
#[derive(Clone, Debug)]
pub enum Cache<T> {
    Conv(Array4<T>),
    BatchNorm(BnCache<T>),
    Act(Array4<T>),
    AvgPool,
    MaxPool(Vec<u8>, [usize; 4]),
    Upsample,
    Linear(Array2<T>),
    Flatten([usize; 4]),
    Residual(Vec<Cache<T>>, Option<Array4<T>>),
    Seq(Vec<Cache<T>>),
}

impl Module {
    /// Standard residual block: two `[conv3x3, batch norm, activation]` stages plus a 1x1
    /// projection on the skip path when the channel count changes.
    pub fn res_block<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, act: Activation) -> Module {
        b.push(name);
        let slope = act.slope();
        let body = vec![
            Module::Conv(Conv2d::new(b, "conv1", cin, cout, 3, false, slope)),
            Module::BatchNorm(BatchNorm2d::new(b, "bn1", cout)),
            Module::Act(act),
            Module::Conv(Conv2d::new(b, "conv2", cout, cout, 3, false, slope)),
            Module::BatchNorm(BatchNorm2d::new(b, "bn2", cout)),
            Module::Act(act),
        ];
        let skip = (cin != cout).then(|| Conv2d::new(b, "skip", cin, cout, 1, false, 1.0));
        b.pop();
        Module::Residual(Box::new(Residual { body, skip }))
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: Array4<T>, mode: Mode) -> (Array4<T>, Cache<T>) {
        match self {
            Module::Conv(conv) => {
                let y = conv.forward(store, &x);
                (y, Cache::Conv(x))
            }
            Module::BatchNorm(bn) => batchnorm_forward(bn, store, &x, mode),
            Module::Act(act) => {
                let y = match act {
                    Activation::Relu => x.mapv(|v| if v > T::zero() { v } else { T::zero() }),
                    Activation::LeakyRelu(s) => {
                        let s = T::of(*s);
                        x.mapv(|v| if v > T::zero() { v } else { v * s })
                    }
                    Activation::Tanh => {
                        let y = x.mapv(|v| v.tanh());
                        return (y.clone(), Cache::Act(y));
                    }
                };
                (y, Cache::Act(x))
            }
            Module::AvgPool2 => (avg_pool2(&x), Cache::AvgPool),
            Module::MaxPool2 => {
                let (y, idx) = max_pool2(&x);
                let d = x.dim();
                (y, Cache::MaxPool(idx, [d.0, d.1, d.2, d.3]))
            }
            Module::Upsample2 => (upsample2(&x), Cache::Upsample),
            Module::Linear(lin) => {
                let n = x.dim().0;
                let x2 = x
                    .into_shape_with_order((n, lin.in_features))
                    .expect("linear input must be flattened")
                    .into_dimensionality::<Ix2>()
                    .expect("2d");
                let w = store.get(lin.weight).view().into_dimensionality::<Ix2>().expect("2d");
                let b = store.get(lin.bias);
                let mut y = Array2::<T>::zeros((n, lin.out_features));
                general_mat_mul(T::one(), &x2, &w.t(), T::zero(), &mut y);
                for mut row in y.outer_iter_mut() {
                    for (o, v) in row.iter_mut().enumerate() {
                        *v += b[[o]];
                    }
                }
                let y4 = y.into_shape_with_order((n, lin.out_features, 1, 1)).expect("reshape");
                (y4, Cache::Linear(x2))
            }
            Module::Flatten => {
                let (n, c, h, w) = x.dim();
                let y = x.as_standard_layout().into_owned().into_shape_with_order((n, c * h * w, 1, 1)).expect("reshape");
                (y, Cache::Flatten([n, c, h, w]))
            }
            Module::Residual(res) => {
                let (skip_out, skip_in) = match &res.skip {
                    Some(conv) => (conv.forward(store, &x), Some(x.clone())),
                    None => (x.clone(), None),
                };
                let (mut y, caches) = forward_seq(&res.body, store, x, mode);
                y += &skip_out;
                (y, Cache::Residual(caches, skip_in))
            }
            Module::Seq(mods) => {
                let (y, caches) = forward_seq(mods, store, x, mode);
                (y, Cache::Seq(caches))
            }
        }
    }

    /// Inference without keeping caches.
    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: Array4<T>, mode: Mode) -> Array4<T> {
        self.forward(store, x, mode).0
    }

    /// Propagates `dy` back through the module. Parameter gradients are accumulated into
    /// `grads` when it is provided (frozen networks pass `None`).
    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cache: &Cache<T>,
        dy: Array4<T>,
        mut grads: Option<&mut Grads<T>>,
    ) -> Array4<T> {
        match (self, cache) {
            (Module::Conv(conv), Cache::Conv(x)) => conv.backward(store, x, &dy, grads),
            (Module::BatchNorm(bn), Cache::BatchNorm(c)) => batchnorm_backward(bn, store, c, dy, grads),
            (Module::Act(act), Cache::Act(saved)) => {
                let mut dx = dy;
                match act {
                    Activation::Relu => ndarray::Zip::from(&mut dx).and(saved).for_each(|d, &x| {
                        if x <= T::zero() {
                            *d = T::zero();
                        }
                    }),
                    Activation::LeakyRelu(s) => {
                        let s = T::of(*s);
                        ndarray::Zip::from(&mut dx).and(saved).for_each(|d, &x| {
                            if x <= T::zero() {
                                *d *= s;
                            }
                        })
                    }
                    Activation::Tanh => ndarray::Zip::from(&mut dx).and(saved).for_each(|d, &y| *d *= T::one() - y * y),
                }
                dx
            }
            (Module::AvgPool2, Cache::AvgPool) => avg_pool2_backward(&dy),
            (Module::MaxPool2, Cache::MaxPool(idx, shape)) => max_pool2_backward(&dy, idx, *shape),
            (Module::Upsample2, Cache::Upsample) => upsample2_backward(&dy),
            (Module::Linear(lin), Cache::Linear(x2)) => {
                let n = dy.dim().0;
                let dy2 = dy
                    .into_shape_with_order((n, lin.out_features))
                    .expect("reshape")
                    .into_dimensionality::<Ix2>()
                    .expect("2d");
                if let Some(g) = grads.as_deref_mut() {
                    let mut gw = g.get_mut(lin.weight).view_mut().into_dimensionality::<Ix2>().expect("2d");
                    general_mat_mul(T::one(), &dy2.t(), x2, T::one(), &mut gw);
                    let sums = dy2.sum_axis(Axis(0));
                    let gb = g.get_mut(lin.bias);
                    for (o, s) in sums.iter().enumerate() {
                        gb[[o]] += *s;
                    }
                }
                let w = store.get(lin.weight).view().into_dimensionality::<Ix2>().expect("2d");
                let mut dx = Array2::<T>::zeros((n, lin.in_features));
                general_mat_mul(T::one(), &dy2, &w, T::zero(), &mut dx);
                dx.into_shape_with_order((n, lin.in_features, 1, 1)).expect("reshape")
            }
            (Module::Flatten, Cache::Flatten(s)) => {
                dy.as_standard_layout().into_owned().into_shape_with_order((s[0], s[1], s[2], s[3])).expect("reshape")
            }
            (Module::Residual(res), Cache::Residual(caches, skip_in)) => {
                let mut dx = backward_seq(&res.body, store, caches, dy.clone(), grads.as_deref_mut());
                match (&res.skip, skip_in) {
                    (Some(conv), Some(x)) => dx += &conv.backward(store, x, &dy, grads),
                    _ => dx += &dy,
                }
                dx
            }
            (Module::Seq(mods), Cache::Seq(caches)) => backward_seq(mods, store, caches, dy, grads),
            _ => panic!("cache does not belong to this module"),
        }
    }

    /// Folds the batch statistics recorded in a training-mode cache into running statistics.
    pub fn commit_stats<T: Scalar>(&self, cache: &Cache<T>, store: &mut ParamStore<T>, momentum: f64) {
        match (self, cache) {
            (Module::BatchNorm(bn), Cache::BatchNorm(c)) if c.mode == Mode::Train => {
                let m = T::of(momentum);
                let keep = T::one() - m;
                let rm = store.get_mut(bn.running_mean);
                for (r, b) in rm.iter_mut().zip(c.batch_mean.iter()) {
                    *r = *r * keep + *b * m;
                }
                let rv = store.get_mut(bn.running_var);
                for (r, b) in rv.iter_mut().zip(c.batch_var.iter()) {
                    *r = *r * keep + *b * m;
                }
            }
            (Module::Residual(res), Cache::Residual(caches, _)) => {
                for (m, c) in res.body.iter().zip(caches) {
                    m.commit_stats(c, store, momentum);
                }
            }
            (Module::Seq(mods), Cache::Seq(caches)) => {
                for (m, c) in mods.iter().zip(caches) {
                    m.commit_stats(c, store, momentum);
                }
            }
            _ => {}
        }
    }
}

fn forward_seq<T: Scalar>(mods: &[Module], store: &ParamStore<T>, x: Array4<T>, mode: Mode) -> (Array4<T>, Vec<Cache<T>>) {
    let mut caches = Vec::with_capacity(mods.len());
    let mut h = x;
    for m in mods {
        let (y, c) = m.forward(store, h, mode);
        caches.push(c);
        h = y;
    }
    (h, caches)
}

fn backward_seq<T: Scalar>(
    mods: &[Module],
    store: &ParamStore<T>,
    caches: &[Cache<T>],
    dy: Array4<T>,
    mut grads: Option<&mut Grads<T>>,
) -> Array4<T> {
    let mut d = dy;
    for (m, c) in mods.iter().zip(caches).rev() {
        d = m.backward(store, c, d, grads.as_deref_mut());
    }
    d
}

fn batchnorm_forward<T: Scalar>(bn: &BatchNorm2d, store: &ParamStore<T>, x: &Array4<T>, mode: Mode) -> (Array4<T>, Cache<T>) {
    let (n, c, h, w) = x.dim();
    assert_eq!(c, bn.channels, "batch norm channels");
    let hw = h * w;
    let count = (n * hw) as f64;
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("contiguous");
    let (mean, var) = match mode {
        Mode::Train => {
            let mut sum = vec![0.0f64; c];
            for (k, plane) in xs.chunks(hw).enumerate() {
                sum[k % c] += plane.iter().map(|v| v.to_f64_lossy()).sum::<f64>();
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
            let mut ss = vec![0.0f64; c];
            for (k, plane) in xs.chunks(hw).enumerate() {
                let m = mean[k % c];
                ss[k % c] += plane
                    .iter()
                    .map(|v| {
                        let d = v.to_f64_lossy() - m;
                        d * d
                    })
                    .sum::<f64>();
            }
            (
                mean.iter().map(|&m| T::of(m)).collect::<Array1<T>>(),
                ss.iter().map(|&s| T::of(s / count)).collect::<Array1<T>>(),
            )
        }
        Mode::Eval => (
            store.get(bn.running_mean).iter().copied().collect::<Array1<T>>(),
            store.get(bn.running_var).iter().copied().collect::<Array1<T>>(),
        ),
    };
    let eps = T::of(bn.eps);
    let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
    let gamma = store.get(bn.gamma);
    let beta = store.get(bn.beta);
    let mut xhat = Array4::<T>::zeros((n, c, h, w));
    let mut y = Array4::<T>::zeros((n, c, h, w));
    {
        let xh = xhat.as_slice_mut().expect("contiguous");
        let ys = y.as_slice_mut().expect("contiguous");
        for (k, ((src, xhp), yp)) in xs.chunks(hw).zip(xh.chunks_mut(hw)).zip(ys.chunks_mut(hw)).enumerate() {
            let ch = k % c;
            let (m, s, g, b) = (mean[ch], inv_std[ch], gamma[[ch]], beta[[ch]]);
            for ((v, o), yv) in src.iter().zip(xhp.iter_mut()).zip(yp.iter_mut()) {
                let t = (*v - m) * s;
                *o = t;
                *yv = t * g + b;
            }
        }
    }
    let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
    let batch_var = var.mapv(|v| v * T::of(unbiased));
    (y, Cache::BatchNorm(BnCache { xhat, inv_std, batch_mean: mean, batch_var, mode }))
}

fn batchnorm_backward<T: Scalar>(
    bn: &BatchNorm2d,
    store: &ParamStore<T>,
    cache: &BnCache<T>,
    dy: Array4<T>,
    grads: Option<&mut Grads<T>>,
) -> Array4<T> {
    let (n, c, h, w) = dy.dim();
    let hw = h * w;
    let count = T::of((n * hw) as f64);
    let gamma = store.get(bn.gamma);
    let mut dx = dy.as_standard_layout().into_owned();
    let xh = cache.xhat.as_slice().expect("contiguous");
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    {
        let ds = dx.as_slice().expect("contiguous");
        for (k, (g, x)) in ds.chunks(hw).zip(xh.chunks(hw)).enumerate() {
            let mut s = T::zero();
            let mut sx = T::zero();
            for (a, b) in g.iter().zip(x) {
                s += *a;
                sx += *a * *b;
            }
            dbeta[k % c] += s;
            dgamma[k % c] += sx;
        }
    }
    {
        let ds = dx.as_slice_mut().expect("contiguous");
        for (k, (g, x)) in ds.chunks_mut(hw).zip(xh.chunks(hw)).enumerate() {
            let ch = k % c;
            let scale = gamma[[ch]] * cache.inv_std[ch];
            match cache.mode {
                Mode::Train => {
                    let mean_dy = dbeta[ch] / count;
                    let mean_dy_xh = dgamma[ch] / count;
                    for (a, b) in g.iter_mut().zip(x) {
                        *a = scale * (*a - mean_dy - *b * mean_dy_xh);
                    }
                }
                Mode::Eval => g.iter_mut().for_each(|a| *a *= scale),
            }
        }
    }
    if let Some(g) = grads {
        let gg = g.get_mut(bn.gamma);
        for (ch, v) in dgamma.iter().enumerate() {
            gg[[ch]] += *v;
        }
        let gb = g.get_mut(bn.beta);
        for (ch, v) in dbeta.iter().enumerate() {
            gb[[ch]] += *v;
        }
    }
    dx
}

/// Applies `f(src_plane, dst_plane)` to every `(n, c)` plane pair of two contiguous tensors.
fn map_planes<T: Scalar>(src: &Array4<T>, dst_shape: (usize, usize, usize, usize), f: impl Fn(&[T], &mut [T])) -> Array4<T> {
    let src = src.as_standard_layout();
    let (_, _, sh, sw) = src.dim();
    let mut out = Array4::<T>::zeros(dst_shape);
    let dhw = dst_shape.2 * dst_shape.3;
    let ss = src.as_slice().expect("contiguous");
    for (s, d) in ss.chunks(sh * sw).zip(out.as_slice_mut().expect("contiguous").chunks_mut(dhw)) {
        f(s, d);
    }
    out
}

fn avg_pool2<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    map_planes(x, (n, c, ho, wo), |s, d| {
        for i in 0..ho {
            let r0 = &s[2 * i * w..2 * i * w + w];
            let r1 = &s[(2 * i + 1) * w..(2 * i + 1) * w + w];
            for j in 0..wo {
                d[i * wo + j] = (r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1]) * quarter;
            }
        }
    })
}

fn avg_pool2_backward<T: Scalar>(dy: &Array4<T>) -> Array4<T> {
    let (n, c, h, w) = dy.dim();
    let quarter = T::of(0.25);
    let wo = w * 2;
    map_planes(dy, (n, c, h * 2, wo), |s, d| {
        for i in 0..h * 2 {
            for j in 0..wo {
                d[i * wo + j] = s[(i / 2) * w + j / 2] * quarter;
            }
        }
    })
}

fn max_pool2<T: Scalar>(x: &Array4<T>) -> (Array4<T>, Vec<u8>) {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("contiguous");
    let mut idx = vec![0u8; n * c * ho * wo];
    let mut y = Array4::<T>::zeros((n, c, ho, wo));
    let ys = y.as_slice_mut().expect("contiguous");
    for p in 0..n * c {
        let s = &xs[p * h * w..(p + 1) * h * w];
        for i in 0..ho {
            for j in 0..wo {
                let cand = [s[2 * i * w + 2 * j], s[2 * i * w + 2 * j + 1], s[(2 * i + 1) * w + 2 * j], s[(2 * i + 1) * w + 2 * j + 1]];
                let mut arg = 0;
                for k in 1..4 {
                    if cand[k] > cand[arg] {
                        arg = k;
                    }
                }
                let o = p * ho * wo + i * wo + j;
                ys[o] = cand[arg];
                idx[o] = arg as u8;
            }
        }
    }
    (y, idx)
}

fn max_pool2_backward<T: Scalar>(dy: &Array4<T>, idx: &[u8], shape: [usize; 4]) -> Array4<T> {
    let (_, _, ho, wo) = dy.dim();
    let w = shape[3];
    let dy = dy.as_standard_layout();
    let ds = dy.as_slice().expect("contiguous");
    let mut dx = Array4::<T>::zeros((shape[0], shape[1], shape[2], shape[3]));
    let xs = dx.as_slice_mut().expect("contiguous");
    let plane = shape[2] * shape[3];
    for (o, (&g, &a)) in ds.iter().zip(idx).enumerate() {
        let p = o / (ho * wo);
        let r = o % (ho * wo);
        let (i, j) = (r / wo, r % wo);
        let (di, dj) = ((a / 2) as usize, (a % 2) as usize);
        xs[p * plane + (2 * i + di) * w + 2 * j + dj] += g;
    }
    dx
}

fn upsample2<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let wo = w * 2;
    map_planes(x, (n, c, h * 2, wo), |s, d| {
        for i in 0..h {
            let src = &s[i * w..(i + 1) * w];
            let (r0, r1) = d[2 * i * wo..(2 * i + 2) * wo].split_at_mut(wo);
            for j in 0..w {
                r0[2 * j] = src[j];
                r0[2 * j + 1] = src[j];
            }
            r1.copy_from_slice(r0);
        }
    })
}

fn upsample2_backward<T: Scalar>(dy: &Array4<T>) -> Array4<T> {
    let (n, c, h, w) = dy.dim();
    let (ho, wo) = (h / 2, w / 2);
    map_planes(dy, (n, c, ho, wo), |s, d| {
        for i in 0..ho {
            let r0 = &s[2 * i * w..2 * i * w + w];
            let r1 = &s[(2 * i + 1) * w..(2 * i + 1) * w + w];
            for j in 0..wo {
                d[i * wo + j] = r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1];
            }
        }
    })
}
