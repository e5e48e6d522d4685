use anomaly_nn::{Activation, Adam, AdamConfig, Builder, Cache, Conv2d, Grads, Mode, Module, ParamStore, Scalar, BN_MOMENTUM};
use ndarray::{concatenate, s, Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::volume::ANATOMY_CLASSES;

pub const DICE_EPS: f64 = 1e-5;
pub const FOCAL_GAMMA: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegArch {
    /// Widths of the encoder levels; the decoder mirrors them.
    pub filters: Vec<usize>,
    pub classes: usize,
}

impl SegArch {
    pub fn paper() -> Self {
        Self { filters: vec![32, 64, 128, 256, 512], classes: 13 }
    }

    pub fn desk() -> Self {
        Self { filters: vec![8, 16, 32, 64], classes: ANATOMY_CLASSES.len() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters.len() < 2 || self.filters.contains(&0) {
            return Err(invalid("segmentation network needs at least two non-empty levels"));
        }
        if self.classes < 2 {
            return Err(invalid("segmentation needs at least two classes"));
        }
        Ok(())
    }
}

/// Residual U-shaped network: residual blocks with max pooling on the way down, upsampling,
/// skip concatenation and residual blocks on the way up, and a 1x1 classifier.
#[derive(Clone, Debug)]
pub struct SegModel<T> {
    pub arch: SegArch,
    pub store: ParamStore<T>,
    down: Vec<Module>,
    up: Vec<Module>,
    head: Module,
    pub steps: u64,
}

struct SegCache<T> {
    down: Vec<Cache<T>>,
    pools: Vec<Cache<T>>,
    up: Vec<Cache<T>>,
    /// channel count of the upsampled half of each concatenation
    up_channels: Vec<usize>,
    head: Cache<T>,
}

impl<T: Scalar> SegModel<T> {
    pub fn new(arch: SegArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (down, up, head) = {
            let mut b = Builder::new(&mut store, &mut rng);
            let f = &arch.filters;
            let mut down = Vec::new();
            let mut cin = 1;
            for (i, &w) in f.iter().enumerate() {
                down.push(Module::res_block(&mut b, &format!("down{i}"), cin, w, Activation::Relu));
                cin = w;
            }
            let mut up = Vec::new();
            for i in 0..f.len() - 1 {
                up.push(Module::res_block(&mut b, &format!("up{i}"), f[i + 1] + f[i], f[i], Activation::Relu));
            }
            let head = Module::Conv(Conv2d::new(&mut b, "head", f[0], arch.classes, 1, true, 1.0));
            (down, up, head)
        };
        Ok(Self { arch, store, down, up, head, steps: 0 })
    }

    pub fn cast<U: Scalar>(&self) -> SegModel<U> {
        SegModel {
            arch: self.arch.clone(),
            store: self.store.cast(),
            down: self.down.clone(),
            up: self.up.clone(),
            head: self.head.clone(),
            steps: self.steps,
        }
    }

    fn check_input(&self, x: &Array4<T>) -> Result<()> {
        let (n, c, h, w) = x.dim();
        let m = 1 << (self.arch.filters.len() - 1);
        if n == 0 || c != 1 || h % m != 0 || w % m != 0 {
            return Err(invalid(format!("segmentation input {:?} must be (N, 1, H, W) with H, W divisible by {m}", x.dim())));
        }
        Ok(())
    }

    fn forward(&self, x: Array4<T>, mode: Mode) -> (Array4<T>, SegCache<T>) {
        let levels = self.down.len();
        let mut skips = Vec::with_capacity(levels);
        let mut down = Vec::with_capacity(levels);
        let mut pools = Vec::new();
        let mut h = x;
        for (i, block) in self.down.iter().enumerate() {
            let (y, c) = block.forward(&self.store, h, mode);
            down.push(c);
            if i + 1 < levels {
                skips.push(y.clone());
                let (p, pc) = Module::MaxPool2.forward(&self.store, y, mode);
                pools.push(pc);
                h = p;
            } else {
                h = y;
            }
        }
        let mut up = vec![None; levels - 1];
        let mut up_channels = vec![0; levels - 1];
        for i in (0..levels - 1).rev() {
            let u = Module::Upsample2.apply(&self.store, h, mode);
            up_channels[i] = u.dim().1;
            let cat = concatenate(Axis(1), &[u.view(), skips[i].view()]).expect("matching spatial size");
            let (y, c) = self.up[i].forward(&self.store, cat, mode);
            up[i] = Some(c);
            h = y;
        }
        let (logits, head) = self.head.forward(&self.store, h, mode);
        let up = up.into_iter().map(|c| c.expect("every level visited")).collect();
        (logits, SegCache { down, pools, up, up_channels, head })
    }

    fn backward(&self, cache: &SegCache<T>, dlogits: Array4<T>, grads: &mut Grads<T>) {
        let levels = self.down.len();
        let mut dh = self.head.backward(&self.store, &cache.head, dlogits, Some(grads));
        let mut dskips = vec![None; levels - 1];
        for i in 0..levels - 1 {
            let dcat = self.up[i].backward(&self.store, &cache.up[i], dh, Some(grads));
            let cu = cache.up_channels[i];
            dskips[i] = Some(dcat.slice(s![.., cu.., .., ..]).to_owned());
            dh = Module::Upsample2.backward(&self.store, &Cache::Upsample, dcat.slice(s![.., ..cu, .., ..]).to_owned(), None);
        }
        for i in (0..levels).rev() {
            if i + 1 < levels {
                dh = Module::MaxPool2.backward(&self.store, &cache.pools[i], dh, None);
                dh += dskips[i].as_ref().expect("skip gradient");
            }
            dh = self.down[i].backward(&self.store, &cache.down[i], dh, Some(grads));
        }
    }

    fn commit_stats(&mut self, cache: &SegCache<T>) {
        for (m, c) in self.down.iter().zip(&cache.down) {
            m.commit_stats(c, &mut self.store, BN_MOMENTUM);
        }
        for (m, c) in self.up.iter().zip(&cache.up) {
            m.commit_stats(c, &mut self.store, BN_MOMENTUM);
        }
    }
}

/// Channel softmax of `(N, C, H, W)` logits.
pub fn softmax<T: Scalar>(logits: &Array4<T>) -> Array4<T> {
    let mut p = logits.clone();
    let (n, c, h, w) = p.dim();
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let mut m = T::neg_infinity();
                for k in 0..c {
                    m = m.max(p[[b, k, i, j]]);
                }
                let mut z = T::zero();
                for k in 0..c {
                    let e = (p[[b, k, i, j]] - m).exp();
                    p[[b, k, i, j]] = e;
                    z += e;
                }
                for k in 0..c {
                    p[[b, k, i, j]] /= z;
                }
            }
        }
    }
    p
}

/// Class probabilities `(N, C, H, W)` in inference mode.
pub fn predict<T: Scalar>(model: &SegModel<T>, x: &Array4<T>) -> Result<Array4<T>> {
    model.check_input(x)?;
    let p = softmax(&model.forward(x.clone(), Mode::Eval).0);
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFailure("non-finite segmentation output".into()));
    }
    Ok(p)
}

pub fn one_hot<T: Scalar>(labels: &Array3<u8>, classes: usize) -> Result<Array4<T>> {
    let (n, h, w) = labels.dim();
    let mut out = Array4::<T>::zeros((n, classes, h, w));
    for ((b, i, j), &l) in labels.indexed_iter() {
        if usize::from(l) >= classes {
            return Err(invalid(format!("label {l} outside {classes} classes")));
        }
        out[[b, usize::from(l), i, j]] = T::one();
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegLoss {
    pub dice: f64,
    pub focal: f64,
}

impl SegLoss {
    pub fn total(&self) -> f64 {
        self.dice + self.focal
    }
}

/// Soft Dice loss `1 - mean_c (2 sum p y + eps) / (sum p + sum y + eps)` (sums over batch and
/// pixels) plus the pixel-mean focal loss `-(1 - p_t)^gamma ln p_t`, with the gradient of their
/// sum with respect to the probabilities.
pub fn seg_loss_terms<T: Scalar>(probs: &Array4<T>, target: &Array4<T>) -> Result<(SegLoss, Array4<T>)> {
    if probs.dim() != target.dim() {
        return Err(invalid(format!("probabilities {:?} and targets {:?} differ", probs.dim(), target.dim())));
    }
    let (n, c, h, w) = probs.dim();
    let mut grad = Array4::<T>::zeros(probs.dim());
    let mut dice_sum = 0.0;
    for k in 0..c {
        let p = probs.slice(s![.., k, .., ..]);
        let y = target.slice(s![.., k, .., ..]);
        let inter: f64 = p.iter().zip(y.iter()).map(|(a, b)| a.to_f64_lossy() * b.to_f64_lossy()).sum();
        let denom = p.iter().map(|v| v.to_f64_lossy()).sum::<f64>() + y.iter().map(|v| v.to_f64_lossy()).sum::<f64>() + DICE_EPS;
        let num = 2.0 * inter + DICE_EPS;
        dice_sum += num / denom;
        let mut g = grad.slice_mut(s![.., k, .., ..]);
        ndarray::Zip::from(&mut g).and(&y).for_each(|g, &yv| {
            let d = (2.0 * yv.to_f64_lossy() * denom - num) / (denom * denom);
            *g = T::of(-d / c as f64);
        });
    }
    let dice = 1.0 - dice_sum / c as f64;
    let pixels = (n * h * w) as f64;
    let mut focal = 0.0;
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    if target[[b, k, i, j]].to_f64_lossy() == 0.0 {
                        continue;
                    }
                    let pt = probs[[b, k, i, j]].to_f64_lossy().max(1e-12);
                    let q = 1.0 - pt;
                    focal -= q.powf(FOCAL_GAMMA) * pt.ln();
                    let d = FOCAL_GAMMA * q.powf(FOCAL_GAMMA - 1.0) * pt.ln() - q.powf(FOCAL_GAMMA) / pt;
                    grad[[b, k, i, j]] += T::of(d / pixels);
                }
            }
        }
    }
    Ok((SegLoss { dice, focal: focal / pixels }, grad))
}

fn softmax_backward<T: Scalar>(p: &Array4<T>, dp: &Array4<T>) -> Array4<T> {
    let (n, c, h, w) = p.dim();
    let mut dz = Array4::<T>::zeros(p.dim());
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let mut dot = T::zero();
                for k in 0..c {
                    dot += p[[b, k, i, j]] * dp[[b, k, i, j]];
                }
                for k in 0..c {
                    dz[[b, k, i, j]] = p[[b, k, i, j]] * (dp[[b, k, i, j]] - dot);
                }
            }
        }
    }
    dz
}

fn check_labels<T: Scalar>(model: &SegModel<T>, x: &Array4<T>, labels: &Array3<u8>) -> Result<()> {
    model.check_input(x)?;
    let (n, _, h, w) = x.dim();
    if labels.dim() != (n, h, w) {
        return Err(invalid(format!("labels {:?} do not match images {:?}", labels.dim(), x.dim())));
    }
    Ok(())
}

/// Training-mode loss and parameter gradients.
pub fn seg_loss_grads<T: Scalar>(model: &SegModel<T>, x: &Array4<T>, labels: &Array3<u8>) -> Result<(SegLoss, Grads<T>)> {
    let (loss, grads, _) = loss_grads_cache(model, x, labels)?;
    Ok((loss, grads))
}

fn loss_grads_cache<T: Scalar>(model: &SegModel<T>, x: &Array4<T>, labels: &Array3<u8>) -> Result<(SegLoss, Grads<T>, SegCache<T>)> {
    check_labels(model, x, labels)?;
    let target = one_hot::<T>(labels, model.arch.classes)?;
    let (logits, cache) = model.forward(x.clone(), Mode::Train);
    let p = softmax(&logits);
    let (loss, dp) = seg_loss_terms(&p, &target)?;
    let mut grads = model.store.zero_grads();
    model.backward(&cache, softmax_backward(&p, &dp), &mut grads);
    Ok((loss, grads, cache))
}

pub fn seg_optimizer<T: Scalar>(model: &SegModel<T>, lr: f64) -> Adam<T> {
    Adam::new(AdamConfig::with_lr(lr), &model.store)
}

/// One Adam step on soft Dice + focal loss; returns the loss before the step.
pub fn train_segmentation_step<T: Scalar>(model: &mut SegModel<T>, opt: &mut Adam<T>, x: &Array4<T>, labels: &Array3<u8>) -> Result<f64> {
    let (loss, grads, cache) = loss_grads_cache(model, x, labels)?;
    if !grads.is_finite() || !loss.total().is_finite() {
        return Err(Error::NumericFailure("non-finite segmentation loss or gradients; step aborted".into()));
    }
    opt.step(&mut model.store, &grads);
    model.commit_stats(&cache);
    model.steps += 1;
    Ok(loss.total())
}

/// Per-pixel argmax of `(C, H, W)` probabilities.
pub fn argmax_labels<T: Scalar>(probs: &Array3<T>) -> Array2<u8> {
    let (c, h, w) = probs.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut best = 0;
        for k in 1..c {
            if probs[[k, i, j]] > probs[[best, i, j]] {
                best = k;
            }
        }
        best as u8
    })
}
