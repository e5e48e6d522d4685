use anomaly_nn::{Activation, Adam, AdamConfig, Grads, Linear, Mode, Module, Network, Scalar};
use ndarray::{s, Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sampling::{Patch, Triplet};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscArch {
    pub patch_size: usize,
    /// One residual block per entry, each followed by 2x max pooling.
    pub filters: Vec<usize>,
    pub hidden: usize,
    pub embedding: usize,
}

impl DiscArch {
    pub fn paper() -> Self {
        Self { patch_size: 32, filters: vec![64, 128, 256, 512], hidden: 1024, embedding: 256 }
    }

    pub fn desk() -> Self {
        Self { patch_size: 8, filters: vec![16, 32, 64], hidden: 256, embedding: 128 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters.is_empty() || self.filters.contains(&0) || self.hidden == 0 || self.embedding == 0 {
            return Err(invalid("discriminator widths must be positive"));
        }
        if self.patch_size == 0 || self.patch_size % (1 << self.filters.len()) != 0 {
            return Err(invalid(format!("patch size {} is not divisible by 2^{}", self.patch_size, self.filters.len())));
        }
        Ok(())
    }

    fn flat_features(&self) -> usize {
        let side = self.patch_size >> self.filters.len();
        self.filters[self.filters.len() - 1] * side * side
    }
}

#[derive(Clone, Debug)]
pub struct DiscModel<T> {
    pub arch: DiscArch,
    pub net: Network<T>,
    /// Completed training steps; an untrained model refuses to score.
    pub steps: u64,
}

impl<T: Scalar> DiscModel<T> {
    pub fn new(arch: DiscArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::build(&mut rng, |b| {
            let mut mods = Vec::new();
            let mut cin = 1;
            for (i, &f) in arch.filters.iter().enumerate() {
                mods.push(Module::res_block(b, &format!("block{i}"), cin, f, Activation::Relu));
                mods.push(Module::MaxPool2);
                cin = f;
            }
            mods.push(Module::Flatten);
            mods.push(Module::Linear(Linear::new(b, "hidden", arch.flat_features(), arch.hidden, 0.0)));
            mods.push(Module::Act(Activation::Relu));
            mods.push(Module::Linear(Linear::new(b, "embed", arch.hidden, arch.embedding, 1.0)));
            Module::Seq(mods)
        });
        Ok(Self { arch, net, steps: 0 })
    }

    pub fn cast<U: Scalar>(&self) -> DiscModel<U> {
        DiscModel { arch: self.arch.clone(), net: self.net.cast(), steps: self.steps }
    }

    fn check_patches(&self, x: &Array4<T>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != 1 || h != self.arch.patch_size || w != self.arch.patch_size {
            return Err(invalid(format!("expected 1 x {p} x {p} patches, got {:?}", x.dim(), p = self.arch.patch_size)));
        }
        Ok(())
    }
}

fn to_rows<T: Scalar>(y: Array4<T>) -> Array2<T> {
    let (n, c, _, _) = y.dim();
    y.into_shape_with_order((n, c)).expect("embedding is n x c x 1 x 1")
}

fn ensure_finite<T: Scalar>(what: &str, a: &Array2<T>) -> Result<()> {
    let bad = a.iter().filter(|v| !v.is_finite()).count();
    if bad > 0 {
        return Err(Error::NumericFailure(format!("{bad} non-finite values in {what}")));
    }
    Ok(())
}

/// Embedding vectors (one row per patch) in inference mode.
pub fn embed<T: Scalar>(model: &DiscModel<T>, patches: &Array4<T>) -> Result<Array2<T>> {
    model.check_patches(patches)?;
    let e = to_rows(model.net.apply(patches.clone(), Mode::Eval));
    ensure_finite("embeddings", &e)?;
    Ok(e)
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `max(d(a, pos) - d(a, neg) + 1, 0)` with Euclidean `d`.
pub fn triplet_loss(a: &[f64], pos: &[f64], neg: &[f64]) -> Result<f64> {
    if a.len() != pos.len() || a.len() != neg.len() {
        return Err(invalid("embedding dimensions differ"));
    }
    Ok((l2(a, pos) - l2(a, neg) + 1.0).max(0.0))
}

/// Mean triplet loss of stacked embeddings `[anchors; positives; negatives]` and its gradient.
/// The distance gradient is taken as zero where two embeddings coincide.
pub fn triplet_terms<T: Scalar>(e: &Array2<T>) -> Result<(f64, Array2<T>)> {
    let (rows, dim) = e.dim();
    if rows % 3 != 0 || rows == 0 {
        return Err(invalid("triplet embeddings must stack anchors, positives and negatives"));
    }
    let b = rows / 3;
    let mut grad = Array2::<T>::zeros((rows, dim));
    let mut total = 0.0;
    let inv_b = 1.0 / b as f64;
    for i in 0..b {
        let a: Vec<f64> = e.row(i).iter().map(|v| v.to_f64_lossy()).collect();
        let p: Vec<f64> = e.row(b + i).iter().map(|v| v.to_f64_lossy()).collect();
        let n: Vec<f64> = e.row(2 * b + i).iter().map(|v| v.to_f64_lossy()).collect();
        let (dp, dn) = (l2(&a, &p), l2(&a, &n));
        let loss = dp - dn + 1.0;
        if loss <= 0.0 {
            continue;
        }
        total += loss;
        for k in 0..dim {
            let gp = if dp > 0.0 { (a[k] - p[k]) / dp * inv_b } else { 0.0 };
            let gn = if dn > 0.0 { (a[k] - n[k]) / dn * inv_b } else { 0.0 };
            grad[[i, k]] += T::of(gp - gn);
            grad[[b + i, k]] += T::of(-gp);
            grad[[2 * b + i, k]] += T::of(gn);
        }
    }
    Ok((total * inv_b, grad))
}

/// Mean triplet loss on a stacked patch batch (training-mode forward) and parameter gradients.
pub fn triplet_loss_grads<T: Scalar>(model: &DiscModel<T>, stacked: &Array4<T>) -> Result<(f64, Grads<T>)> {
    model.check_patches(stacked)?;
    let (y, cache) = model.net.forward(stacked.clone(), Mode::Train);
    let (n, c, _, _) = y.dim();
    let e = to_rows(y);
    ensure_finite("embeddings", &e)?;
    let (loss, de) = triplet_terms(&e)?;
    let mut g = model.net.zero_grads();
    model.net.backward(&cache, de.into_shape_with_order((n, c, 1, 1)).expect("reshape"), Some(&mut g));
    Ok((loss, g))
}

pub fn patches_to_batch<'a>(patches: impl IntoIterator<Item = &'a Patch>) -> Array4<f32> {
    let planes: Vec<_> = patches.into_iter().map(|p| p.data.view().insert_axis(Axis(0))).collect();
    ndarray::stack(Axis(0), &planes).expect("patches share one size")
}

/// Stacks `[anchors; positives; negatives]`.
pub fn triplets_to_batch(triplets: &[Triplet]) -> Array4<f32> {
    patches_to_batch(
        triplets
            .iter()
            .map(|t| &t.anchor)
            .chain(triplets.iter().map(|t| &t.positive))
            .chain(triplets.iter().map(|t| &t.negative)),
    )
}

pub fn disc_optimizer<T: Scalar>(model: &DiscModel<T>, lr: f64) -> Adam<T> {
    Adam::new(AdamConfig::with_lr(lr), &model.net.store)
}

/// One Adam step on the mean triplet loss; returns the batch loss.
pub fn train_discriminator_step<T: Scalar>(model: &mut DiscModel<T>, opt: &mut Adam<T>, triplets: &[Triplet]) -> Result<f64> {
    if triplets.is_empty() {
        return Err(invalid("empty triplet batch"));
    }
    let batch = triplets_to_batch(triplets).mapv(|v| T::of(f64::from(v)));
    let (y, cache) = {
        model.check_patches(&batch)?;
        model.net.forward(batch, Mode::Train)
    };
    let (n, c, _, _) = y.dim();
    let e = to_rows(y);
    ensure_finite("embeddings", &e)?;
    let (loss, de) = triplet_terms(&e)?;
    let mut g = model.net.zero_grads();
    model.net.backward(&cache, de.into_shape_with_order((n, c, 1, 1)).expect("reshape"), Some(&mut g));
    if !g.is_finite() {
        return Err(Error::NumericFailure("non-finite discriminator gradients; step aborted".into()));
    }
    opt.step(&mut model.net.store, &g);
    model.net.commit_stats(&cache);
    model.steps += 1;
    Ok(loss)
}

/// Fraction of triplets with `d(a, pos) < d(a, neg)` under the eval-mode embedding.
pub fn triplet_accuracy<T: Scalar>(model: &DiscModel<T>, triplets: &[Triplet]) -> Result<f64> {
    if triplets.is_empty() {
        return Err(invalid("no triplets"));
    }
    let b = triplets.len();
    let e = embed(model, &triplets_to_batch(triplets).mapv(|v| T::of(f64::from(v))))?;
    let row = |i: usize| -> Vec<f64> { e.row(i).iter().map(|v| v.to_f64_lossy()).collect() };
    let good = (0..b).filter(|&i| l2(&row(i), &row(b + i)) < l2(&row(i), &row(2 * b + i))).count();
    Ok(good as f64 / b as f64)
}

/// Mean `(d(a, pos), d(a, neg))` under the eval-mode embedding.
pub fn triplet_distances<T: Scalar>(model: &DiscModel<T>, triplets: &[Triplet]) -> Result<(f64, f64)> {
    let b = triplets.len();
    let e = embed(model, &triplets_to_batch(triplets).mapv(|v| T::of(f64::from(v))))?;
    let e = e.mapv(|v| v.to_f64_lossy());
    let (mut dp, mut dn) = (0.0, 0.0);
    for i in 0..b {
        let a = e.slice(s![i, ..]).to_vec();
        dp += l2(&a, &e.slice(s![b + i, ..]).to_vec());
        dn += l2(&a, &e.slice(s![2 * b + i, ..]).to_vec());
    }
    Ok((dp / b as f64, dn / b as f64))
}
