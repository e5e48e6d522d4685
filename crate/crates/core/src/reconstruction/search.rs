use anomaly_nn::{Mode, Scalar};
use ndarray::{s, Array4, Axis};
use serde::{Deserialize, Serialize};

use super::loss::ae_terms;
use super::model::{encode, ensure_finite, ReconModel};
use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentSearchConfig {
    pub steps: usize,
    pub lr: f64,
    /// A slice whose loss exceeds this multiple of its initial loss is declared diverged.
    pub divergence_factor: f64,
}

impl Default for LatentSearchConfig {
    fn default() -> Self {
        Self { steps: 100, lr: 1e-3, divergence_factor: 10.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentOrigin {
    Encoded,
    Searched,
}

/// Outcome of a latent search over a batch of slices; every slice is optimized independently.
#[derive(Clone, Debug)]
pub struct LatentSearchResult<T> {
    pub z: Array4<T>,
    pub x_hat: Array4<T>,
    pub origin: LatentOrigin,
    /// `L_AE` of the plain encoded reconstruction, per slice.
    pub initial_loss: Vec<f64>,
    /// `L_AE` of the returned reconstruction, per slice.
    pub final_loss: Vec<f64>,
    /// Slices whose search diverged; their best iterate is returned instead of the last one.
    pub diverged: Vec<bool>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Refines the latent code of each slice by Adam on `L_AE(x, decode(z))` with the model frozen,
/// starting from the posterior mean.
pub fn latent_search<T: Scalar>(model: &ReconModel<T>, x: &Array4<T>, cfg: &LatentSearchConfig) -> Result<LatentSearchResult<T>> {
    if !(cfg.lr >= 0.0) || !(cfg.divergence_factor > 1.0) {
        return Err(invalid("latent search needs lr >= 0 and divergence factor > 1"));
    }
    let (mu, _) = encode(model, x)?;
    let n = x.dim().0;
    let lambda = model.hyper.lambda_ssim;
    let mut z = mu;
    let mut m = Array4::<T>::zeros(z.dim());
    let mut v = Array4::<T>::zeros(z.dim());
    let mut initial = vec![0.0; n];
    let mut best = vec![f64::INFINITY; n];
    let mut best_z = z.clone();
    let mut best_x = Array4::<T>::zeros(x.dim());
    let mut diverged = vec![false; n];
    let mut last_x = Array4::<T>::zeros(x.dim());
    let mut last_loss = vec![0.0; n];
    let (b1, b2) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2));
    for step in 0..=cfg.steps {
        let (x_hat, cache) = model.decoder.forward(z.clone(), Mode::Eval);
        ensure_finite("decoder output during latent search", &x_hat)?;
        let want_grad = step < cfg.steps;
        let (loss, d_xhat) = ae_terms(x, &x_hat, lambda, want_grad.then_some(1.0))?;
        for i in 0..n {
            if diverged[i] {
                continue;
            }
            if step == 0 {
                initial[i] = loss[i];
            }
            if loss[i] < best[i] {
                best[i] = loss[i];
                best_z.index_axis_mut(Axis(0), i).assign(&z.index_axis(Axis(0), i));
                best_x.index_axis_mut(Axis(0), i).assign(&x_hat.index_axis(Axis(0), i));
            }
            if loss[i] > cfg.divergence_factor * initial[i] {
                diverged[i] = true;
            }
        }
        if !want_grad {
            last_x = x_hat;
            last_loss = loss;
            break;
        }
        let dz = model.decoder.backward(&cache, d_xhat.expect("gradient requested"), None);
        let t = (step + 1) as i32;
        let c1 = T::of(1.0 - ADAM_BETA1.powi(t));
        let c2 = T::of(1.0 - ADAM_BETA2.powi(t));
        let lr = T::of(cfg.lr);
        let eps = T::of(ADAM_EPS);
        for i in (0..n).filter(|i| !diverged[*i]) {
            let g = dz.index_axis(Axis(0), i);
            let mut mi = m.index_axis_mut(Axis(0), i);
            let mut vi = v.index_axis_mut(Axis(0), i);
            let mut zi = z.index_axis_mut(Axis(0), i);
            ndarray::Zip::from(&mut zi).and(&mut mi).and(&mut vi).and(&g).for_each(|z, m, v, &g| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *z -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
    let mut final_loss = last_loss;
    for i in (0..n).filter(|i| diverged[*i]) {
        z.index_axis_mut(Axis(0), i).assign(&best_z.index_axis(Axis(0), i));
        last_x.slice_mut(s![i, .., .., ..]).assign(&best_x.index_axis(Axis(0), i));
        final_loss[i] = best[i];
    }
    Ok(LatentSearchResult {
        z,
        x_hat: last_x,
        origin: if cfg.steps == 0 { LatentOrigin::Encoded } else { LatentOrigin::Searched },
        initial_loss: initial,
        final_loss,
        diverged,
    })
}
