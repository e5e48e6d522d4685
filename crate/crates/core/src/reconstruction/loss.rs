//! Reconstruction and regularization objectives.

use anomaly_nn::Scalar;
use ndarray::{Array4, Axis};
use serde::{Deserialize, Serialize};

use super::ssim::ssim_and_grad;
use crate::error::{invalid, Result};

/// How `L_AE` is reduced over the pixels of one image before averaging over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AeReduction {
    /// Pixel mean (MSE and mean SSIM).
    #[default]
    Mean,
    /// Pixel mean multiplied by the pixel count, i.e. the sum-reduced squared error.
    Sum,
}

impl AeReduction {
    pub fn factor(self, pixels: usize) -> f64 {
        match self {
            AeReduction::Mean => 1.0,
            AeReduction::Sum => pixels as f64,
        }
    }
}

fn check_same<T>(a: &Array4<T>, b: &Array4<T>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(invalid(format!("shape mismatch {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Closed-form `KL(N(mu, sigma^2) || N(0, I))`, summed over latent dimensions and averaged
/// over the batch.
pub fn loss_reg<T: Scalar>(mu: &Array4<T>, sigma: &Array4<T>) -> Result<f64> {
    check_same(mu, sigma)?;
    if sigma.iter().any(|s| !(*s > T::zero())) {
        return Err(invalid("sigma must be strictly positive"));
    }
    let n = mu.dim().0.max(1) as f64;
    let total: f64 = mu
        .iter()
        .zip(sigma.iter())
        .map(|(m, s)| {
            let (m, s) = (m.to_f64_lossy(), s.to_f64_lossy());
            0.5 * (m * m + s * s - 1.0 - 2.0 * s.ln())
        })
        .sum();
    Ok(total / n)
}

/// Per-sample KL from `(mu, logvar)` and the gradients of their sum.
pub fn kl_terms<T: Scalar>(mu: &Array4<T>, logvar: &Array4<T>) -> (Vec<f64>, Array4<T>, Array4<T>) {
    let half = T::of(0.5);
    let per: Vec<f64> = mu
        .outer_iter()
        .zip(logvar.outer_iter())
        .map(|(m, l)| {
            m.iter()
                .zip(l.iter())
                .map(|(m, l)| {
                    let (m, l) = (m.to_f64_lossy(), l.to_f64_lossy());
                    0.5 * (m * m + l.exp() - 1.0 - l)
                })
                .sum()
        })
        .collect();
    let d_lv = logvar.mapv(|l| half * (l.exp() - T::one()));
    (per, mu.clone(), d_lv)
}

/// `0.5 * MSE + lambda * (1 - SSIM)` per image, averaged over the batch.
pub fn loss_ae<T: Scalar>(x: &Array4<T>, x_hat: &Array4<T>, lambda_ssim: f64) -> Result<f64> {
    let (per, _) = ae_terms(x, x_hat, lambda_ssim, None)?;
    Ok(per.iter().sum::<f64>() / per.len().max(1) as f64)
}

/// Per-image `L_AE` (pixel-mean reduction) for single-channel batches, plus the gradient of
/// `grad_scale * sum_i L_AE_i` with respect to `x_hat` when `grad_scale` is given.
pub fn ae_terms<T: Scalar>(
    x: &Array4<T>,
    x_hat: &Array4<T>,
    lambda_ssim: f64,
    grad_scale: Option<f64>,
) -> Result<(Vec<f64>, Option<Array4<T>>)> {
    check_same(x, x_hat)?;
    let (n, c, h, w) = x.dim();
    if c != 1 {
        return Err(invalid("reconstruction loss expects single-channel images"));
    }
    let pixels = (h * w) as f64;
    let mut per = Vec::with_capacity(n);
    let mut grad = grad_scale.map(|_| Array4::<T>::zeros(x.dim()));
    for b in 0..n {
        let xi = x.index_axis(Axis(0), b).index_axis_move(Axis(0), 0);
        let yi = x_hat.index_axis(Axis(0), b).index_axis_move(Axis(0), 0);
        let mse: f64 =
            xi.iter().zip(yi.iter()).map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2)).sum::<f64>() / pixels;
        let mut value = 0.5 * mse;
        let want_ssim = lambda_ssim != 0.0;
        let (s, ds) = if want_ssim { ssim_and_grad(xi, yi, grad.is_some()) } else { (1.0, None) };
        value += lambda_ssim * (1.0 - s);
        per.push(value);
        if let (Some(g), Some(scale)) = (grad.as_mut(), grad_scale) {
            let mut gi = g.index_axis_mut(Axis(0), b);
            let mut gi = gi.index_axis_mut(Axis(0), 0);
            let k_mse = T::of(scale / pixels);
            ndarray::Zip::from(&mut gi).and(&xi).and(&yi).for_each(|o, &a, &b| *o = k_mse * (b - a));
            if let Some(ds) = ds {
                let k_ssim = T::of(-scale * lambda_ssim);
                ndarray::Zip::from(&mut gi).and(&ds).for_each(|o, &d| *o += k_ssim * d);
            }
        }
    }
    Ok((per, grad))
}

/// Hinge `[m - v]^+` and its derivative with respect to `v`.
pub fn margin_hinge(m: f64, v: f64) -> (f64, f64) {
    if m > v {
        (m - v, -1.0)
    } else {
        (0.0, 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images_have_zero_loss() {
        let x = Array4::from_shape_fn((2, 1, 16, 16), |(b, _, i, j)| ((b + i * j) as f64 * 0.37).sin());
        assert!(loss_ae(&x, &x, 1.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn constant_offset_mse() {
        let x = Array4::from_elem((1, 1, 12, 12), 0.5f64);
        let y = Array4::from_elem((1, 1, 12, 12), -0.5f64);
        assert!((loss_ae(&x, &y, 0.0).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_vanishes_at_prior() {
        let mu = Array4::<f64>::zeros((3, 2, 2, 2));
        let sigma = Array4::<f64>::ones((3, 2, 2, 2));
        assert_eq!(loss_reg(&mu, &sigma).unwrap(), 0.0);
        assert!(loss_reg(&mu, &mu).is_err());
    }

    #[test]
    fn hinge_is_inactive_beyond_margin() {
        assert_eq!(margin_hinge(120.0, 130.0), (0.0, 0.0));
        assert_eq!(margin_hinge(120.0, 120.0), (0.0, 0.0));
        assert_eq!(margin_hinge(120.0, 100.0), (20.0, -1.0));
    }
}
