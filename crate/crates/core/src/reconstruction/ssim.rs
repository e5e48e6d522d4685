//! Gaussian-windowed SSIM with its gradient with respect to the second image.

use anomaly_nn::Scalar;
use ndarray::{Array2, ArrayView2};

use crate::error::{invalid, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Intensity range of renormalized slices, `[-1, 1]`.
pub const DYNAMIC_RANGE: f64 = 2.0;

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" correlation with the window `g ⊗ g`.
fn filter_valid<T: Scalar>(a: ArrayView2<'_, T>, g: &[T]) -> Array2<T> {
    let (h, w) = a.dim();
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = Array2::<T>::zeros((h, ow));
    for i in 0..h {
        for j in 0..ow {
            let mut acc = T::zero();
            for (t, gv) in g.iter().enumerate() {
                acc += *gv * a[[i, j + t]];
            }
            rows[[i, j]] = acc;
        }
    }
    let mut out = Array2::<T>::zeros((oh, ow));
    for i in 0..oh {
        for t in 0..k {
            let gv = g[t];
            for j in 0..ow {
                out[[i, j]] += gv * rows[[i + t, j]];
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a valid-sized map back onto an `h x w` image.
fn filter_valid_adjoint<T: Scalar>(d: &Array2<T>, g: &[T], h: usize, w: usize) -> Array2<T> {
    let (oh, ow) = d.dim();
    let k = g.len();
    let mut rows = Array2::<T>::zeros((h, ow));
    for i in 0..oh {
        for t in 0..k {
            let gv = g[t];
            for j in 0..ow {
                rows[[i + t, j]] += gv * d[[i, j]];
            }
        }
    }
    let mut out = Array2::<T>::zeros((h, w));
    for i in 0..h {
        for j in 0..ow {
            let r = rows[[i, j]];
            for (t, gv) in g.iter().enumerate() {
                out[[i, j + t]] += *gv * r;
            }
        }
    }
    out
}

fn check_pair<T>(x: &ArrayView2<'_, T>, y: &ArrayView2<'_, T>) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(invalid(format!("ssim shape mismatch {:?} vs {:?}", x.dim(), y.dim())));
    }
    if x.dim().0 < SSIM_WINDOW || x.dim().1 < SSIM_WINDOW {
        return Err(invalid(format!("images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window")));
    }
    Ok(())
}

/// Mean SSIM over all valid window positions.
pub fn ssim<T: Scalar>(x: ArrayView2<'_, T>, y: ArrayView2<'_, T>) -> Result<f64> {
    check_pair(&x, &y)?;
    Ok(ssim_and_grad(x, y, false).0)
}

/// SSIM value and, when requested, `dSSIM/dy`.
pub(crate) fn ssim_and_grad<T: Scalar>(x: ArrayView2<'_, T>, y: ArrayView2<'_, T>, grad: bool) -> (f64, Option<Array2<T>>) {
    let g: Vec<T> = gaussian_window(SSIM_WINDOW, SSIM_SIGMA).into_iter().map(T::of).collect();
    let c1 = T::of((SSIM_K1 * DYNAMIC_RANGE).powi(2));
    let c2 = T::of((SSIM_K2 * DYNAMIC_RANGE).powi(2));
    let two = T::of(2.0);
    let mx = filter_valid(x, &g);
    let my = filter_valid(y, &g);
    let exx = filter_valid((&x * &x).view(), &g);
    let eyy = filter_valid((&y * &y).view(), &g);
    let exy = filter_valid((&x * &y).view(), &g);
    let (oh, ow) = mx.dim();
    let count = T::of((oh * ow) as f64);
    let mut total = 0.0;
    let (mut d_mu, mut d_exy, mut d_eyy) = if grad {
        (Array2::zeros((oh, ow)), Array2::zeros((oh, ow)), Array2::zeros((oh, ow)))
    } else {
        (Array2::zeros((0, 0)), Array2::zeros((0, 0)), Array2::zeros((0, 0)))
    };
    for i in 0..oh {
        for j in 0..ow {
            let (ux, uy) = (mx[[i, j]], my[[i, j]]);
            let a1 = two * ux * uy + c1;
            let a2 = two * (exy[[i, j]] - ux * uy) + c2;
            let b1 = ux * ux + uy * uy + c1;
            let b2 = exx[[i, j]] - ux * ux + eyy[[i, j]] - uy * uy + c2;
            let s = a1 * a2 / (b1 * b2);
            total += s.to_f64_lossy();
            if grad {
                d_mu[[i, j]] = (two * ux * (a2 - a1) / (b1 * b2) - two * uy * s * (T::one() / b1 - T::one() / b2)) / count;
                d_exy[[i, j]] = two * a1 / (b1 * b2) / count;
                d_eyy[[i, j]] = -s / b2 / count;
            }
        }
    }
    let value = total / (oh * ow) as f64;
    if !grad {
        return (value, None);
    }
    let (h, w) = x.dim();
    let p_mu = filter_valid_adjoint(&d_mu, &g, h, w);
    let p_xy = filter_valid_adjoint(&d_exy, &g, h, w);
    let p_yy = filter_valid_adjoint(&d_eyy, &g, h, w);
    let mut out = p_mu;
    ndarray::Zip::from(&mut out).and(&x).and(&y).and(&p_xy).and(&p_yy).for_each(|o, &xv, &yv, &pxy, &pyy| {
        *o += xv * pxy + two * yv * pyy;
    });
    (value, Some(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_is_normalized_and_symmetric() {
        let g = gaussian_window(11, 1.5);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..11 {
            assert_eq!(g[i], g[10 - i]);
        }
    }

    #[test]
    fn identical_images_score_one() {
        let x = Array2::from_shape_fn((16, 16), |(i, j)| ((i * 3 + j) as f64 * 0.1).sin());
        assert!((ssim(x.view(), x.view()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn small_images_are_rejected() {
        let x = Array2::<f64>::zeros((8, 8));
        assert!(ssim(x.view(), x.view()).is_err());
    }
}
