use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2, Axis, Ix2};

use crate::module::leaky_gain;
use crate::params::{Builder, Grads, ParamId, ParamStore};
use crate::Scalar;

/// Stride-1 2D convolution, `(N, C_in, H, W) -> (N, C_out, H + 2p - k + 1, W + 2p - k + 1)`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl Conv2d {
    /// `slope` is the negative slope of the activation that follows, used for the He gain.
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
        slope: f64,
    ) -> Self {
        b.push(name);
        let fan_in = in_channels * kernel * kernel;
        let weight = b.he_normal("weight", &[out_channels, in_channels, kernel, kernel], fan_in, leaky_gain(slope));
        let bias = bias.then(|| b.constant("bias", &[out_channels], 0.0, true));
        b.pop();
        Self { weight, bias, in_channels, out_channels, kernel, padding: kernel / 2 }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (h + 2 * self.padding + 1 - self.kernel, w + 2 * self.padding + 1 - self.kernel)
    }

    fn weight2<'a, T: Scalar>(&self, store: &'a ParamStore<T>) -> ArrayView2<'a, T> {
        store
            .get(self.weight)
            .view()
            .into_shape_with_order((self.out_channels, self.in_channels * self.kernel * self.kernel))
            .expect("conv weight is contiguous")
            .into_dimensionality::<Ix2>()
            .expect("2d")
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (ho, wo) = self.out_hw(h, w);
        let wmat = self.weight2(store);
        let x = x.as_standard_layout();
        let mut y = Array4::<T>::zeros((n, self.out_channels, ho, wo));
        let mut col = Array2::<T>::zeros((c * self.kernel * self.kernel, ho * wo));
        for ni in 0..n {
            let xs = x.slice(ndarray::s![ni..ni + 1, .., .., ..]);
            im2col_into(xs.as_slice().expect("contiguous"), 1, c, h, w, self.kernel, self.padding, &mut col);
            let mut out = y
                .index_axis_mut(Axis(0), ni)
                .into_shape_with_order((self.out_channels, ho * wo))
                .expect("contiguous")
                .into_dimensionality::<Ix2>()
                .expect("2d");
            general_mat_mul(T::one(), &wmat, &col, T::zero(), &mut out);
        }
        if let Some(bias) = self.bias {
            let b = store.get(bias);
            let hw = ho * wo;
            let ys = y.as_slice_mut().expect("contiguous");
            for (k, plane) in ys.chunks_mut(hw).enumerate() {
                let bo = b[[k % self.out_channels]];
                plane.iter_mut().for_each(|v| *v += bo);
            }
        }
        y
    }

    /// Returns the input gradient; accumulates weight/bias gradients when `grads` is given.
    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Array4<T>,
        dy: &Array4<T>,
        mut grads: Option<&mut Grads<T>>,
    ) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        let (ho, wo) = self.out_hw(h, w);
        let hw = ho * wo;
        let kk = c * self.kernel * self.kernel;
        let wmat = self.weight2(store);
        let x = x.as_standard_layout();
        let dy = dy.as_standard_layout();
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        let mut col = Array2::<T>::zeros((kk, hw));
        let mut dcol = Array2::<T>::zeros((kk, hw));
        let mut gw2 = Array2::<T>::zeros((self.out_channels, kk));
        for ni in 0..n {
            let dyn_ = dy
                .index_axis(Axis(0), ni)
                .into_shape_with_order((self.out_channels, hw))
                .expect("contiguous")
                .into_dimensionality::<Ix2>()
                .expect("2d");
            if grads.is_some() {
                let xs = x.slice(ndarray::s![ni..ni + 1, .., .., ..]);
                im2col_into(xs.as_slice().expect("contiguous"), 1, c, h, w, self.kernel, self.padding, &mut col);
                general_mat_mul(T::one(), &dyn_, &col.t(), T::one(), &mut gw2);
            }
            general_mat_mul(T::one(), &wmat.t(), &dyn_, T::zero(), &mut dcol);
            let mut dxs = dx.slice_mut(ndarray::s![ni..ni + 1, .., .., ..]);
            col2im_into(&dcol, 1, c, h, w, self.kernel, self.padding, dxs.as_slice_mut().expect("contiguous"));
        }
        if let Some(g) = grads.as_deref_mut() {
            let gw = g.get_mut(self.weight);
            for (a, b) in gw.iter_mut().zip(gw2.iter()) {
                *a += *b;
            }
            if let Some(bias) = self.bias {
                let gb = g.get_mut(bias);
                let ds = dy.as_slice().expect("contiguous");
                for (k, plane) in ds.chunks(hw).enumerate() {
                    let s: T = plane.iter().copied().sum();
                    gb[[k % self.out_channels]] += s;
                }
            }
        }
        dx
    }
}

/// Unfolds `(N, C, H, W)` into `(C*k*k, N*Ho*Wo)` with zero padding.
pub fn im2col<T: Scalar>(x: &Array4<T>, k: usize, pad: usize) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    let mut out = Array2::<T>::zeros((c * k * k, n * ho * wo));
    let xs = x.as_standard_layout();
    im2col_into(xs.as_slice().expect("contiguous"), n, c, h, w, k, pad, &mut out);
    out
}

/// Adjoint of [`im2col`]: scatters columns back onto the image grid, summing overlaps.
pub fn col2im<T: Scalar>(col: &Array2<T>, n: usize, c: usize, h: usize, w: usize, k: usize, pad: usize) -> Array4<T> {
    let mut out = Array4::<T>::zeros((n, c, h, w));
    col2im_into(col, n, c, h, w, k, pad, out.as_slice_mut().expect("contiguous"));
    out
}

#[allow(clippy::too_many_arguments)]
fn im2col_into<T: Scalar>(xs: &[T], n: usize, c: usize, h: usize, w: usize, k: usize, pad: usize, out: &mut Array2<T>) {
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    let cols = n * ho * wo;
    let os = out.as_slice_mut().expect("contiguous");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let orow = &mut os[row * cols..(row + 1) * cols];
                let lo = pad.saturating_sub(kj).min(wo);
                let hi = wo.min((w + pad).saturating_sub(kj)).max(lo);
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    for oy in 0..ho {
                        let iy = oy + ki;
                        let dst = &mut orow[(ni * ho + oy) * wo..(ni * ho + oy + 1) * wo];
                        if iy < pad || iy - pad >= h {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &xs[base + (iy - pad) * w..base + (iy - pad + 1) * w];
                        dst[..lo].fill(T::zero());
                        dst[lo..hi].copy_from_slice(&src[lo + kj - pad..hi + kj - pad]);
                        dst[hi..].fill(T::zero());
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_into<T: Scalar>(col: &Array2<T>, n: usize, c: usize, h: usize, w: usize, k: usize, pad: usize, os: &mut [T]) {
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    let cols = n * ho * wo;
    let cs = col.as_slice().expect("contiguous");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let crow = &cs[row * cols..(row + 1) * cols];
                let lo = pad.saturating_sub(kj).min(wo);
                let hi = wo.min((w + pad).saturating_sub(kj)).max(lo);
                if lo >= hi {
                    continue;
                }
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    for oy in 0..ho {
                        let iy = oy + ki;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let src = &crow[(ni * ho + oy) * wo + lo..(ni * ho + oy) * wo + hi];
                        let dst = &mut os[base + (iy - pad) * w + lo + kj - pad..base + (iy - pad) * w + hi + kj - pad];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
}
