//! 2-D convolution via im2col, plus the passport scale function
//! `Avg(W * P)`: the per-output-channel spatial mean of a passport tensor
//! convolved through a host kernel.

use super::{gemm, Scalar, Trans};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub c_in: usize,
    pub height: usize,
    pub width: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Rows of the im2col matrix, i.e. the fan-in of one output unit.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    pub fn out_positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.height * self.width
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.out_positions()
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.patch_len()
    }
}

/// Unfolds one `[c_in, h, w]` image into `[c_in*k*k, oh*ow]`.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    debug_assert_eq!(x.len(), g.in_len());
    debug_assert_eq!(cols.len(), g.patch_len() * oh * ow);
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `[c_in*k*k, oh*ow]` back onto `[c_in, h, w]`,
/// accumulating into `dx`.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            line[ix as usize] = line[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Per-image im2col buffers kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct ConvCache<T> {
    pub cols: Vec<Vec<T>>,
}

/// Batched convolution without bias. `x` is `[n, c_in, h, w]`, `weight` is
/// `[c_out, c_in*k*k]`; returns `[n, c_out, oh, ow]`.
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    weight: &[T],
    g: &ConvGeom,
    keep_cols: bool,
) -> (Vec<T>, ConvCache<T>) {
    let (kl, p) = (g.patch_len(), g.out_positions());
    let mut out = vec![T::zero(); batch * g.out_len()];
    let mut cache = ConvCache { cols: Vec::with_capacity(if keep_cols { batch } else { 0 }) };
    let mut scratch = vec![T::zero(); kl * p];
    for n in 0..batch {
        let xi = &x[n * g.in_len()..(n + 1) * g.in_len()];
        im2col(xi, g, &mut scratch);
        let yo = &mut out[n * g.out_len()..(n + 1) * g.out_len()];
        gemm(Trans::No, Trans::No, g.c_out, kl, p, T::one(), weight, &scratch, T::zero(), yo);
        if keep_cols {
            cache.cols.push(scratch.clone());
        }
    }
    (out, cache)
}

/// Backward of [`conv2d_forward`]. Accumulates the kernel gradient into
/// `dweight` when given and returns the input gradient when `want_dx`.
pub fn conv2d_backward<T: Scalar>(
    dout: &[T],
    batch: usize,
    weight: &[T],
    g: &ConvGeom,
    cache: &ConvCache<T>,
    dweight: Option<&mut [T]>,
    want_dx: bool,
) -> Option<Vec<T>> {
    let (kl, p) = (g.patch_len(), g.out_positions());
    if let Some(dw) = dweight {
        assert_eq!(cache.cols.len(), batch, "conv backward needs cached columns");
        for n in 0..batch {
            let dy = &dout[n * g.out_len()..(n + 1) * g.out_len()];
            gemm(Trans::No, Trans::Yes, g.c_out, p, kl, T::one(), dy, &cache.cols[n], T::one(), dw);
        }
    }
    if !want_dx {
        return None;
    }
    let mut dx = vec![T::zero(); batch * g.in_len()];
    let mut dcols = vec![T::zero(); kl * p];
    for n in 0..batch {
        let dy = &dout[n * g.out_len()..(n + 1) * g.out_len()];
        gemm(Trans::Yes, Trans::No, kl, g.c_out, p, T::one(), weight, dy, T::zero(), &mut dcols);
        col2im(&dcols, g, &mut dx[n * g.in_len()..(n + 1) * g.in_len()]);
    }
    Some(dx)
}

/// Row means of `im2col(passport)`: the average receptive-field patch.
/// Convolution is linear, so `Avg(W * P) = W · col_mean(P)`.
pub fn passport_patch_mean<T: Scalar>(passport: &[T], g: &ConvGeom) -> Vec<T> {
    let (kl, p) = (g.patch_len(), g.out_positions());
    let mut cols = vec![T::zero(); kl * p];
    im2col(passport, g, &mut cols);
    let inv = T::one() / T::from_f64(p as f64);
    cols.chunks_exact(p).map(|row| row.iter().copied().sum::<T>() * inv).collect()
}

/// `Avg(W * P)`: returns one value per output channel given the patch mean.
pub fn passport_scale<T: Scalar>(weight: &[T], patch_mean: &[T], g: &ConvGeom) -> Vec<T> {
    let kl = g.patch_len();
    let mut out = vec![T::zero(); g.c_out];
    gemm(Trans::No, Trans::No, g.c_out, kl, 1, T::one(), weight, patch_mean, T::zero(), &mut out);
    out
}

/// Backward of [`passport_scale`] with respect to the kernel: `dW[c,:] += dγ_c · m`.
pub fn passport_scale_backward_weight<T: Scalar>(
    dscale: &[T],
    patch_mean: &[T],
    g: &ConvGeom,
    dweight: &mut [T],
) {
    let kl = g.patch_len();
    gemm(Trans::No, Trans::No, g.c_out, 1, kl, T::one(), dscale, patch_mean, T::one(), dweight);
}

/// Backward of [`passport_scale`] with respect to the passport tensor.
pub fn passport_scale_backward_passport<T: Scalar>(
    dscale: &[T],
    weight: &[T],
    g: &ConvGeom,
) -> Vec<T> {
    let (kl, p) = (g.patch_len(), g.out_positions());
    let mut dmean = vec![T::zero(); kl];
    gemm(Trans::Yes, Trans::No, kl, g.c_out, 1, T::one(), weight, dscale, T::zero(), &mut dmean);
    let inv = T::one() / T::from_f64(p as f64);
    let mut dcols = vec![T::zero(); kl * p];
    for (row, &d) in dcols.chunks_exact_mut(p).zip(&dmean) {
        row.iter_mut().for_each(|v| *v = d * inv);
    }
    let mut dp = vec![T::zero(); g.in_len()];
    col2im(&dcols, g, &mut dp);
    dp
}
