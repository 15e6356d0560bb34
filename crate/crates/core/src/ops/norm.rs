//! Non-affine batch and group normalization, and the per-channel affine
//! transform applied after them. Activations are laid out `[n, c, hw]`.

use super::Scalar;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    /// One entry per statistics group: per channel for batch norm, per
    /// `(sample, group)` for group norm.
    pub inv_std: Vec<T>,
    /// Whether statistics were computed from this batch (and so depend on it).
    pub batch_stats: bool,
}

/// Batch norm using the statistics of the current mini-batch. Returns the
/// normalized activations plus the biased per-channel mean and variance.
pub fn batch_norm_train<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
) -> (NormCache<T>, Vec<T>, Vec<T>) {
    let m = T::from_f64((n * hw) as f64);
    let eps = T::from_f64(NORM_EPS);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let s = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            mean[ch] = mean[ch] + s.iter().copied().sum::<T>();
        }
    }
    mean.iter_mut().for_each(|v| *v = *v / m);
    for b in 0..n {
        for ch in 0..c {
            let s = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            let mu = mean[ch];
            var[ch] = var[ch] + s.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
        }
    }
    var.iter_mut().for_each(|v| *v = *v / m);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for (o, &v) in xhat[r.clone()].iter_mut().zip(&x[r]) {
                *o = (v - mean[ch]) * inv_std[ch];
            }
        }
    }
    (NormCache { xhat, inv_std, batch_stats: true }, mean, var)
}

/// Batch norm in inference mode with frozen running statistics.
pub fn batch_norm_eval<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    running_mean: &[T],
    running_var: &[T],
) -> NormCache<T> {
    let eps = T::from_f64(NORM_EPS);
    let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for (o, &v) in xhat[r.clone()].iter_mut().zip(&x[r]) {
                *o = (v - running_mean[ch]) * inv_std[ch];
            }
        }
    }
    NormCache { xhat, inv_std, batch_stats: false }
}

pub fn batch_norm_backward<T: Scalar>(
    dxhat: &[T],
    cache: &NormCache<T>,
    n: usize,
    c: usize,
    hw: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); dxhat.len()];
    if !cache.batch_stats {
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                for (o, &d) in dx[r.clone()].iter_mut().zip(&dxhat[r]) {
                    *o = d * cache.inv_std[ch];
                }
            }
        }
        return dx;
    }
    let m = T::from_f64((n * hw) as f64);
    let mut sum_d = vec![T::zero(); c];
    let mut sum_dx = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            for (&d, &xh) in dxhat[r.clone()].iter().zip(&cache.xhat[r]) {
                sum_d[ch] = sum_d[ch] + d;
                sum_dx[ch] = sum_dx[ch] + d * xh;
            }
        }
    }
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            let k = cache.inv_std[ch] / m;
            for ((o, &d), &xh) in dx[r.clone()].iter_mut().zip(&dxhat[r.clone()]).zip(&cache.xhat[r]) {
                *o = k * (m * d - sum_d[ch] - xh * sum_dx[ch]);
            }
        }
    }
    dx
}

/// Number of groups used for a layer with `channels` outputs.
pub fn group_count(channels: usize) -> usize {
    if channels < 4 {
        channels
    } else {
        4
    }
}

pub fn group_norm<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize, groups: usize) -> NormCache<T> {
    assert!(groups > 0 && c % groups == 0, "channels {c} not divisible into {groups} groups");
    let span = (c / groups) * hw;
    let m = T::from_f64(span as f64);
    let eps = T::from_f64(NORM_EPS);
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(n * groups);
    for (chunk, out) in x.chunks_exact(span).zip(xhat.chunks_exact_mut(span)) {
        let mean = chunk.iter().copied().sum::<T>() / m;
        let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
        let is = T::one() / (var + eps).sqrt();
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o = (v - mean) * is;
        }
        inv_std.push(is);
    }
    NormCache { xhat, inv_std, batch_stats: false }
}

pub fn group_norm_backward<T: Scalar>(
    dxhat: &[T],
    cache: &NormCache<T>,
    c: usize,
    hw: usize,
    groups: usize,
) -> Vec<T> {
    let span = (c / groups) * hw;
    let m = T::from_f64(span as f64);
    let mut dx = vec![T::zero(); dxhat.len()];
    for (((d, xh), o), &is) in dxhat
        .chunks_exact(span)
        .zip(cache.xhat.chunks_exact(span))
        .zip(dx.chunks_exact_mut(span))
        .zip(&cache.inv_std)
    {
        let sum_d = d.iter().copied().sum::<T>();
        let sum_dx = d.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
        let k = is / m;
        for ((o, &dv), &xv) in o.iter_mut().zip(d).zip(xh) {
            *o = k * (m * dv - sum_d - xv * sum_dx);
        }
    }
    dx
}

/// `y[b, ch, :] = scale[ch] * x[b, ch, :] + shift[ch]`.
pub fn channel_affine<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize, scale: &[T], shift: &[T]) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            let (s, t) = (scale[ch], shift[ch]);
            for (o, &v) in y[r.clone()].iter_mut().zip(&x[r]) {
                *o = s * v + t;
            }
        }
    }
    y
}

/// Returns `(dx, dscale, dshift)`.
pub fn channel_affine_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    scale: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); dy.len()];
    let mut ds = vec![T::zero(); c];
    let mut dt = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            let s = scale[ch];
            for ((o, &d), &v) in dx[r.clone()].iter_mut().zip(&dy[r.clone()]).zip(&x[r]) {
                *o = d * s;
                ds[ch] = ds[ch] + d * v;
                dt[ch] = dt[ch] + d;
            }
        }
    }
    (dx, ds, dt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_norm_output_has_zero_mean_unit_variance() {
        let (n, c, hw) = (4, 3, 5);
        let x: Vec<f64> = (0..n * c * hw).map(|i| ((i * 7) % 11) as f64 * 0.3 - 1.0).collect();
        let (cache, _, _) = batch_norm_train(&x, n, c, hw);
        for ch in 0..c {
            let vals: Vec<f64> = (0..n).flat_map(|b| cache.xhat[(b * c + ch) * hw..(b * c + ch + 1) * hw].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn group_count_falls_back_to_channels() {
        assert_eq!(group_count(2), 2);
        assert_eq!(group_count(16), 4);
    }

    #[test]
    fn group_norm_normalizes_each_group() {
        let (n, c, hw) = (2, 8, 3);
        let x: Vec<f64> = (0..n * c * hw).map(|i| (i as f64 * 0.71).sin() * 3.0 + 2.0).collect();
        let cache = group_norm(&x, n, c, hw, 4);
        for g in cache.xhat.chunks_exact(2 * hw) {
            let mean = g.iter().sum::<f64>() / g.len() as f64;
            assert!(mean.abs() < 1e-12);
        }
    }
}
