//! Central finite-difference checks of the passport-layer path in `f64`:
//! `conv -> norm -> γ·x̂ + β -> weighted sum`, plus the sign loss on `γ`,
//! with `γ` and `β` derived from the kernel and two passport tensors.

use passport_core::ops::conv::*;
use passport_core::ops::norm::*;
use passport_core::signatures::sign_loss_with_grad;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

#[derive(Clone, Copy, PartialEq)]
enum Norm {
    Batch,
    Group,
}

struct Case {
    g: ConvGeom,
    n: usize,
    norm: Norm,
    x: Vec<f64>,
    w: Vec<f64>,
    pg: Vec<f64>,
    pb: Vec<f64>,
    r: Vec<f64>,
    signs: Vec<i8>,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, s: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-s..s)).collect()
}

impl Case {
    fn new(norm: Norm, seed: u64) -> Self {
        let g = ConvGeom { c_in: 3, height: 6, width: 5, c_out: 8, kernel: 3, stride: 1, padding: 1 };
        let n = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&mut rng, n * g.in_len(), 1.0);
        let w = uniform(&mut rng, g.weight_len(), 0.5);
        let pg = uniform(&mut rng, g.in_len(), 1.0);
        let pb = uniform(&mut rng, g.in_len(), 1.0);
        let r = uniform(&mut rng, n * g.out_len(), 1.0);
        let signs = (0..g.c_out).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
        Self { g, n, norm, x, w, pg, pb, r, signs }
    }

    fn normalize(&self, y: &[f64]) -> NormCache<f64> {
        let (c, hw) = (self.g.c_out, self.g.out_positions());
        match self.norm {
            Norm::Batch => batch_norm_train(y, self.n, c, hw).0,
            Norm::Group => group_norm(y, self.n, c, hw, group_count(c)),
        }
    }

    /// `Σ r ⊙ out + Σ max(γ0 − γ b, 0)` with the large margin so that the
    /// hinge is active on some channels and inactive on others.
    fn loss(&self, x: &[f64], w: &[f64], pg: &[f64], pb: &[f64]) -> f64 {
        let (c, hw) = (self.g.c_out, self.g.out_positions());
        let (y, _) = conv2d_forward(x, self.n, w, &self.g, false);
        let cache = self.normalize(&y);
        let gamma = passport_scale(w, &passport_patch_mean(pg, &self.g), &self.g);
        let beta = passport_scale(w, &passport_patch_mean(pb, &self.g), &self.g);
        let out = channel_affine(&cache.xhat, self.n, c, hw, &gamma, &beta);
        let task: f64 = out.iter().zip(&self.r).map(|(a, b)| a * b).sum();
        task + sign_loss_with_grad(&gamma, &self.signs, 0.25).unwrap().0
    }

    /// Analytic `(dx, dW, dPγ, dPβ)` assembled from the public backward kernels.
    fn grads(&self) -> [Vec<f64>; 4] {
        let (c, hw) = (self.g.c_out, self.g.out_positions());
        let (y, conv_cache) = conv2d_forward(&self.x, self.n, &self.w, &self.g, true);
        let cache = self.normalize(&y);
        let mg = passport_patch_mean(&self.pg, &self.g);
        let mb = passport_patch_mean(&self.pb, &self.g);
        let gamma = passport_scale(&self.w, &mg, &self.g);
        let (dxhat, mut dgamma, dbeta) = channel_affine_backward(&self.r, &cache.xhat, self.n, c, hw, &gamma);
        let (_, dsign) = sign_loss_with_grad(&gamma, &self.signs, 0.25).unwrap();
        dgamma.iter_mut().zip(&dsign).for_each(|(a, b)| *a += b);
        let dy = match self.norm {
            Norm::Batch => batch_norm_backward(&dxhat, &cache, self.n, c, hw),
            Norm::Group => group_norm_backward(&dxhat, &cache, c, hw, group_count(c)),
        };
        let mut dw = vec![0.0; self.w.len()];
        let dx = conv2d_backward(&dy, self.n, &self.w, &self.g, &conv_cache, Some(&mut dw), true).unwrap();
        passport_scale_backward_weight(&dgamma, &mg, &self.g, &mut dw);
        passport_scale_backward_weight(&dbeta, &mb, &self.g, &mut dw);
        let dpg = passport_scale_backward_passport(&dgamma, &self.w, &self.g);
        let dpb = passport_scale_backward_passport(&dbeta, &self.w, &self.g);
        [dx, dw, dpg, dpb]
    }

    /// Worst relative error over a strided sample of every argument.
    fn worst_rel_error(&self) -> f64 {
        let analytic = self.grads();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for (which, grad) in analytic.iter().enumerate() {
            for i in (0..grad.len()).step_by(7) {
                let mut args = [self.x.clone(), self.w.clone(), self.pg.clone(), self.pb.clone()];
                args[which][i] += h;
                let up = self.loss(&args[0], &args[1], &args[2], &args[3]);
                args[which][i] -= 2.0 * h;
                let down = self.loss(&args[0], &args[1], &args[2], &args[3]);
                let fd = (up - down) / (2.0 * h);
                let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-3);
                worst = worst.max(if rel.is_finite() { rel } else { f64::INFINITY });
            }
        }
        worst
    }
}

/// Passport-layer path, batch or group norm.
pub fn passport_path_error(batch_norm: bool, seed: u64) -> f64 {
    Case::new(if batch_norm { Norm::Batch } else { Norm::Group }, seed).worst_rel_error()
}

/// Sign loss on random `γ`, skipping points within `1e-3` of the hinge.
pub fn sign_loss_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let gamma: Vec<f64> = uniform(&mut rng, 16, 1.0);
        let signs: Vec<i8> = (0..16).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
        let (_, g) = sign_loss_with_grad(&gamma, &signs, 0.1).unwrap();
        for i in 0..16 {
            if (gamma[i] * signs[i] as f64 - 0.1).abs() < 1e-3 {
                continue;
            }
            let h = 1e-6;
            let mut p = gamma.clone();
            p[i] += h;
            let up = sign_loss_with_grad(&p, &signs, 0.1).unwrap().0;
            p[i] -= 2.0 * h;
            let down = sign_loss_with_grad(&p, &signs, 0.1).unwrap().0;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((fd - g[i]).abs() / fd.abs().max(1.0));
        }
    }
    worst
}

#[test]
fn batch_norm_passport_layer_gradients() {
    for seed in 0..3 {
        let e = passport_path_error(true, seed);
        assert!(e <= TOL, "seed {seed}: {e}");
    }
}

#[test]
fn group_norm_passport_layer_gradients() {
    for seed in 0..3 {
        let e = passport_path_error(false, seed);
        assert!(e <= TOL, "seed {seed}: {e}");
    }
}

#[test]
fn sign_loss_gradient_away_from_kinks() {
    let e = sign_loss_error(5);
    assert!(e <= TOL, "{e}");
}
