//! SGD with momentum, Adam, and the step learning-rate schedule.

use serde::{Deserialize, Serialize};

/// Momentum SGD over any number of parameter slots, each keeping its own
/// velocity buffer. Slots are allocated on first use.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        Self { momentum, weight_decay, velocity: Vec::new() }
    }

    /// `v = μv + g + λp; p -= lr·v`. Decay is skipped when `decay` is false.
    pub fn update(&mut self, slot: usize, param: &mut [f32], grad: &[f32], lr: f32, decay: bool) {
        assert_eq!(param.len(), grad.len(), "gradient length for slot {slot}");
        if self.velocity.len() <= slot {
            self.velocity.resize(slot + 1, Vec::new());
        }
        let v = &mut self.velocity[slot];
        if v.len() != param.len() {
            *v = vec![0.0; param.len()];
        }
        let wd = if decay { self.weight_decay } else { 0.0 };
        for ((p, &g), v) in param.iter_mut().zip(grad).zip(v.iter_mut()) {
            *v = self.momentum * *v + g + wd * *p;
            *p -= lr * *v;
        }
    }
}

/// Adam with bias correction; used by the attacks, whose free tensors have
/// badly scaled gradients.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    state: Vec<(u32, Vec<f32>, Vec<f32>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, state: Vec::new() }
    }
}

impl Adam {
    pub fn update(&mut self, slot: usize, param: &mut [f32], grad: &[f32], lr: f32) {
        assert_eq!(param.len(), grad.len(), "gradient length for slot {slot}");
        if self.state.len() <= slot {
            self.state.resize(slot + 1, (0, Vec::new(), Vec::new()));
        }
        let (t, m, v) = &mut self.state[slot];
        if m.len() != param.len() {
            *t = 0;
            *m = vec![0.0; param.len()];
            *v = vec![0.0; param.len()];
        }
        *t += 1;
        let c1 = 1.0 - self.beta1.powi(*t as i32);
        let c2 = 1.0 - self.beta2.powi(*t as i32);
        for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Drops the rate by `factor` at each milestone, given as fractions of the
/// total epoch count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f32,
    pub milestones: Vec<f32>,
    pub factor: f32,
}

impl Default for LrSchedule {
    /// 0.01, then 0.001 at half the run and 0.0001 at three quarters.
    fn default() -> Self {
        Self { base: 0.01, milestones: vec![0.5, 0.75], factor: 0.1 }
    }
}

impl LrSchedule {
    pub fn constant(lr: f32) -> Self {
        Self { base: lr, milestones: Vec::new(), factor: 1.0 }
    }

    pub fn lr_at(&self, epoch: usize, total_epochs: usize) -> f32 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| epoch >= (m * total_epochs as f32).round() as usize)
            .count();
        self.base * self.factor.powi(passed as i32)
    }
}
