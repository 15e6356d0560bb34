//! Ambiguity and removal attacks.
//!
//! Forging attacks on the baselines keep the model frozen and optimize only
//! the attacker's key (a projection matrix or trigger-image noise). Attacks
//! on passport models either search for counterfeit passports with frozen
//! weights (`fake1`, `fake2`, `fake3`) or modify the weights (fine-tuning,
//! pruning) and check whether the original evidence survives.

use crate::baselines::FeatureWatermark;
use crate::data::{accuracy, random_trigger_set, Dataset};
use crate::error::{Error, Result};
use crate::models::{Branch, GradNeeds, Mode, PassportModel, ScaleOverrides, ScaleShift};
use crate::ops::loss::{argmax_rows, softmax_cross_entropy};
use crate::optim::{Adam, LrSchedule};
use crate::passports::{gen_random_set, PassportSet};
use crate::signatures::{detect_signature, LayerSignature, Signature};
use crate::training::{branch_loss, train_branch, Batch, SchemeConfig, TriggerSet};
use crate::verification::{fake_passport_accuracies, trigger_detection_rate};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataAccess {
    None,
    TestOnly,
    TrainTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackBudget {
    pub iterations: usize,
    pub lr: f32,
    pub seed: u64,
    pub data_access: DataAccess,
    pub batch_size: usize,
}

impl AttackBudget {
    pub fn new(iterations: usize, lr: f32, seed: u64, data_access: DataAccess) -> Self {
        Self { iterations, lr, seed, data_access, batch_size: 64 }
    }

    /// Iteration count whose sample passes equal `fraction` of a training
    /// run that spent `training_passes`.
    pub fn iterations_for(training_passes: u64, fraction: f64, batch_size: usize) -> usize {
        ((training_passes as f64 * fraction) / batch_size.max(1) as f64).floor() as usize
    }

    pub fn sample_passes(&self) -> u64 {
        (self.iterations * self.batch_size) as u64
    }

    fn require(&self, access: DataAccess) -> Result<()> {
        if self.data_access != access {
            return Err(Error::Config(format!("attack needs data access {access:?}, budget grants {:?}", self.data_access)));
        }
        Ok(())
    }
}

/// The branch a deployed model answers queries with.
pub fn deployment_branch<'a>(model: &PassportModel, passports: &'a PassportSet) -> Branch<'a> {
    if model.spec.scheme.is_multitask() || model.passport_layers().is_empty() {
        Branch::Public
    } else {
        Branch::Passport(passports)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureForgeOutcome {
    pub watermark: FeatureWatermark,
    pub detection: f64,
    pub iterations: usize,
    pub converged: bool,
    pub weights_unchanged: bool,
}

/// Optimizes a projection `X'` so the frozen weights of `embed_layer`
/// decode to `new_bits`. Starts from `init` when given, else from a
/// standard-normal matrix.
pub fn forge_feature_watermark(
    model: &PassportModel,
    embed_layer: usize,
    new_bits: &[bool],
    init: Option<&[f32]>,
    budget: &AttackBudget,
) -> Result<FeatureForgeOutcome> {
    budget.require(DataAccess::None)?;
    let digest = model.weights_digest();
    let w = &model
        .blocks
        .get(embed_layer)
        .ok_or_else(|| Error::Config(format!("no conv layer with id {embed_layer}")))?
        .weight;
    let (t, m) = (new_bits.len(), w.len());
    let mut rng = ChaCha8Rng::seed_from_u64(budget.seed);
    let projection = match init {
        Some(x) if x.len() == t * m => x.to_vec(),
        Some(_) => return Err(Error::Contract("initial projection has the wrong size".into())),
        None => (0..t * m).map(|_| StandardNormal.sample(&mut rng)).collect(),
    };
    let mut forged = FeatureWatermark { projection, bits: new_bits.to_vec(), embed_layer, lambda_r: 0.0 };
    let norm2: f32 = w.iter().map(|v| v * v).sum::<f32>().max(f32::MIN_POSITIVE);
    let detect = |f: &FeatureWatermark| {
        let y = f.extract_from(w);
        y.iter().zip(new_bits).filter(|(&v, &b)| (v > 0.5) == b).count() as f64 / t.max(1) as f64
    };
    let mut iterations = 0;
    while detect(&forged) < 1.0 && iterations < budget.iterations {
        let y = forged.extract_from(w);
        // Per-row BCE gradient `(y_j − b_j)·w`, normalized by `‖w‖²` so
        // that `lr` is the step taken on the logit.
        for (j, (&yj, &b)) in y.iter().zip(new_bits).enumerate() {
            let k = budget.lr * (yj - b as u8 as f32) / norm2;
            forged.projection[j * m..(j + 1) * m].iter_mut().zip(w).for_each(|(x, &wi)| *x -= k * wi);
        }
        iterations += 1;
    }
    let detection = detect(&forged);
    Ok(FeatureForgeOutcome {
        watermark: forged,
        detection,
        iterations,
        converged: detection == 1.0,
        weights_unchanged: model.weights_digest() == digest,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerForgeConfig {
    pub n_base: usize,
    /// Weight `η` of the noise component.
    pub eta: f32,
    pub iterations: usize,
    /// Signed-gradient step on the noise, in noise units.
    pub step: f32,
    pub seed: u64,
}

impl Default for TriggerForgeConfig {
    fn default() -> Self {
        Self { n_base: 100, eta: 0.04, iterations: 50, step: 0.1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriggerForgeOutcome {
    /// `T_b + η·T_n` with their assigned labels.
    pub forged: TriggerSet,
    pub base: TriggerSet,
    pub detection: f64,
    pub iterations: usize,
    pub converged: bool,
    pub weights_unchanged: bool,
    pub sample_passes: u64,
}

/// Builds a counterfeit trigger set for a frozen model from random base
/// images `T_b` and random labels. The noise `T_n` starts uniform in
/// `[−1, 1]` and is optimized unconstrained by signed input-gradient steps.
pub fn forge_trigger_set(model: &PassportModel, branch: &Branch<'_>, cfg: &TriggerForgeConfig) -> Result<TriggerForgeOutcome> {
    if cfg.eta < 0.0 {
        return Err(Error::Contract("eta must be non-negative".into()));
    }
    let digest = model.weights_digest();
    let base = random_trigger_set(cfg.n_base, model.spec.input_shape, model.num_classes(), cfg.seed);
    let n = base.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7d1f);
    let mut noise: Vec<f32> = (0..base.images.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let compose = |noise: &[f32]| -> Vec<f32> { base.images.iter().zip(noise).map(|(b, t)| b + cfg.eta * t).collect() };
    let weights = vec![1.0 / n.max(1) as f32; n];
    let mut iterations = 0;
    let mut passes = 0u64;
    let hits = |x: &[f32]| -> Result<usize> {
        let p = argmax_rows(&model.forward(x, n, branch, Mode::Eval, false)?.logits, model.num_classes());
        Ok(p.iter().zip(&base.labels).filter(|(a, b)| a == b).count())
    };
    while n > 0 && iterations < cfg.iterations && hits(&compose(&noise))? < n {
        let x = compose(&noise);
        let pass = model.forward(&x, n, branch, Mode::Eval, true)?;
        let (_, dlogits) = softmax_cross_entropy(&pass.logits, model.num_classes(), &base.labels, &weights);
        let g = model.backward(&pass, &dlogits, &Default::default(), GradNeeds { input: true, ..GradNeeds::default() })?;
        let dx = g.input.expect("requested");
        for (t, d) in noise.iter_mut().zip(&dx) {
            *t -= cfg.step * d.signum() * (*d != 0.0) as u8 as f32;
        }
        iterations += 1;
        passes += n as u64;
    }
    let forged = Dataset { images: compose(&noise), ..base.clone() };
    let detection = if n == 0 { 0.0 } else { hits(&forged.images)? as f64 / n as f64 };
    Ok(TriggerForgeOutcome {
        forged,
        base,
        detection,
        iterations,
        converged: detection == 1.0,
        weights_unchanged: model.weights_digest() == digest,
        sample_passes: passes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomPassportStats {
    pub accuracies: Vec<f64>,
    pub mean: Option<f64>,
    pub max: Option<f64>,
}

/// fake1: accuracy under `n` independently drawn random passport sets.
pub fn attack_random_passport(model: &PassportModel, test: &Dataset, n: usize, seed: u64) -> Result<RandomPassportStats> {
    let accuracies = fake_passport_accuracies(model, test, n, seed)?;
    let mean = (!accuracies.is_empty()).then(|| accuracies.iter().sum::<f64>() / accuracies.len() as f64);
    let max = accuracies.iter().copied().reduce(f64::max);
    Ok(RandomPassportStats { accuracies, mean, max })
}

/// What the reverse-engineering attacker optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseTarget {
    /// Passport tensors, so the result is a presentable passport set.
    Passports,
    /// `γ`/`β` directly; strictly stronger, but yields no passport.
    ScaleFactors,
}

#[derive(Debug, Clone)]
pub struct ReverseOutcome {
    pub best_accuracy: f64,
    pub final_accuracy: f64,
    /// `(iteration, test accuracy)` at each evaluation point.
    pub history: Vec<(usize, f64)>,
    /// Best passports found (passport-tensor target only).
    pub passports: Option<PassportSet>,
    pub scales: Option<ScaleOverrides>,
    pub sample_passes: u64,
}

fn eval_points(iterations: usize) -> Vec<usize> {
    let mut pts = vec![0];
    let mut k = 1;
    while k < iterations {
        pts.push(k);
        k *= 2;
    }
    if iterations > 0 {
        pts.push(iterations);
    }
    pts
}

enum Free {
    Passports(PassportSet),
    Scales(ScaleOverrides),
}

impl Free {
    fn branch(&self) -> Branch<'_> {
        match self {
            Free::Passports(p) => Branch::Passport(p),
            Free::Scales(s) => Branch::Explicit(s),
        }
    }

    fn needs(&self) -> GradNeeds {
        match self {
            Free::Passports(_) => GradNeeds { passports: true, ..GradNeeds::default() },
            Free::Scales(_) => GradNeeds { explicit: true, ..GradNeeds::default() },
        }
    }

    fn step(&mut self, adam: &mut Adam, grads: &crate::models::Gradients, lr: f32) {
        match self {
            Free::Passports(set) => {
                for (slot, (l, pair)) in set.pairs.iter_mut().enumerate() {
                    let (dg, db) = &grads.passports[l];
                    adam.update(2 * slot, &mut pair.p_gamma.data, dg, lr);
                    adam.update(2 * slot + 1, &mut pair.p_beta.data, db, lr);
                }
            }
            Free::Scales(map) => {
                for (slot, (l, s)) in map.iter_mut().enumerate() {
                    let g = &grads.explicit[l];
                    adam.update(2 * slot, &mut s.gamma, &g.gamma, lr);
                    adam.update(2 * slot + 1, &mut s.beta, &g.beta, lr);
                }
            }
        }
    }
}

/// Optimizes free passports (or scale factors) against frozen weights with
/// cross entropy plus, when `signature` is given, the sign loss towards it.
/// Batch-norm statistics stay frozen (`Mode::Eval`).
fn optimize_free(
    model: &PassportModel,
    mut free: Free,
    signature: Option<&Signature>,
    train: &Dataset,
    test: &Dataset,
    budget: &AttackBudget,
) -> Result<(Free, ReverseOutcome)> {
    let mut rng = ChaCha8Rng::seed_from_u64(budget.seed ^ 0x00a7_7ac4);
    let mut adam = Adam::default();
    let points = eval_points(budget.iterations);
    let mut history = Vec::with_capacity(points.len());
    let mut best: Option<(f64, Free)> = None;
    let lambda_r = if signature.is_some() { 1.0 } else { 0.0 };
    let snapshot = |f: &Free| match f {
        Free::Passports(p) => Free::Passports(p.clone()),
        Free::Scales(s) => Free::Scales(s.clone()),
    };
    for it in 0..=budget.iterations {
        if points.contains(&it) {
            let acc = accuracy(model, test, &free.branch())?;
            history.push((it, acc));
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, snapshot(&free)));
            }
        }
        if it == budget.iterations {
            break;
        }
        let idx: Vec<usize> = (0..budget.batch_size).map(|_| rng.random_range(0..train.len())).collect();
        let (x, y) = train.gather(&idx);
        let batch = Batch { images: &x, labels: &y, trigger: None };
        let branch = free.branch();
        let bl = match (&free, signature) {
            (Free::Passports(_), Some(sig)) => {
                branch_loss(model, &branch, Mode::Eval, &batch, Some(sig), 0.0, lambda_r, Some(free.needs()))?
            }
            (Free::Scales(_), Some(sig)) => {
                // Sign loss applied to the free γ directly.
                let mut out = branch_loss(model, &branch, Mode::Eval, &batch, None, 0.0, 0.0, Some(free.needs()))?;
                let grads = out.grads.as_mut().expect("requested");
                for ls in &sig.layers {
                    let g = &out.pass.blocks[ls.layer].scale;
                    let (_, d) = crate::signatures::sign_loss_with_grad(g, &ls.signs, sig.gamma0)?;
                    let e = grads.explicit.get_mut(&ls.layer).expect("passport layer");
                    e.gamma.iter_mut().zip(d).for_each(|(a, b)| *a += b);
                }
                out
            }
            _ => branch_loss(model, &branch, Mode::Eval, &batch, None, 0.0, 0.0, Some(free.needs()))?,
        };
        let grads = bl.grads.expect("requested");
        free.step(&mut adam, &grads, budget.lr);
    }
    let final_accuracy = history.last().map(|h| h.1).unwrap_or(0.0);
    let (best_accuracy, best_free) = best.expect("iteration 0 is always evaluated");
    let (passports, scales) = match &best_free {
        Free::Passports(p) => (Some(p.clone()), None),
        Free::Scales(s) => (None, Some(s.clone())),
    };
    Ok((
        free,
        ReverseOutcome { best_accuracy, final_accuracy, history, passports, scales, sample_passes: budget.sample_passes() },
    ))
}

/// fake2: an attacker with the training data searches for passports that
/// restore accuracy of the frozen model, starting from random passports.
pub fn attack_reverse_passport(
    model: &PassportModel,
    train: &Dataset,
    test: &Dataset,
    budget: &AttackBudget,
    target: ReverseTarget,
) -> Result<ReverseOutcome> {
    budget.require(DataAccess::TrainTest)?;
    if model.passport_layers().is_empty() {
        return Err(Error::Config("model has no passport layers".into()));
    }
    let start = gen_random_set(model, budget.seed)?;
    let free = match target {
        ReverseTarget::Passports => Free::Passports(start),
        ReverseTarget::ScaleFactors => Free::Scales(model.passport_scales(&start)?),
    };
    Ok(optimize_free(model, free, None, train, test, budget)?.1)
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Contract(format!("flip fraction {fraction} outside [0, 1]")));
    }
    Ok(())
}

/// Flips `round(fraction · C)` signs chosen uniformly over the channels of
/// `layers`. Returns the modified signature and the flipped `(layer, channel)` list.
pub fn flip_signature(signature: &Signature, fraction: f64, layers: &[usize], seed: u64) -> Result<(Signature, Vec<(usize, usize)>)> {
    check_fraction(fraction)?;
    let slots: Vec<(usize, usize)> = signature
        .layers
        .iter()
        .filter(|l| layers.contains(&l.layer))
        .flat_map(|l| (0..l.signs.len()).map(move |c| (l.layer, c)))
        .collect();
    if let Some(&bad) = layers.iter().find(|l| signature.layer(**l).is_none()) {
        return Err(Error::Config(format!("conv{} carries no signature", bad + 1)));
    }
    let k = (fraction * slots.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<(usize, usize)> = sample(&mut rng, slots.len(), k).into_iter().map(|i| slots[i]).collect();
    chosen.sort_unstable();
    let layers_out: Vec<LayerSignature> = signature
        .layers
        .iter()
        .map(|l| {
            let mut signs = l.signs.clone();
            for &(_, c) in chosen.iter().filter(|(ll, _)| *ll == l.layer) {
                signs[c] = -signs[c];
            }
            LayerSignature { layer: l.layer, signs }
        })
        .collect();
    Ok((Signature::from_layers(layers_out, signature.ascii_payload.clone(), signature.gamma0)?, chosen))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipOutcome {
    pub fraction: f64,
    pub flipped: usize,
    pub accuracy: f64,
}

/// Evaluation-time transform: negates the `γ` that the genuine passports
/// produce on a random `fraction` of channels in `layers`.
pub fn attack_flip_signs(
    model: &PassportModel,
    passports: &PassportSet,
    signature: &Signature,
    fraction: f64,
    layers: &[usize],
    test: &Dataset,
    seed: u64,
) -> Result<FlipOutcome> {
    let (_, chosen) = flip_signature(signature, fraction, layers, seed)?;
    let mut scales = model.passport_scales(passports)?;
    for &(l, c) in &chosen {
        let s: &mut ScaleShift = scales.get_mut(&l).ok_or_else(|| Error::Config(format!("conv{} is not a passport layer", l + 1)))?;
        s.gamma[c] = -s.gamma[c];
    }
    Ok(FlipOutcome { fraction, flipped: chosen.len(), accuracy: accuracy(model, test, &Branch::Explicit(&scales))? })
}

#[derive(Debug, Clone)]
pub struct InsiderOutcome {
    pub flip_fraction: f64,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub modified_signature: Signature,
    pub passports: PassportSet,
    /// Agreement of the re-optimized passports with the modified signature.
    pub modified_match_rate: f64,
    /// Agreement with the owner's signature.
    pub original_match_rate: f64,
    pub sample_passes: u64,
}

/// fake3: the insider flips a fraction of the signature, then re-optimizes
/// the original passports under the modified sign constraint with `W`
/// frozen.
pub fn attack_insider(
    model: &PassportModel,
    original: &PassportSet,
    signature: &Signature,
    flip_fraction: f64,
    train: &Dataset,
    test: &Dataset,
    budget: &AttackBudget,
) -> Result<InsiderOutcome> {
    budget.require(DataAccess::TrainTest)?;
    let layers: Vec<usize> = model.passport_layers().to_vec();
    let (modified, _) = flip_signature(signature, flip_fraction, &layers, budget.seed)?;
    let accuracy_before = accuracy(model, test, &deployment_branch_for_passports(original))?;
    let (free, _) = optimize_free(model, Free::Passports(original.clone()), Some(&modified), train, test, budget)?;
    let Free::Passports(forged) = free else { unreachable!("passport target") };
    let accuracy_after = accuracy(model, test, &Branch::Passport(&forged))?;
    let modified_match_rate = detect_signature(model, &forged, Some(&modified))?.match_rate.expect("reference");
    let original_match_rate = detect_signature(model, &forged, Some(signature))?.match_rate.expect("reference");
    Ok(InsiderOutcome {
        flip_fraction,
        accuracy_before,
        accuracy_after,
        modified_signature: modified,
        passports: forged,
        modified_match_rate,
        original_match_rate,
        sample_passes: budget.sample_passes(),
    })
}

fn deployment_branch_for_passports(p: &PassportSet) -> Branch<'_> {
    Branch::Passport(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: LrSchedule,
    pub batch_size: usize,
    pub momentum: f32,
    pub weight_decay: f32,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { epochs: 10, lr: LrSchedule::default(), batch_size: 64, momentum: 0.9, weight_decay: 5e-4, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub new_task_accuracy: Option<f64>,
    pub signature_detection: f64,
    pub trigger_detection: Option<f64>,
    pub model: PassportModel,
}

/// Transfers a protected model to a new task: fresh head, every weight
/// fine-tuned (V1 through its distributed passports, V2/V3 through the
/// public branch), then the original evidence is re-checked. Zero epochs
/// leaves the model untouched.
pub fn removal_finetune(
    model: &PassportModel,
    passports: &PassportSet,
    signature: &Signature,
    trigger: Option<&TriggerSet>,
    new_train: &Dataset,
    new_test: &Dataset,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    let mut tuned = model.clone();
    let mut new_task_accuracy = None;
    if cfg.epochs > 0 {
        tuned.replace_head(new_train.num_classes, cfg.seed ^ 0x00f1_4e70);
        let sc = SchemeConfig {
            epochs: cfg.epochs,
            lr: cfg.lr.clone(),
            batch_size: cfg.batch_size,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            seed: cfg.seed,
            ..SchemeConfig::new(model.spec.scheme)
        };
        let branch = deployment_branch(&tuned, passports);
        tuned = train_branch(&tuned, new_train, &branch, &sc)?.model;
        new_task_accuracy = Some(accuracy(&tuned, new_test, &deployment_branch(&tuned, passports))?);
    }
    let signature_detection = detect_signature(&tuned, passports, Some(signature))?.match_rate.expect("reference");
    let trigger_detection = match trigger {
        Some(t) => Some(trigger_detection_rate(&tuned, t, &Branch::Public)?),
        None => None,
    };
    Ok(FinetuneOutcome { new_task_accuracy, signature_detection, trigger_detection, model: tuned })
}

/// Global pruning order over every conv and linear kernel weight: ascending
/// `|w|`, ties broken by `(slot, index)`. Pruning rate `r` zeroes the first
/// `floor(r · N)` entries, so masks are nested across rates.
pub fn pruning_order(model: &PassportModel) -> Vec<(usize, usize)> {
    let kinds = model.param_kinds();
    let params = model.params();
    let mut all: Vec<(f32, usize, usize)> = Vec::new();
    for (slot, (kind, p)) in kinds.iter().zip(&params).enumerate() {
        if kind.is_kernel() {
            all.extend(p.iter().enumerate().map(|(i, w)| (w.abs(), slot, i)));
        }
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    all.into_iter().map(|(_, s, i)| (s, i)).collect()
}

pub fn prune(model: &PassportModel, rate: f64) -> Result<PassportModel> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Contract(format!("pruning rate {rate} outside [0, 1)")));
    }
    let order = pruning_order(model);
    let k = (rate * order.len() as f64).floor() as usize;
    let mut pruned = model.clone();
    let mut params = pruned.params_mut();
    for &(s, i) in &order[..k] {
        params[s][i] = 0.0;
    }
    Ok(pruned)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneOutcome {
    pub rate: f64,
    pub accuracy: f64,
    /// Signature match rate with the original passports.
    pub detection: f64,
}

/// Prunes at `rate` and evaluates deployment accuracy and signature detection.
pub fn removal_prune(
    model: &PassportModel,
    rate: f64,
    passports: &PassportSet,
    signature: &Signature,
    test: &Dataset,
) -> Result<(PassportModel, PruneOutcome)> {
    let pruned = prune(model, rate)?;
    let acc = accuracy(&pruned, test, &deployment_branch(&pruned, passports))?;
    let detection = detect_signature(&pruned, passports, Some(signature))?.match_rate.expect("reference");
    Ok((pruned, PruneOutcome { rate, accuracy: acc, detection }))
}

pub fn prune_curve(model: &PassportModel, rates: &[f64], passports: &PassportSet, signature: &Signature, test: &Dataset) -> Result<Vec<PruneOutcome>> {
    rates.iter().map(|&r| Ok(removal_prune(model, r, passports, signature, test)?.1)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, SyntheticTask};
    use crate::models::{Architecture, ModelSpec, Scheme};
    use crate::signatures::{encode_signature, DEFAULT_GAMMA0};
    use proptest::prelude::*;

    fn v1() -> (PassportModel, PassportSet, Signature) {
        let m = PassportModel::build(ModelSpec::new(Architecture::MiniNet, Scheme::V1, vec![1, 2]).with_input([3, 8, 8]), 2).unwrap();
        let set = gen_random_set(&m, 1).unwrap();
        let sig = encode_signature("ab", &m.passport_capacities(), 0, DEFAULT_GAMMA0).unwrap();
        (m, set, sig)
    }

    #[test]
    fn zero_rate_pruning_is_identity() {
        let (m, _, _) = v1();
        assert_eq!(prune(&m, 0.0).unwrap(), m);
        assert!(prune(&m, 1.0).is_err());
    }

    #[test]
    fn pruning_is_idempotent() {
        let (m, _, _) = v1();
        let once = prune(&m, 0.4).unwrap();
        assert_eq!(prune(&once, 0.4).unwrap(), once);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn pruning_masks_are_nested(seed in any::<u64>(), r1 in 0.0f64..0.99, r2 in 0.0f64..0.99) {
            let (lo, hi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
            let m = PassportModel::build(ModelSpec::new(Architecture::MiniNet, Scheme::V2, vec![2]).with_input([3, 8, 8]), seed).unwrap();
            let a = prune(&m, lo).unwrap();
            let b = prune(&m, hi).unwrap();
            for ((pa, pb), k) in a.params().iter().zip(b.params()).zip(m.param_kinds()) {
                if k.is_kernel() {
                    for (x, y) in pa.iter().zip(pb.iter()) {
                        prop_assert!(*x != 0.0 || *y == 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn flip_fraction_is_validated() {
        let (_, _, sig) = v1();
        assert!(matches!(flip_signature(&sig, 1.5, &[1, 2], 0), Err(Error::Contract(_))));
        let (same, chosen) = flip_signature(&sig, 0.0, &[1, 2], 0).unwrap();
        assert_eq!(same, sig);
        assert!(chosen.is_empty());
        let (all, chosen) = flip_signature(&sig, 1.0, &[2], 0).unwrap();
        assert_eq!(chosen.len(), 64);
        assert_eq!(all.layers[0], sig.layers[0]);
        assert!(all.layers[1].signs.iter().zip(&sig.layers[1].signs).all(|(a, b)| *a == -*b));
    }

    #[test]
    fn zero_flip_keeps_accuracy() {
        let (m, set, sig) = v1();
        let test = synthetic(SyntheticTask::Shapes, 4, 0);
        let test = Dataset { images: test.images.iter().step_by(16).copied().collect(), shape: [3, 8, 8], ..test };
        let base = accuracy(&m, &test, &Branch::Passport(&set)).unwrap();
        assert_eq!(attack_flip_signs(&m, &set, &sig, 0.0, &[1, 2], &test, 3).unwrap().accuracy, base);
    }

    #[test]
    fn feature_forging_with_original_key_needs_no_iterations() {
        let m = PassportModel::build(ModelSpec::baseline(Architecture::MiniNet, Scheme::V1), 4).unwrap();
        let mut wm = FeatureWatermark::generate(&m, 1, 64, 3).unwrap();
        wm.bits = wm.extract_from(&m.blocks[1].weight).iter().map(|&v| v > 0.5).collect();
        let out = forge_feature_watermark(&m, 1, &wm.bits, Some(&wm.projection), &AttackBudget::new(50, 1.0, 0, DataAccess::None)).unwrap();
        assert_eq!(out.iterations, 0);
        assert!(out.converged && out.weights_unchanged);
        let bad = AttackBudget::new(50, 1.0, 0, DataAccess::TrainTest);
        assert!(forge_feature_watermark(&m, 1, &wm.bits, None, &bad).is_err());
    }

    #[test]
    fn feature_forging_reaches_arbitrary_bits() {
        let m = PassportModel::build(ModelSpec::baseline(Architecture::MiniNet, Scheme::V1), 4).unwrap();
        let bits: Vec<bool> = (0..256).map(|i| i % 3 == 0).collect();
        let out = forge_feature_watermark(&m, 1, &bits, None, &AttackBudget::new(50, 1.0, 9, DataAccess::None)).unwrap();
        assert!(out.converged, "{}", out.detection);
        assert!(out.weights_unchanged);
    }

    #[test]
    fn zero_noise_cannot_move_predictions() {
        let m = PassportModel::build(ModelSpec::baseline(Architecture::MiniNet, Scheme::V1).with_input([3, 8, 8]), 4).unwrap();
        let cfg = TriggerForgeConfig { n_base: 20, eta: 0.0, iterations: 5, ..TriggerForgeConfig::default() };
        let out = forge_trigger_set(&m, &Branch::Public, &cfg).unwrap();
        assert_eq!(out.forged.images, out.base.images);
        let hits = crate::data::predict_all(&m, &out.base, &Branch::Public)
            .unwrap()
            .iter()
            .zip(&out.base.labels)
            .filter(|(a, b)| a == b)
            .count();
        assert_eq!(out.detection, hits as f64 / 20.0);
    }

    #[test]
    fn forged_trigger_pixels_match_genuine_distribution() {
        let m = PassportModel::build(ModelSpec::baseline(Architecture::MiniNet, Scheme::V1), 4).unwrap();
        let cfg = TriggerForgeConfig { n_base: 40, iterations: 30, seed: 2, ..TriggerForgeConfig::default() };
        let out = forge_trigger_set(&m, &Branch::Public, &cfg).unwrap();
        assert!(out.converged, "{}", out.detection);
        let genuine = random_trigger_set(40, [3, 32, 32], 10, 77);
        let (_, p) = crate::stats::ks_two_sample(&crate::experiment::pixel_sample(&genuine, 1500, 1), &crate::experiment::pixel_sample(&out.forged, 1500, 2));
        assert!(p > 0.01, "KS p {p}");
    }

    #[test]
    fn reverse_attack_history_is_monotone_in_budget() {
        let (m, _, _) = v1();
        let data = synthetic(SyntheticTask::Shapes, 8, 0);
        let small = Dataset {
            images: data.images.chunks(1024).map(|c| c.iter().step_by(16).copied().collect::<Vec<_>>()).flatten().collect(),
            shape: [3, 8, 8],
            ..data
        };
        let mut one = AttackBudget::new(1, 0.01, 3, DataAccess::TrainTest);
        one.batch_size = 4;
        let mut full = one.clone();
        full.iterations = 6;
        let a = attack_reverse_passport(&m, &small, &small, &one, ReverseTarget::Passports).unwrap();
        let b = attack_reverse_passport(&m, &small, &small, &full, ReverseTarget::Passports).unwrap();
        assert!(a.best_accuracy <= b.best_accuracy);
        assert_eq!(a.history[..2], b.history[..2]);
        assert!(matches!(
            attack_reverse_passport(&m, &small, &small, &AttackBudget::new(1, 0.01, 0, DataAccess::None), ReverseTarget::Passports),
            Err(Error::Config(_))
        ));
    }
}
