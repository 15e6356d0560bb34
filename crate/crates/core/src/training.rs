//! Embedding: training passport models under schemes V1 (passport branch
//! only) and V2/V3 (public and passport branches summed per iteration, V3
//! with trigger samples mixed into every batch), plus plain training for
//! baselines and checkpoint persistence.
//!
//! The loss per branch is
//! `CE(real) + λ_t·CE(trigger) + λ_r·Σ_l sign_loss(γ^l, B^l, γ0)`,
//! the sign term applying only on the passport branch.

use crate::container::{Container, ContainerKind};
use crate::data::{epoch_batches, Dataset};
use crate::error::{Error, Result};
use crate::models::{Branch, ForwardPass, GradNeeds, Gradients, Mode, ModelSpec, NormKind, PassportModel, Scheme};
use crate::ops::loss::softmax_cross_entropy;
use crate::optim::{LrSchedule, Sgd};
use crate::passports::PassportSet;
use crate::signatures::{sign_loss_with_grad, Signature, DEFAULT_GAMMA0};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Labelled images used for black-box ownership probing.
pub type TriggerSet = Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    pub scheme: Scheme,
    pub lambda_t: f32,
    pub lambda_r: f32,
    pub gamma0: f32,
    pub epochs: usize,
    pub lr: LrSchedule,
    pub batch_size: usize,
    /// Trigger samples appended to every batch.
    pub trigger_batch: usize,
    pub momentum: f32,
    /// Applied to conv and linear kernels only.
    pub weight_decay: f32,
    pub seed: u64,
}

impl SchemeConfig {
    pub fn new(scheme: Scheme) -> Self {
        Self {
            scheme,
            lambda_t: if scheme == Scheme::V3 { 1.0 } else { 0.0 },
            lambda_r: 1.0,
            gamma0: DEFAULT_GAMMA0,
            epochs: 30,
            lr: LrSchedule::default(),
            batch_size: 64,
            trigger_batch: 2,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.gamma0 > 0.0) {
            return Err(Error::Config("gamma0 must be positive".into()));
        }
        if self.lambda_r < 0.0 || self.lambda_t < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        match self.scheme {
            Scheme::V1 | Scheme::V2 if self.lambda_t != 0.0 => {
                Err(Error::Config(format!("lambda_t must be 0 for {}, which uses no trigger set", self.scheme)))
            }
            Scheme::V3 if !(self.lambda_t > 0.0) => Err(Error::Config("V3 needs lambda_t > 0".into())),
            Scheme::V3 if self.trigger_batch == 0 => Err(Error::Config("V3 needs trigger_batch > 0".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub trigger_ce: f64,
    pub sign: f64,
    pub regularizer: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn add(&mut self, o: &LossBreakdown) {
        self.ce += o.ce;
        self.trigger_ce += o.trigger_ce;
        self.sign += o.sign;
        self.regularizer += o.regularizer;
        self.total += o.total;
    }

    fn scaled(mut self, k: f64) -> Self {
        self.ce *= k;
        self.trigger_ce *= k;
        self.sign *= k;
        self.regularizer *= k;
        self.total *= k;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f32,
    /// Mean over the epoch's iterations.
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: PassportModel,
    pub history: Vec<EpochRecord>,
    /// Forward+backward passes of single samples spent, summed over branches.
    pub sample_passes: u64,
}

/// Sample batch with optional trigger samples appended.
pub struct Batch<'a> {
    pub images: &'a [f32],
    pub labels: &'a [usize],
    pub trigger: Option<(&'a [f32], &'a [usize])>,
}

impl Batch<'_> {
    fn total(&self) -> usize {
        self.labels.len() + self.trigger.map_or(0, |t| t.1.len())
    }
}

/// Loss terms of one branch together with gradients when requested.
pub struct BranchLoss {
    pub loss: LossBreakdown,
    pub grads: Option<Gradients>,
    pub pass: ForwardPass,
}

/// Evaluates the combined loss on one branch. The sign term is included
/// when `branch` is a passport branch and `lambda_r > 0`.
#[allow(clippy::too_many_arguments)]
pub fn branch_loss(
    model: &PassportModel,
    branch: &Branch<'_>,
    mode: Mode,
    batch: &Batch<'_>,
    signature: Option<&Signature>,
    lambda_t: f32,
    lambda_r: f32,
    needs: Option<GradNeeds>,
) -> Result<BranchLoss> {
    let n = batch.labels.len();
    let mut images = batch.images.to_vec();
    let mut labels = batch.labels.to_vec();
    let mut weights = vec![1.0 / n as f32; n];
    if let Some((tx, ty)) = batch.trigger {
        if !ty.is_empty() {
            images.extend_from_slice(tx);
            labels.extend_from_slice(ty);
            weights.extend(std::iter::repeat_n(lambda_t / ty.len() as f32, ty.len()));
        }
    }
    let pass = model.forward(&images, labels.len(), branch, mode, needs.is_some())?;
    let classes = model.num_classes();
    let (_, dlogits) = softmax_cross_entropy(&pass.logits, classes, &labels, &weights);
    let mut loss = LossBreakdown::default();
    let (ce, _) = softmax_cross_entropy(&pass.logits[..n * classes], classes, &labels[..n], &vec![1.0 / n as f32; n]);
    loss.ce = ce as f64;
    let t = labels.len() - n;
    if t > 0 {
        let (tce, _) = softmax_cross_entropy(&pass.logits[n * classes..], classes, &labels[n..], &vec![1.0 / t as f32; t]);
        loss.trigger_ce = tce as f64;
    }
    let mut extra = BTreeMap::new();
    if let (Branch::Passport(set), true) = (branch, lambda_r > 0.0) {
        let sig = signature.ok_or_else(|| Error::Config("lambda_r > 0 requires a signature".into()))?;
        let untraced = if needs.is_none() { Some(model.passport_scales(set)?) } else { None };
        for &l in model.passport_layers() {
            let target = sig
                .layer(l)
                .ok_or_else(|| Error::Config(format!("signature has no signs for conv{}", l + 1)))?;
            let gamma = match &untraced {
                Some(scales) => &scales[&l].gamma,
                None => &pass.blocks[l].scale,
            };
            let (s, g) = sign_loss_with_grad(gamma, &target.signs, sig.gamma0)?;
            loss.sign += s as f64;
            extra.insert(l, g.into_iter().map(|v| lambda_r * v).collect::<Vec<f32>>());
        }
    }
    loss.total = loss.ce + lambda_t as f64 * loss.trigger_ce + lambda_r as f64 * loss.sign;
    let grads = match needs {
        Some(needs) => Some(model.backward(&pass, &dlogits, &extra, needs)?),
        None => None,
    };
    Ok(BranchLoss { loss, grads, pass })
}

/// `L = CE(f(W, X_r), y_r) + λ_t·CE(f(W, X_T), y_T) + λ_r·Σ_l sign_loss(γ^l, B^l, γ0)`
/// on the given branch, without gradients.
pub fn combined_loss(
    model: &PassportModel,
    branch: &Branch<'_>,
    batch: &Batch<'_>,
    signature: Option<&Signature>,
    cfg: &SchemeConfig,
) -> Result<LossBreakdown> {
    Ok(branch_loss(model, branch, Mode::Train, batch, signature, cfg.lambda_t, cfg.lambda_r, None)?.loss)
}

/// Extra penalty on model parameters (used by the feature watermark baseline).
pub trait Regularizer {
    /// Penalty value and its gradient per parameter slot of
    /// [`PassportModel::params`].
    fn penalty(&self, model: &PassportModel) -> Result<(f64, Vec<(usize, Vec<f32>)>)>;
}

struct StepResult {
    loss: LossBreakdown,
    grads: Gradients,
    stats_pass: Option<ForwardPass>,
    sample_passes: u64,
}

fn fit<F>(model: &mut PassportModel, data: &Dataset, cfg: &SchemeConfig, mut step: F) -> Result<TrainedModel>
where
    F: FnMut(&PassportModel, &Batch<'_>, usize) -> Result<StepResult>,
{
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if data.shape != model.spec.input_shape {
        return Err(Error::Config(format!("data shape {:?} vs model input {:?}", data.shape, model.spec.input_shape)));
    }
    if data.num_classes > model.num_classes() {
        return Err(Error::Config(format!("{} classes in data, model has {}", data.num_classes, model.num_classes())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let decay: Vec<bool> = model.param_kinds().iter().map(|k| k.is_kernel()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut passes = 0u64;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr.lr_at(epoch, cfg.epochs);
        let batches = epoch_batches(data.len(), cfg.batch_size, &mut rng);
        let mut sum = LossBreakdown::default();
        for idx in &batches {
            let (x, y) = data.gather(idx);
            let batch = Batch { images: &x, labels: &y, trigger: None };
            let out = step(model, &batch, epoch)?;
            if !out.loss.total.is_finite() || out.grads.params.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Training { epoch, message: format!("loss diverged to {}", out.loss.total) });
            }
            for (slot, (p, g)) in model.params_mut().into_iter().zip(&out.grads.params).enumerate() {
                sgd.update(slot, p, g, lr, decay[slot]);
            }
            if let Some(pass) = &out.stats_pass {
                model.update_running_stats(pass);
            }
            sum.add(&out.loss);
            passes += out.sample_passes;
        }
        let mean = sum.scaled(1.0 / batches.len().max(1) as f64);
        log::debug!("epoch {epoch} lr {lr} loss {:.4} sign {:.4}", mean.total, mean.sign);
        history.push(EpochRecord { epoch, lr, loss: mean });
    }
    Ok(TrainedModel { model: model.clone(), history, sample_passes: passes })
}

fn draw_trigger(trigger: Option<&TriggerSet>, t: usize, rng: &mut ChaCha8Rng) -> Option<(Vec<f32>, Vec<usize>)> {
    let set = trigger.filter(|s| !s.is_empty() && t > 0)?;
    let idx: Vec<usize> = (0..t).map(|_| rng.random_range(0..set.len())).collect();
    Some(set.gather(&idx))
}

fn check_signature_layout(model: &PassportModel, sig: &Signature) -> Result<()> {
    let want = model.passport_capacities();
    let got: Vec<(usize, usize)> = sig.layers.iter().map(|l| (l.layer, l.signs.len())).collect();
    if want != got {
        return Err(Error::Shape(format!("signature layout {got:?} does not match passport layers {want:?}")));
    }
    Ok(())
}

/// Scheme V1: every forward uses the passports; the sign loss covers all
/// passport layers.
pub fn train_v1(
    model: &PassportModel,
    data: &Dataset,
    passports: &PassportSet,
    signature: &Signature,
    cfg: &SchemeConfig,
) -> Result<TrainedModel> {
    if cfg.scheme != Scheme::V1 || model.spec.scheme != Scheme::V1 || model.spec.norm_kind() != NormKind::Batch {
        return Err(Error::SchemeViolation("train_v1 needs a V1 batch-norm model and config".into()));
    }
    cfg.validate()?;
    passports.check_against(model)?;
    check_signature_layout(model, signature)?;
    let mut m = model.clone();
    let branch = Branch::Passport(passports);
    fit(&mut m, data, cfg, |model, batch, _| {
        let out = branch_loss(model, &branch, Mode::Train, batch, Some(signature), 0.0, cfg.lambda_r, Some(GradNeeds::params()))?;
        Ok(StepResult {
            loss: out.loss,
            grads: out.grads.expect("requested"),
            sample_passes: batch.total() as u64,
            stats_pass: Some(out.pass),
        })
    })
}

/// Schemes V2/V3: each iteration sums the public-branch and passport-branch
/// losses and takes one step. V3 appends `trigger_batch` trigger samples to
/// the batch of both branches.
pub fn train_multitask(
    model: &PassportModel,
    data: &Dataset,
    passports: &PassportSet,
    signature: &Signature,
    trigger: Option<&TriggerSet>,
    cfg: &SchemeConfig,
) -> Result<TrainedModel> {
    if !model.spec.scheme.is_multitask() || model.spec.norm_kind() != NormKind::Group {
        return Err(Error::SchemeViolation("multi-task training needs a V2/V3 group-norm model".into()));
    }
    if cfg.scheme != model.spec.scheme {
        return Err(Error::Config(format!("config scheme {} vs model scheme {}", cfg.scheme, model.spec.scheme)));
    }
    match (cfg.scheme, trigger) {
        (Scheme::V3, None) => return Err(Error::Config("V3 training needs a trigger set".into())),
        (Scheme::V3, Some(t)) if t.is_empty() => return Err(Error::Config("V3 trigger set is empty".into())),
        (Scheme::V2, Some(_)) => return Err(Error::Config("V2 does not use a trigger set".into())),
        _ => {}
    }
    cfg.validate()?;
    passports.check_against(model)?;
    check_signature_layout(model, signature)?;
    let mut m = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7219_9e3a);
    let passport_branch = Branch::Passport(passports);
    fit(&mut m, data, cfg, |model, batch, _| {
        let picked = draw_trigger(trigger, cfg.trigger_batch, &mut rng);
        let b = Batch {
            images: batch.images,
            labels: batch.labels,
            trigger: picked.as_ref().map(|(x, y)| (x.as_slice(), y.as_slice())),
        };
        let public = branch_loss(model, &Branch::Public, Mode::Train, &b, None, cfg.lambda_t, 0.0, Some(GradNeeds::params()))?;
        let private = branch_loss(
            model,
            &passport_branch,
            Mode::Train,
            &b,
            Some(signature),
            cfg.lambda_t,
            cfg.lambda_r,
            Some(GradNeeds::params()),
        )?;
        let mut grads = public.grads.expect("requested");
        grads.add_assign(&private.grads.expect("requested"));
        let mut loss = public.loss;
        loss.add(&private.loss);
        Ok(StepResult { loss, grads, stats_pass: None, sample_passes: 2 * b.total() as u64 })
    })
}

/// Plain training without passports, optionally with trigger samples mixed
/// into each batch and an extra parameter regularizer.
pub fn train_plain(
    model: &PassportModel,
    data: &Dataset,
    trigger: Option<&TriggerSet>,
    regularizer: Option<&dyn Regularizer>,
    lambda_reg: f32,
    cfg: &SchemeConfig,
) -> Result<TrainedModel> {
    if !model.passport_layers().is_empty() {
        return Err(Error::Config("plain training needs a model without passport layers".into()));
    }
    let lambda_t = match trigger {
        Some(t) if !t.is_empty() && cfg.lambda_t > 0.0 => cfg.lambda_t,
        Some(t) if !t.is_empty() => 1.0,
        _ => 0.0,
    };
    let mut m = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7219_9e3a);
    let stats = model.spec.norm_kind() == NormKind::Batch;
    fit(&mut m, data, cfg, |model, batch, _| {
        let picked = draw_trigger(trigger, cfg.trigger_batch, &mut rng);
        let b = Batch {
            images: batch.images,
            labels: batch.labels,
            trigger: picked.as_ref().map(|(x, y)| (x.as_slice(), y.as_slice())),
        };
        let out = branch_loss(model, &Branch::Public, Mode::Train, &b, None, lambda_t, 0.0, Some(GradNeeds::params()))?;
        let mut grads = out.grads.expect("requested");
        let mut loss = out.loss;
        if let Some(reg) = regularizer {
            let (value, parts) = reg.penalty(model)?;
            for (slot, g) in parts {
                grads.params[slot].iter_mut().zip(&g).for_each(|(a, b)| *a += lambda_reg * b);
            }
            loss.regularizer = value;
            loss.total += lambda_reg as f64 * value;
        }
        Ok(StepResult { loss, grads, stats_pass: stats.then_some(out.pass), sample_passes: b.total() as u64 })
    })
}

/// Cross-entropy training of every parameter through a single branch, with
/// no sign or trigger term. Used for fine-tuning.
pub fn train_branch(model: &PassportModel, data: &Dataset, branch: &Branch<'_>, cfg: &SchemeConfig) -> Result<TrainedModel> {
    let mut m = model.clone();
    let stats = model.spec.norm_kind() == NormKind::Batch;
    fit(&mut m, data, cfg, |model, batch, _| {
        let out = branch_loss(model, branch, Mode::Train, batch, None, 0.0, 0.0, Some(GradNeeds::params()))?;
        Ok(StepResult {
            loss: out.loss,
            grads: out.grads.expect("requested"),
            sample_passes: batch.total() as u64,
            stats_pass: stats.then_some(out.pass),
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: ModelSpec,
    pub config: Option<SchemeConfig>,
    pub history: Vec<EpochRecord>,
    pub sample_passes: u64,
    pub weights_digest: String,
}

/// Writes model weights and training metadata. Passports are never part of
/// a checkpoint.
pub fn save_checkpoint(path: &Path, model: &PassportModel, config: Option<&SchemeConfig>, history: &[EpochRecord], sample_passes: u64) -> Result<()> {
    let meta = CheckpointMeta {
        spec: model.spec.clone(),
        config: config.cloned(),
        history: history.to_vec(),
        sample_passes,
        weights_digest: model.weights_digest(),
    };
    let mut c = Container::new(ContainerKind::Checkpoint, model.fingerprint(), serde_json::to_value(&meta)?);
    for (i, p) in model.params().into_iter().enumerate() {
        c.push(format!("param/{i}"), Tensor { shape: vec![p.len()], data: p.clone() });
    }
    for (i, b) in model.blocks.iter().enumerate() {
        c.push(format!("running_mean/{i}"), Tensor { shape: vec![b.running_mean.len()], data: b.running_mean.clone() });
        c.push(format!("running_var/{i}"), Tensor { shape: vec![b.running_var.len()], data: b.running_var.clone() });
    }
    c.write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(PassportModel, CheckpointMeta)> {
    let c = Container::read(path)?.expect_kind(ContainerKind::Checkpoint)?;
    let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())?;
    if meta.spec.fingerprint() != c.fingerprint {
        return Err(Error::Fingerprint { expected: meta.spec.fingerprint(), found: c.fingerprint });
    }
    let mut model = PassportModel::build(meta.spec.clone(), 0)?;
    for (i, p) in model.params_mut().into_iter().enumerate() {
        let t = c.array(&format!("param/{i}"))?;
        if t.data.len() != p.len() {
            return Err(Error::Format(format!("parameter {i} has {} values, expected {}", t.data.len(), p.len())));
        }
        p.copy_from_slice(&t.data);
    }
    for (i, b) in model.blocks.iter_mut().enumerate() {
        for (name, dst) in [("running_mean", &mut b.running_mean), ("running_var", &mut b.running_var)] {
            let t = c.array(&format!("{name}/{i}"))?;
            if t.data.len() != dst.len() {
                return Err(Error::Format(format!("{name}/{i} has the wrong length")));
            }
            dst.copy_from_slice(&t.data);
        }
    }
    if model.weights_digest() != meta.weights_digest {
        return Err(Error::Format("weights digest mismatch".into()));
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, SyntheticTask};
    use crate::models::Architecture;
    use crate::passports::gen_random_set;
    use crate::signatures::encode_signature;

    fn small(scheme: Scheme, layers: Vec<usize>) -> PassportModel {
        PassportModel::build(ModelSpec::new(Architecture::MiniNet, scheme, layers), 3).unwrap()
    }

    #[test]
    fn lambda_t_is_tied_to_the_scheme() {
        let mut c = SchemeConfig::new(Scheme::V2);
        c.validate().unwrap();
        c.lambda_t = 1.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = SchemeConfig::new(Scheme::V3);
        c.validate().unwrap();
        c.lambda_t = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn loss_terms_add_up() {
        let m = small(Scheme::V2, vec![1, 2]);
        let set = gen_random_set(&m, 1).unwrap();
        let sig = encode_signature("ab", &m.passport_capacities(), 0, DEFAULT_GAMMA0).unwrap();
        let data = synthetic(SyntheticTask::Shapes, 6, 2);
        let trig = crate::data::random_trigger_set(2, [3, 32, 32], 10, 4);
        let batch = Batch { images: &data.images, labels: &data.labels, trigger: Some((&trig.images, &trig.labels)) };
        let mut cfg = SchemeConfig::new(Scheme::V3);
        cfg.lambda_t = 0.5;
        cfg.lambda_r = 2.0;
        let l = combined_loss(&m, &Branch::Passport(&set), &batch, Some(&sig), &cfg).unwrap();

        // Independent recomputation of every component.
        let pass = m.forward(&data.images, 6, &Branch::Passport(&set), Mode::Train, false).unwrap();
        let ce = (0..6)
            .map(|i| softmax_cross_entropy(&pass.logits[i * 10..(i + 1) * 10], 10, &[data.labels[i]], &[1.0f32]).0 as f64)
            .sum::<f64>()
            / 6.0;
        let scales = m.passport_scales(&set).unwrap();
        let sign: f64 = scales
            .iter()
            .map(|(l, s)| crate::signatures::sign_loss(&s.gamma, &sig.layer(*l).unwrap().signs, 0.1).unwrap() as f64)
            .sum();
        assert!((l.ce - ce).abs() < 1e-4, "{} vs {ce}", l.ce);
        assert!((l.sign - sign).abs() < 1e-4);
        assert!((l.total - (l.ce + 0.5 * l.trigger_ce + 2.0 * l.sign)).abs() < 1e-9);
        assert!(l.trigger_ce > 0.0);
    }

    #[test]
    fn missing_signature_is_a_config_error() {
        let m = small(Scheme::V1, vec![2]);
        let set = gen_random_set(&m, 1).unwrap();
        let data = synthetic(SyntheticTask::Shapes, 2, 2);
        let batch = Batch { images: &data.images, labels: &data.labels, trigger: None };
        let cfg = SchemeConfig::new(Scheme::V1);
        assert!(matches!(combined_loss(&m, &Branch::Passport(&set), &batch, None, &cfg), Err(Error::Config(_))));
        let mut plain = cfg.clone();
        plain.lambda_r = 0.0;
        let l = combined_loss(&m, &Branch::Passport(&set), &batch, None, &plain).unwrap();
        assert_eq!(l.total, l.ce);
    }

    #[test]
    fn zero_epochs_returns_the_initial_model() {
        let m = small(Scheme::V1, vec![1, 2]);
        let set = gen_random_set(&m, 1).unwrap();
        let sig = encode_signature("", &m.passport_capacities(), 0, DEFAULT_GAMMA0).unwrap();
        let mut cfg = SchemeConfig::new(Scheme::V1);
        cfg.epochs = 0;
        let out = train_v1(&m, &synthetic(SyntheticTask::Shapes, 8, 0), &set, &sig, &cfg).unwrap();
        assert_eq!(out.model, m);
        assert_eq!(out.sample_passes, 0);
    }

    #[test]
    fn schemes_are_enforced() {
        let v1 = small(Scheme::V1, vec![1]);
        let set = gen_random_set(&v1, 1).unwrap();
        let sig = encode_signature("", &v1.passport_capacities(), 0, DEFAULT_GAMMA0).unwrap();
        let data = synthetic(SyntheticTask::Shapes, 4, 0);
        let err = train_multitask(&v1, &data, &set, &sig, None, &SchemeConfig::new(Scheme::V2)).unwrap_err();
        assert!(matches!(err, Error::SchemeViolation(_)));
        let v3 = small(Scheme::V3, vec![1]);
        let set3 = gen_random_set(&v3, 1).unwrap();
        let err = train_multitask(&v3, &data, &set3, &sig, None, &SchemeConfig::new(Scheme::V3)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = small(Scheme::V1, vec![1, 2]);
        m.blocks[0].running_mean[3] = 0.25;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let cfg = SchemeConfig::new(Scheme::V1);
        save_checkpoint(&path, &m, Some(&cfg), &[], 7).unwrap();
        let (back, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta.config, Some(cfg));
        assert_eq!(meta.sample_passes, 7);
    }
}
