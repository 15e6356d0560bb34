//! Passport-enabled CNNs.
//!
//! A model is a stack of conv blocks (`conv -> norm -> affine -> relu [-> pool]`)
//! followed by a linear head. In a passport block the affine scale and shift
//! are not stored: they are recomputed on every forward pass as
//! `γ = Avg(W * P_γ)`, `β = Avg(W * P_β)` from the block's own kernel and the
//! passport presented at run time. Multi-task models (V2/V3) additionally
//! carry public `γ`/`β` vectors used for passport-free inference.

use crate::error::{Error, Result};
use crate::ops::conv::{
    conv2d_backward, conv2d_forward, passport_patch_mean, passport_scale,
    passport_scale_backward_passport, passport_scale_backward_weight, ConvCache, ConvGeom,
};
use crate::ops::gemm;
use crate::ops::loss::argmax_rows;
use crate::ops::norm::{
    batch_norm_backward, batch_norm_eval, batch_norm_train, channel_affine,
    channel_affine_backward, group_count, group_norm, group_norm_backward, NormCache,
};
use crate::ops::pool::{max_pool2, max_pool2_backward};
use crate::ops::Trans;
use crate::passports::{PassportPair, PassportSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    MiniNet,
    AlexNetP,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub pool_after: bool,
}

const fn conv(c_in: usize, c_out: usize, kernel: usize, padding: usize, pool_after: bool) -> ConvSpec {
    ConvSpec { c_in, c_out, kernel, stride: 1, padding, pool_after }
}

impl Architecture {
    pub fn conv_specs(self) -> Vec<ConvSpec> {
        match self {
            Architecture::MiniNet => vec![conv(3, 16, 3, 1, true), conv(16, 32, 3, 1, true), conv(32, 64, 3, 1, true)],
            Architecture::AlexNetP => vec![
                conv(3, 64, 5, 2, true),
                conv(64, 192, 5, 2, true),
                conv(192, 384, 3, 1, false),
                conv(384, 256, 3, 1, false),
                conv(256, 256, 3, 1, true),
            ],
        }
    }

    /// Zero-based conv indices that carry passports by default
    /// (conv2/conv3 for MiniNet, conv3/4/5 for AlexNet_p).
    pub fn default_passport_layers(self) -> Vec<usize> {
        match self {
            Architecture::MiniNet => vec![1, 2],
            Architecture::AlexNetP => vec![2, 3, 4],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Architecture::MiniNet => "mininet",
            Architecture::AlexNetP => "alexnet_p",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mininet" => Ok(Architecture::MiniNet),
            "alexnet_p" | "alexnet" | "alexnetp" => Ok(Architecture::AlexNetP),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

/// Ownership verification scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Passports are distributed and required for inference.
    V1,
    /// Private passports, public branch for inference.
    V2,
    /// V2 plus an embedded trigger set for black-box probing.
    V3,
}

impl Scheme {
    pub fn norm_kind(self) -> NormKind {
        match self {
            Scheme::V1 => NormKind::Batch,
            Scheme::V2 | Scheme::V3 => NormKind::Group,
        }
    }

    pub fn is_multitask(self) -> bool {
        !matches!(self, Scheme::V1)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::V1 => "v1",
            Scheme::V2 => "v2",
            Scheme::V3 => "v3",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v1" => Ok(Scheme::V1),
            "v2" => Ok(Scheme::V2),
            "v3" => Ok(Scheme::V3),
            other => Err(Error::Config(format!("unknown scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    Group,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub scheme: Scheme,
    pub passport_layers: Vec<usize>,
    pub num_classes: usize,
    /// `[channels, height, width]` of one input image.
    pub input_shape: [usize; 3],
}

impl ModelSpec {
    pub fn new(architecture: Architecture, scheme: Scheme, passport_layers: Vec<usize>) -> Self {
        Self { architecture, scheme, passport_layers, num_classes: 10, input_shape: [3, 32, 32] }
    }

    /// Same architecture and scheme without passport layers.
    pub fn baseline(architecture: Architecture, scheme: Scheme) -> Self {
        Self::new(architecture, scheme, Vec::new())
    }

    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }

    pub fn with_input(mut self, input_shape: [usize; 3]) -> Self {
        self.input_shape = input_shape;
        self
    }

    pub fn norm_kind(&self) -> NormKind {
        self.scheme.norm_kind()
    }

    /// Identifies the passport-relevant structure: architecture, input shape
    /// and passport layer ids. Stable across head replacement.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{}|{:?}|{:?}", self.architecture, self.input_shape, self.passport_layers));
        hex::encode(&h.finalize()[..16])
    }
}

/// Scale and shift of one normalization layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleShift {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

pub type ScaleOverrides = BTreeMap<usize, ScaleShift>;

#[derive(Debug, Clone, PartialEq)]
pub enum Affine {
    /// Ordinary learnable affine parameters.
    Learned(ScaleShift),
    /// Passport layer; `public` exists only for multi-task schemes.
    Passport { public: Option<ScaleShift> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub spec: ConvSpec,
    pub geom: ConvGeom,
    pub norm: NormKind,
    /// `[c_out, c_in * k * k]`.
    pub weight: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub affine: Affine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Where a passport layer pulls its scale and shift from on a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Branch<'a> {
    /// Public parameters (V2/V3 inference; the only branch for plain models).
    Public,
    /// `γ, β` derived from the presented passports.
    Passport(&'a PassportSet),
    /// `γ, β` supplied directly, bypassing passports.
    Explicit(&'a ScaleOverrides),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm uses mini-batch statistics.
    Train,
    /// Batch norm uses running statistics.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SourceKind {
    Learned,
    Public,
    Passport,
    Explicit,
}

#[derive(Debug, Clone)]
enum BlockSource<'a> {
    Learned,
    Public,
    Pair(&'a PassportPair),
    Explicit(&'a ScaleShift),
}

#[derive(Debug, Clone)]
pub struct BlockTrace {
    kind: SourceKind,
    conv: ConvCache<f32>,
    norm: NormCache<f32>,
    pre_act: Vec<f32>,
    pool_arg: Option<Vec<u32>>,
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
    batch_stats: Option<(Vec<f32>, Vec<f32>)>,
    patch_means: Option<(Vec<f32>, Vec<f32>)>,
}

/// Result of a forward pass; keeps whatever backward needs when asked to.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Vec<f32>,
    pub batch: usize,
    pub blocks: Vec<BlockTrace>,
    features: Vec<f32>,
    traced: bool,
}

impl ForwardPass {
    /// `γ` actually used by each passport layer in this pass.
    pub fn passport_gammas(&self, layers: &[usize]) -> BTreeMap<usize, Vec<f32>> {
        layers.iter().map(|&l| (l, self.blocks[l].scale.clone())).collect()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradNeeds {
    pub params: bool,
    pub passports: bool,
    pub explicit: bool,
    pub input: bool,
}

impl GradNeeds {
    pub fn params() -> Self {
        Self { params: true, ..Self::default() }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Gradients {
    /// Aligned with [`PassportModel::params_mut`].
    pub params: Vec<Vec<f32>>,
    /// `(dP_γ, dP_β)` per passport layer.
    pub passports: BTreeMap<usize, (Vec<f32>, Vec<f32>)>,
    pub explicit: BTreeMap<usize, ScaleShift>,
    pub input: Option<Vec<f32>>,
}

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight(usize),
    NormScale(usize),
    NormShift(usize),
    PublicScale(usize),
    PublicShift(usize),
    HeadWeight,
    HeadBias,
}

impl ParamKind {
    /// Conv and linear kernels, i.e. what magnitude pruning acts on.
    pub fn is_kernel(self) -> bool {
        matches!(self, ParamKind::ConvWeight(_) | ParamKind::HeadWeight)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassportModel {
    pub spec: ModelSpec,
    pub blocks: Vec<ConvBlock>,
    pub head: Linear,
}

fn he_normal(rng: &mut ChaCha8Rng, fan_in: usize, len: usize) -> Vec<f32> {
    let dist = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("valid std");
    (0..len).map(|_| dist.sample(rng)).collect()
}

impl ConvBlock {
    fn resolve_source<'a>(&self, source: &BlockSource<'a>, index: usize) -> Result<(Vec<f32>, Vec<f32>, Option<(Vec<f32>, Vec<f32>)>)> {
        let c = self.geom.c_out;
        match (source, &self.affine) {
            (BlockSource::Learned, Affine::Learned(p)) => Ok((p.gamma.clone(), p.beta.clone(), None)),
            (BlockSource::Public, Affine::Passport { public: Some(p) }) => Ok((p.gamma.clone(), p.beta.clone(), None)),
            (BlockSource::Public, Affine::Passport { public: None }) => Err(Error::SchemeViolation(format!(
                "conv{} is a V1 passport layer and has no public branch",
                index + 1
            ))),
            (BlockSource::Pair(pair), Affine::Passport { .. }) => {
                self.check_passport(pair, index)?;
                let mg = passport_patch_mean(&pair.p_gamma.data, &self.geom);
                let mb = passport_patch_mean(&pair.p_beta.data, &self.geom);
                let g = passport_scale(&self.weight, &mg, &self.geom);
                let b = passport_scale(&self.weight, &mb, &self.geom);
                Ok((g, b, Some((mg, mb))))
            }
            (BlockSource::Explicit(s), Affine::Passport { .. }) => {
                if s.gamma.len() != c || s.beta.len() != c {
                    return Err(Error::Shape(format!(
                        "conv{} expects {c} scale factors, got {}/{}",
                        index + 1,
                        s.gamma.len(),
                        s.beta.len()
                    )));
                }
                Ok((s.gamma.clone(), s.beta.clone(), None))
            }
            _ => Err(Error::Config(format!("conv{} does not accept this scale source", index + 1))),
        }
    }

    pub fn passport_shape(&self) -> [usize; 3] {
        [self.geom.c_in, self.geom.height, self.geom.width]
    }

    fn check_passport(&self, pair: &PassportPair, index: usize) -> Result<()> {
        let want = self.passport_shape().to_vec();
        for (slot, t) in [("P_gamma", &pair.p_gamma), ("P_beta", &pair.p_beta)] {
            if t.shape != want {
                return Err(Error::Shape(format!(
                    "{slot} for conv{} has shape {:?}, host conv expects {:?}",
                    index + 1,
                    t.shape,
                    want
                )));
            }
        }
        Ok(())
    }

    /// `γ = Avg(W * P_γ)` and `β = Avg(W * P_β)` for this block.
    pub fn scales_from_passport(&self, pair: &PassportPair, index: usize) -> Result<ScaleShift> {
        let (gamma, beta, _) = self.resolve_source(&BlockSource::Pair(pair), index)?;
        Ok(ScaleShift { gamma, beta })
    }

    fn forward(
        &self,
        x: &[f32],
        batch: usize,
        source: &BlockSource<'_>,
        mode: Mode,
        keep: bool,
        index: usize,
    ) -> Result<(Vec<f32>, Option<BlockTrace>)> {
        let (scale, shift, patch_means) = self.resolve_source(source, index)?;
        let g = &self.geom;
        let (c, hw) = (g.c_out, g.out_positions());
        let (conv, conv_cache) = conv2d_forward(x, batch, &self.weight, g, keep);
        let (norm, batch_stats) = match (self.norm, mode) {
            (NormKind::Batch, Mode::Train) => {
                let (cache, mean, var) = batch_norm_train(&conv, batch, c, hw);
                (cache, Some((mean, var)))
            }
            (NormKind::Batch, Mode::Eval) => {
                (batch_norm_eval(&conv, batch, c, hw, &self.running_mean, &self.running_var), None)
            }
            (NormKind::Group, _) => (group_norm(&conv, batch, c, hw, group_count(c)), None),
        };
        let pre_act = channel_affine(&norm.xhat, batch, c, hw, &scale, &shift);
        let act: Vec<f32> = pre_act.iter().map(|&v| v.max(0.0)).collect();
        let (out, pool_arg) = if self.spec.pool_after {
            let (p, arg) = max_pool2(&act, batch * c, g.out_height(), g.out_width());
            (p, Some(arg))
        } else {
            (act, None)
        };
        let trace = keep.then(|| BlockTrace {
            kind: match source {
                BlockSource::Learned => SourceKind::Learned,
                BlockSource::Public => SourceKind::Public,
                BlockSource::Pair(_) => SourceKind::Passport,
                BlockSource::Explicit(_) => SourceKind::Explicit,
            },
            conv: conv_cache,
            norm,
            pre_act,
            pool_arg,
            scale,
            shift,
            batch_stats,
            patch_means,
        });
        Ok((out, trace))
    }

    fn out_len(&self) -> usize {
        let g = &self.geom;
        if self.spec.pool_after {
            g.c_out * (g.out_height() / 2) * (g.out_width() / 2)
        } else {
            g.out_len()
        }
    }
}

impl PassportModel {
    /// Deterministic construction with He-normal kernels. An empty
    /// `passport_layers` list yields the plain baseline architecture.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        let convs = spec.architecture.conv_specs();
        let mut layers = spec.passport_layers.clone();
        layers.sort_unstable();
        layers.dedup();
        if layers.len() != spec.passport_layers.len() {
            return Err(Error::Config("duplicate passport layer id".into()));
        }
        if let Some(&bad) = layers.iter().find(|&&l| l >= convs.len()) {
            return Err(Error::Config(format!(
                "passport layer id {bad} out of range: {} has {} conv layers",
                spec.architecture,
                convs.len()
            )));
        }
        if spec.input_shape[0] != convs[0].c_in {
            return Err(Error::Config(format!(
                "{} expects {}-channel input, got {}",
                spec.architecture, convs[0].c_in, spec.input_shape[0]
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let norm = spec.norm_kind();
        let (mut h, mut w) = (spec.input_shape[1], spec.input_shape[2]);
        let mut blocks = Vec::with_capacity(convs.len());
        for (i, cs) in convs.iter().enumerate() {
            if h + 2 * cs.padding < cs.kernel || w + 2 * cs.padding < cs.kernel {
                return Err(Error::Config(format!("input {:?} too small for conv{}", spec.input_shape, i + 1)));
            }
            let geom = ConvGeom {
                c_in: cs.c_in,
                height: h,
                width: w,
                c_out: cs.c_out,
                kernel: cs.kernel,
                stride: cs.stride,
                padding: cs.padding,
            };
            let weight = he_normal(&mut rng, geom.patch_len(), geom.weight_len());
            let unit = ScaleShift { gamma: vec![1.0; cs.c_out], beta: vec![0.0; cs.c_out] };
            let affine = if layers.contains(&i) {
                Affine::Passport { public: spec.scheme.is_multitask().then_some(unit) }
            } else {
                Affine::Learned(unit)
            };
            h = geom.out_height();
            w = geom.out_width();
            if cs.pool_after {
                h /= 2;
                w /= 2;
            }
            blocks.push(ConvBlock {
                spec: *cs,
                geom,
                norm,
                weight,
                running_mean: vec![0.0; cs.c_out],
                running_var: vec![1.0; cs.c_out],
                affine,
            });
        }
        let in_features = blocks.last().map(ConvBlock::out_len).unwrap_or(0);
        let head = Linear {
            in_features,
            out_features: spec.num_classes,
            weight: he_normal(&mut rng, in_features, in_features * spec.num_classes),
            bias: vec![0.0; spec.num_classes],
        };
        Ok(Self { spec, blocks, head })
    }

    pub fn passport_layers(&self) -> &[usize] {
        &self.spec.passport_layers
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn input_len(&self) -> usize {
        self.spec.input_shape.iter().product()
    }

    pub fn fingerprint(&self) -> String {
        self.spec.fingerprint()
    }

    /// Shape `[c_in, h, w]` of the passport tensors for a passport layer.
    pub fn passport_shape(&self, layer: usize) -> Result<[usize; 3]> {
        self.blocks
            .get(layer)
            .map(ConvBlock::passport_shape)
            .ok_or_else(|| Error::Config(format!("no conv layer with id {layer}")))
    }

    /// Output channel count (signature capacity) of each passport layer.
    pub fn passport_capacities(&self) -> Vec<(usize, usize)> {
        self.spec.passport_layers.iter().map(|&l| (l, self.blocks[l].geom.c_out)).collect()
    }

    fn block_source<'a>(&self, index: usize, branch: &Branch<'a>) -> Result<BlockSource<'a>> {
        let block = &self.blocks[index];
        if matches!(block.affine, Affine::Learned(_)) {
            return Ok(BlockSource::Learned);
        }
        match branch {
            Branch::Public => Ok(BlockSource::Public),
            Branch::Passport(set) => set
                .pairs
                .get(&index)
                .map(BlockSource::Pair)
                .ok_or_else(|| Error::Config(format!("passport set lacks a passport for conv{}", index + 1))),
            Branch::Explicit(map) => map
                .get(&index)
                .map(BlockSource::Explicit)
                .ok_or_else(|| Error::Config(format!("no explicit scales for conv{}", index + 1))),
        }
    }

    /// Runs the network on `batch` images laid out `[n, c, h, w]`.
    pub fn forward(&self, images: &[f32], batch: usize, branch: &Branch<'_>, mode: Mode, keep: bool) -> Result<ForwardPass> {
        if images.len() != batch * self.input_len() {
            return Err(Error::Shape(format!(
                "expected {batch} images of {:?}, got {} values",
                self.spec.input_shape,
                images.len()
            )));
        }
        let mut x = images.to_vec();
        let mut traces = Vec::with_capacity(if keep { self.blocks.len() } else { 0 });
        for (i, block) in self.blocks.iter().enumerate() {
            let source = self.block_source(i, branch)?;
            let (out, trace) = block.forward(&x, batch, &source, mode, keep, i)?;
            traces.extend(trace);
            x = out;
        }
        let h = &self.head;
        let mut logits = vec![0.0; batch * h.out_features];
        for row in logits.chunks_exact_mut(h.out_features) {
            row.copy_from_slice(&h.bias);
        }
        gemm(Trans::No, Trans::Yes, batch, h.in_features, h.out_features, 1.0, &x, &h.weight, 1.0, &mut logits);
        Ok(ForwardPass { logits, batch, blocks: traces, features: if keep { x } else { Vec::new() }, traced: keep })
    }

    /// Inputs `X_c` reaching each conv layer, one `[n, c_in, h, w]` buffer per layer.
    pub fn conv_inputs(&self, images: &[f32], batch: usize, branch: &Branch<'_>) -> Result<Vec<Vec<f32>>> {
        let mut x = images.to_vec();
        let mut inputs = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let source = self.block_source(i, branch)?;
            let (out, _) = block.forward(&x, batch, &source, Mode::Eval, false, i)?;
            inputs.push(std::mem::replace(&mut x, out));
        }
        Ok(inputs)
    }

    /// `γ`/`β` each passport layer derives from `passports`; no data needed.
    pub fn passport_scales(&self, passports: &PassportSet) -> Result<ScaleOverrides> {
        self.spec
            .passport_layers
            .iter()
            .map(|&l| {
                let pair = passports
                    .pairs
                    .get(&l)
                    .ok_or_else(|| Error::Config(format!("passport set lacks a passport for conv{}", l + 1)))?;
                Ok((l, self.blocks[l].scales_from_passport(pair, l)?))
            })
            .collect()
    }

    /// Public `γ`/`β` of every passport layer (multi-task models only).
    pub fn public_scales(&self) -> Result<ScaleOverrides> {
        self.spec
            .passport_layers
            .iter()
            .map(|&l| match &self.blocks[l].affine {
                Affine::Passport { public: Some(p) } => Ok((l, p.clone())),
                _ => Err(Error::SchemeViolation(format!("conv{} has no public branch", l + 1))),
            })
            .collect()
    }

    fn param_offsets(&self) -> (Vec<usize>, usize) {
        let mut offsets = Vec::with_capacity(self.blocks.len());
        let mut next = 0;
        for b in &self.blocks {
            offsets.push(next);
            next += match &b.affine {
                Affine::Learned(_) | Affine::Passport { public: Some(_) } => 3,
                Affine::Passport { public: None } => 1,
            };
        }
        (offsets, next)
    }

    pub fn param_kinds(&self) -> Vec<ParamKind> {
        let mut kinds = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            kinds.push(ParamKind::ConvWeight(i));
            match &b.affine {
                Affine::Learned(_) => kinds.extend([ParamKind::NormScale(i), ParamKind::NormShift(i)]),
                Affine::Passport { public: Some(_) } => kinds.extend([ParamKind::PublicScale(i), ParamKind::PublicShift(i)]),
                Affine::Passport { public: None } => {}
            }
        }
        kinds.extend([ParamKind::HeadWeight, ParamKind::HeadBias]);
        kinds
    }

    pub fn params(&self) -> Vec<&Vec<f32>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push(&b.weight);
            match &b.affine {
                Affine::Learned(p) | Affine::Passport { public: Some(p) } => out.extend([&p.gamma, &p.beta]),
                Affine::Passport { public: None } => {}
            }
        }
        out.extend([&self.head.weight, &self.head.bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            match &mut b.affine {
                Affine::Learned(p) | Affine::Passport { public: Some(p) } => {
                    out.push(&mut p.gamma);
                    out.push(&mut p.beta);
                }
                Affine::Passport { public: None } => {}
            }
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients { params: self.params().iter().map(|p| vec![0.0; p.len()]).collect(), ..Gradients::default() }
    }

    /// Back-propagates `dlogits` through a traced pass. `extra_dscale` adds
    /// a direct gradient on the `γ` of passport layers (the sign-loss term).
    pub fn backward(
        &self,
        pass: &ForwardPass,
        dlogits: &[f32],
        extra_dscale: &BTreeMap<usize, Vec<f32>>,
        needs: GradNeeds,
    ) -> Result<Gradients> {
        if !pass.traced {
            return Err(Error::Contract("backward needs a traced forward pass".into()));
        }
        let n = pass.batch;
        let (offsets, head_at) = self.param_offsets();
        let mut grads = if needs.params { self.zero_grads() } else { Gradients::default() };
        let h = &self.head;
        if needs.params {
            gemm(Trans::Yes, Trans::No, h.out_features, n, h.in_features, 1.0, dlogits, &pass.features, 0.0, &mut grads.params[head_at]);
            let db = &mut grads.params[head_at + 1];
            for row in dlogits.chunks_exact(h.out_features) {
                db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
        }
        let mut d = vec![0.0; n * h.in_features];
        gemm(Trans::No, Trans::No, n, h.out_features, h.in_features, 1.0, dlogits, &h.weight, 0.0, &mut d);

        for (i, (block, trace)) in self.blocks.iter().zip(&pass.blocks).enumerate().rev() {
            let g = &block.geom;
            let (c, hw) = (g.c_out, g.out_positions());
            if let Some(arg) = &trace.pool_arg {
                d = max_pool2_backward(&d, arg, n * g.out_len());
            }
            for (dv, &p) in d.iter_mut().zip(&trace.pre_act) {
                if p <= 0.0 {
                    *dv = 0.0;
                }
            }
            let (dxhat, mut dscale, dshift) = channel_affine_backward(&d, &trace.norm.xhat, n, c, hw, &trace.scale);
            if let Some(extra) = extra_dscale.get(&i) {
                if trace.kind != SourceKind::Learned {
                    dscale.iter_mut().zip(extra).for_each(|(a, b)| *a += b);
                }
            }
            let wi = offsets[i];
            match trace.kind {
                SourceKind::Learned | SourceKind::Public => {
                    if needs.params {
                        grads.params[wi + 1] = dscale;
                        grads.params[wi + 2] = dshift;
                    }
                }
                SourceKind::Passport => {
                    let (mg, mb) = trace.patch_means.as_ref().expect("passport trace keeps patch means");
                    if needs.params {
                        passport_scale_backward_weight(&dscale, mg, g, &mut grads.params[wi]);
                        passport_scale_backward_weight(&dshift, mb, g, &mut grads.params[wi]);
                    }
                    if needs.passports {
                        let dpg = passport_scale_backward_passport(&dscale, &block.weight, g);
                        let dpb = passport_scale_backward_passport(&dshift, &block.weight, g);
                        grads.passports.insert(i, (dpg, dpb));
                    }
                }
                SourceKind::Explicit => {
                    if needs.explicit {
                        grads.explicit.insert(i, ScaleShift { gamma: dscale, beta: dshift });
                    }
                }
            }
            let dconv = match block.norm {
                NormKind::Batch => batch_norm_backward(&dxhat, &trace.norm, n, c, hw),
                NormKind::Group => group_norm_backward(&dxhat, &trace.norm, c, hw, group_count(c)),
            };
            let want_dx = i > 0 || needs.input;
            let dw = if needs.params { Some(grads.params[wi].as_mut_slice()) } else { None };
            let dx = conv2d_backward(&dconv, n, &block.weight, g, &trace.conv, dw, want_dx);
            if let Some(dx) = dx {
                d = dx;
            }
        }
        if needs.input {
            grads.input = Some(d);
        }
        Ok(grads)
    }

    /// Folds the batch statistics of a training pass into the running estimates.
    pub fn update_running_stats(&mut self, pass: &ForwardPass) {
        for (block, trace) in self.blocks.iter_mut().zip(&pass.blocks) {
            if let Some((mean, var)) = &trace.batch_stats {
                let m = (pass.batch * block.geom.out_positions()) as f32;
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                for ch in 0..mean.len() {
                    block.running_mean[ch] = (1.0 - BN_MOMENTUM) * block.running_mean[ch] + BN_MOMENTUM * mean[ch];
                    block.running_var[ch] = (1.0 - BN_MOMENTUM) * block.running_var[ch] + BN_MOMENTUM * var[ch] * unbias;
                }
            }
        }
    }

    /// Swaps the classifier for a freshly initialized one with `num_classes` outputs.
    pub fn replace_head(&mut self, num_classes: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = self.head.in_features;
        self.head = Linear {
            in_features: fan_in,
            out_features: num_classes,
            weight: he_normal(&mut rng, fan_in, fan_in * num_classes),
            bias: vec![0.0; num_classes],
        };
        self.spec.num_classes = num_classes;
    }

    pub fn predict(&self, images: &[f32], batch: usize, branch: &Branch<'_>) -> Result<Vec<usize>> {
        let pass = self.forward(images, batch, branch, Mode::Eval, false)?;
        Ok(argmax_rows(&pass.logits, self.num_classes()))
    }

    /// SHA-256 over every parameter and running statistic, in layout order.
    pub fn weights_digest(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            for v in p {
                h.update(v.to_le_bytes());
            }
        }
        for b in &self.blocks {
            for v in b.running_mean.iter().chain(&b.running_var) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Learned affine parameters (non-passport blocks) are needed by
    /// checkpoints; this exposes them by block.
    pub fn learned_affine(&self, block: usize) -> Option<&ScaleShift> {
        match &self.blocks.get(block)?.affine {
            Affine::Learned(p) => Some(p),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::passports::gen_random_set;

    fn tiny(arch: Architecture, scheme: Scheme, layers: Vec<usize>) -> ModelSpec {
        ModelSpec::new(arch, scheme, layers).with_input([3, 8, 8])
    }

    #[test]
    fn same_seed_gives_identical_weights() {
        let spec = ModelSpec::new(Architecture::MiniNet, Scheme::V1, vec![1, 2]);
        let a = PassportModel::build(spec.clone(), 7).unwrap();
        let b = PassportModel::build(spec.clone(), 7).unwrap();
        let c = PassportModel::build(spec, 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.weights_digest(), b.weights_digest());
        assert_ne!(a.weights_digest(), c.weights_digest());
    }

    #[test]
    fn rejects_unknown_layer_ids() {
        let spec = ModelSpec::new(Architecture::MiniNet, Scheme::V1, vec![3]);
        assert!(matches!(PassportModel::build(spec, 0), Err(Error::Config(_))));
        assert!("resnet".parse::<Architecture>().is_err());
    }

    #[test]
    fn alexnet_p_carries_passports_on_conv3_to_conv5() {
        let arch = Architecture::AlexNetP;
        let spec = ModelSpec::new(arch, Scheme::V1, arch.default_passport_layers());
        let model = PassportModel::build(spec, 1).unwrap();
        assert_eq!(model.passport_capacities(), vec![(2, 384), (3, 256), (4, 256)]);
        assert_eq!(model.head.in_features, 4096);
        assert_eq!(model.passport_shape(4).unwrap(), [256, 8, 8]);
    }

    #[test]
    fn mininet_shapes() {
        let m = PassportModel::build(ModelSpec::new(Architecture::MiniNet, Scheme::V2, vec![1, 2]), 0).unwrap();
        assert_eq!(m.passport_shape(1).unwrap(), [16, 16, 16]);
        assert_eq!(m.passport_shape(2).unwrap(), [32, 8, 8]);
        assert_eq!(m.head.in_features, 64 * 4 * 4);
        assert_eq!(m.passport_capacities().iter().map(|c| c.1).sum::<usize>(), 96);
    }

    #[test]
    fn public_branch_on_v1_is_a_scheme_violation() {
        let m = PassportModel::build(tiny(Architecture::MiniNet, Scheme::V1, vec![1]), 0).unwrap();
        let x = vec![0.1; m.input_len()];
        let err = m.forward(&x, 1, &Branch::Public, Mode::Eval, false).unwrap_err();
        assert!(matches!(err, Error::SchemeViolation(_)));
    }

    #[test]
    fn passport_shape_mismatch_is_rejected() {
        let m = PassportModel::build(tiny(Architecture::MiniNet, Scheme::V1, vec![1]), 0).unwrap();
        let mut set = gen_random_set(&m, 3).unwrap();
        set.pairs.get_mut(&1).unwrap().p_gamma.shape = vec![16, 2, 8];
        let x = vec![0.1; m.input_len()];
        let err = m.forward(&x, 1, &Branch::Passport(&set), Mode::Eval, false).unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "{err}");
    }

    #[test]
    fn scales_are_a_pure_function_of_weights_and_passports() {
        let m = PassportModel::build(tiny(Architecture::MiniNet, Scheme::V1, vec![1, 2]), 4).unwrap();
        let set = gen_random_set(&m, 11).unwrap();
        let x: Vec<f32> = (0..2 * m.input_len()).map(|i| (i as f32 * 0.37).sin()).collect();
        let a = m.forward(&x, 2, &Branch::Passport(&set), Mode::Train, true).unwrap();
        let b = m.forward(&x, 2, &Branch::Passport(&set), Mode::Train, true).unwrap();
        assert_eq!(a.passport_gammas(&[1, 2]), b.passport_gammas(&[1, 2]));
        assert_eq!(a.logits, b.logits);
        let direct = m.passport_scales(&set).unwrap();
        assert_eq!(direct[&1].gamma, a.blocks[1].scale);
    }

    #[test]
    fn baseline_has_no_passport_layers_and_matches_plain_forward() {
        let spec = tiny(Architecture::MiniNet, Scheme::V1, vec![]);
        let m = PassportModel::build(spec, 2).unwrap();
        let x: Vec<f32> = (0..m.input_len()).map(|i| (i as f32 * 0.1).cos()).collect();
        let empty = PassportSet::empty(&m);
        let a = m.forward(&x, 1, &Branch::Public, Mode::Eval, false).unwrap();
        let b = m.forward(&x, 1, &Branch::Passport(&empty), Mode::Eval, false).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn unit_public_scales_reproduce_normalized_conv() {
        let m = PassportModel::build(tiny(Architecture::MiniNet, Scheme::V2, vec![0]), 5).unwrap();
        let set = ScaleOverrides::from([(0, ScaleShift { gamma: vec![1.0; 16], beta: vec![0.0; 16] })]);
        let x: Vec<f32> = (0..m.input_len()).map(|i| (i as f32 * 0.3).sin()).collect();
        let a = m.forward(&x, 1, &Branch::Public, Mode::Eval, false).unwrap();
        let b = m.forward(&x, 1, &Branch::Explicit(&set), Mode::Eval, false).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn replace_head_keeps_fingerprint() {
        let mut m = PassportModel::build(tiny(Architecture::MiniNet, Scheme::V1, vec![1]), 0).unwrap();
        let fp = m.fingerprint();
        m.replace_head(5, 3);
        assert_eq!(m.num_classes(), 5);
        assert_eq!(m.fingerprint(), fp);
    }
}
