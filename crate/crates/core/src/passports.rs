//! Passport generation and persistence.
//!
//! A passport pair `(P_γ, P_β)` per passport layer has the shape of that
//! layer's input, `[c_in, h, w]`. Passports are either uniform random
//! tensors or feature maps that a source model produces for chosen images.

use crate::container::{Container, ContainerKind};
use crate::error::{Error, Result};
use crate::models::{Branch, PassportModel};
use crate::signatures::{LayerSignature, Signature};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Random,
    FixedImage,
    ShuffledImage,
}

/// Which images fed a feature-map passport.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDescriptor {
    pub layer: usize,
    pub gamma_image: usize,
    pub beta_image: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassportPair {
    pub p_gamma: Tensor,
    pub p_beta: Tensor,
    pub provenance: Provenance,
    pub source: Option<SourceDescriptor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassportSet {
    pub pairs: BTreeMap<usize, PassportPair>,
    pub generation_seed: u64,
    pub model_fingerprint: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageMode {
    /// One pair of images shared by every layer.
    Fixed,
    /// Independent `γ` and `β` images drawn per layer.
    Shuffled,
}

impl FromStr for ImageMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(ImageMode::Fixed),
            "shuffled" => Ok(ImageMode::Shuffled),
            other => Err(Error::Config(format!("unknown image passport mode `{other}`"))),
        }
    }
}

impl fmt::Display for ImageMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ImageMode::Fixed => "fixed",
            ImageMode::Shuffled => "shuffled",
        })
    }
}

/// How passports for a run are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PassportKind {
    Random,
    Image { mode: ImageMode, pool: usize },
}

impl fmt::Display for PassportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PassportKind::Random => f.write_str("random"),
            PassportKind::Image { mode, pool } => write!(f, "{mode}:{pool}"),
        }
    }
}

impl FromStr for PassportKind {
    type Err = Error;

    /// `random`, `fixed`, `shuffled`, or `fixed:N` / `shuffled:N`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "random" {
            return Ok(PassportKind::Random);
        }
        let (mode, pool) = match s.split_once(':') {
            Some((m, n)) => (m, n.parse().map_err(|_| Error::Config(format!("bad passport image count in `{s}`")))?),
            None => (s, DEFAULT_IMAGE_POOL),
        };
        Ok(PassportKind::Image { mode: mode.parse()?, pool })
    }
}

pub const DEFAULT_IMAGE_POOL: usize = 20;

impl PassportSet {
    pub fn empty(model: &PassportModel) -> Self {
        Self { pairs: BTreeMap::new(), generation_seed: 0, model_fingerprint: model.fingerprint() }
    }

    pub fn layers(&self) -> Vec<usize> {
        self.pairs.keys().copied().collect()
    }

    /// Checks that this set covers exactly the passport layers of `model`
    /// with correctly shaped tensors.
    pub fn check_against(&self, model: &PassportModel) -> Result<()> {
        if self.model_fingerprint != model.fingerprint() {
            return Err(Error::Fingerprint { expected: model.fingerprint(), found: self.model_fingerprint.clone() });
        }
        let mut want = model.passport_layers().to_vec();
        want.sort_unstable();
        if self.layers() != want {
            return Err(Error::Shape(format!(
                "passports cover layers {:?}, model has {:?}",
                self.layers(),
                model.passport_layers()
            )));
        }
        for (&l, pair) in &self.pairs {
            let want = model.passport_shape(l)?.to_vec();
            if pair.p_gamma.shape != want || pair.p_beta.shape != want {
                return Err(Error::Shape(format!("passport for conv{} must have shape {want:?}", l + 1)));
            }
        }
        Ok(())
    }
}

/// Uniform `U[-1, 1]` tensor of the given shape.
pub fn gen_random(shape: [usize; 3], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new_inclusive(-1.0f32, 1.0).expect("valid range");
    let n = shape.iter().product();
    Tensor { shape: shape.to_vec(), data: (0..n).map(|_| rng.sample(dist)).collect() }
}

/// Independent random passports for every passport layer of `model`.
pub fn gen_random_set(model: &PassportModel, seed: u64) -> Result<PassportSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = BTreeMap::new();
    for &l in model.passport_layers() {
        let shape = model.passport_shape(l)?;
        let (sg, sb) = (rng.random::<u64>(), rng.random::<u64>());
        pairs.insert(
            l,
            PassportPair { p_gamma: gen_random(shape, sg), p_beta: gen_random(shape, sb), provenance: Provenance::Random, source: None },
        );
    }
    Ok(PassportSet { pairs, generation_seed: seed, model_fingerprint: model.fingerprint() })
}

/// Chooses the `(γ image, β image)` slot pair for each layer, as indices
/// into a pool of `pool` images.
pub fn draw_image_slots(layers: &[usize], pool: usize, mode: ImageMode, seed: u64) -> Result<Vec<(usize, usize)>> {
    if pool == 0 {
        return Err(Error::Config("image passports need at least one candidate image".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match mode {
        ImageMode::Fixed => {
            let pair = (0, if pool > 1 { 1 } else { 0 });
            vec![pair; layers.len()]
        }
        ImageMode::Shuffled => layers.iter().map(|_| (rng.random_range(0..pool), rng.random_range(0..pool))).collect(),
    })
}

/// Feature-map passports: for each passport layer of `target`, the input
/// `X_c` that `source` produces at that layer for selected images.
///
/// `images` holds `count` images in `[n, c, h, w]` layout. A pool of `pool`
/// distinct images is drawn from them with `seed`; the slot choice per layer
/// follows `mode`. `source` must share the conv stack geometry of `target`.
pub fn gen_image_passports(
    source: &PassportModel,
    target: &PassportModel,
    images: &[f32],
    count: usize,
    pool: usize,
    mode: ImageMode,
    seed: u64,
) -> Result<PassportSet> {
    if pool > count {
        return Err(Error::Config(format!("requested {pool} passport images from {count}")));
    }
    let layers = target.passport_layers().to_vec();
    for &l in &layers {
        let want = target.passport_shape(l)?;
        let got = source.passport_shape(l)?;
        if want != got {
            return Err(Error::Shape(format!("source model gives {got:?} at conv{}, target expects {want:?}", l + 1)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = rand::seq::index::sample(&mut rng, count, pool).into_vec();
    let slots = draw_image_slots(&layers, pool, mode, rng.random())?;

    let per_image = source.input_len();
    let mut pool_images = Vec::with_capacity(pool * per_image);
    for &i in &chosen {
        pool_images.extend_from_slice(&images[i * per_image..(i + 1) * per_image]);
    }
    let inputs = source.conv_inputs(&pool_images, pool, &Branch::Public)?;
    let provenance = match mode {
        ImageMode::Fixed => Provenance::FixedImage,
        ImageMode::Shuffled => Provenance::ShuffledImage,
    };
    let mut pairs = BTreeMap::new();
    for (&l, &(gi, bi)) in layers.iter().zip(&slots) {
        let shape = target.passport_shape(l)?;
        let len: usize = shape.iter().product();
        let map = |slot: usize| Tensor { shape: shape.to_vec(), data: inputs[l][slot * len..(slot + 1) * len].to_vec() };
        pairs.insert(
            l,
            PassportPair {
                p_gamma: map(gi),
                p_beta: map(bi),
                provenance,
                source: Some(SourceDescriptor { layer: l, gamma_image: chosen[gi], beta_image: chosen[bi] }),
            },
        );
    }
    Ok(PassportSet { pairs, generation_seed: seed, model_fingerprint: target.fingerprint() })
}

#[derive(Serialize, Deserialize)]
struct PairMeta {
    layer: usize,
    provenance: Provenance,
    source: Option<SourceDescriptor>,
}

#[derive(Serialize, Deserialize)]
struct SignatureMeta {
    ascii_payload: String,
    gamma0: f32,
    layers: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct PassportMeta {
    generation_seed: u64,
    pairs: Vec<PairMeta>,
    signature: Option<SignatureMeta>,
}

/// Writes passports (and optionally the signature they were trained to
/// carry) to a checksummed container.
pub fn save_passports(path: &Path, set: &PassportSet, signature: Option<&Signature>) -> Result<()> {
    let meta = PassportMeta {
        generation_seed: set.generation_seed,
        pairs: set.pairs.iter().map(|(&layer, p)| PairMeta { layer, provenance: p.provenance, source: p.source }).collect(),
        signature: signature.map(|s| SignatureMeta {
            ascii_payload: s.ascii_payload.clone(),
            gamma0: s.gamma0,
            layers: s.layers.iter().map(|l| l.layer).collect(),
        }),
    };
    let mut c = Container::new(ContainerKind::Passports, set.model_fingerprint.clone(), serde_json::to_value(&meta)?);
    for (l, p) in &set.pairs {
        c.push(format!("passport/{l}/gamma"), p.p_gamma.clone());
        c.push(format!("passport/{l}/beta"), p.p_beta.clone());
    }
    if let Some(sig) = signature {
        for ls in &sig.layers {
            let data: Vec<f32> = ls.signs.iter().map(|&s| s as f32).collect();
            c.push(format!("signature/{}", ls.layer), Tensor { shape: vec![data.len()], data });
        }
    }
    c.write(path)
}

pub fn load_passports(path: &Path) -> Result<(PassportSet, Option<Signature>)> {
    let c = Container::read(path)?.expect_kind(ContainerKind::Passports)?;
    let meta: PassportMeta = serde_json::from_value(c.meta.clone())?;
    let mut pairs = BTreeMap::new();
    for pm in meta.pairs {
        let pair = PassportPair {
            p_gamma: c.array(&format!("passport/{}/gamma", pm.layer))?.clone(),
            p_beta: c.array(&format!("passport/{}/beta", pm.layer))?.clone(),
            provenance: pm.provenance,
            source: pm.source,
        };
        pairs.insert(pm.layer, pair);
    }
    let signature = match meta.signature {
        None => None,
        Some(sm) => {
            let mut layers = Vec::with_capacity(sm.layers.len());
            for l in sm.layers {
                let arr = c.array(&format!("signature/{l}"))?;
                let signs = arr
                    .data
                    .iter()
                    .map(|&v| match v {
                        v if v == 1.0 => Ok(1i8),
                        v if v == -1.0 => Ok(-1i8),
                        _ => Err(Error::Format(format!("signature entry {v} is not ±1"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                layers.push(LayerSignature { layer: l, signs });
            }
            Some(Signature::from_layers(layers, sm.ascii_payload, sm.gamma0)?)
        }
    };
    Ok((PassportSet { pairs, generation_seed: meta.generation_seed, model_fingerprint: c.fingerprint }, signature))
}

/// Loads passports and rejects them unless they were made for `model`.
pub fn load_passports_for(path: &Path, model: &PassportModel) -> Result<(PassportSet, Option<Signature>)> {
    let (set, sig) = load_passports(path)?;
    set.check_against(model)?;
    Ok((set, sig))
}
