//! Reference watermarking schemes without passports: a weight-projection
//! (feature) watermark trained in through a BCE regularizer, and a trigger
//! set memorized alongside the task.

use crate::container::{Container, ContainerKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{Branch, ParamKind, PassportModel};
use crate::ops::loss::sigmoid;
use crate::ops::{gemm, Trans};
use crate::tensor::Tensor;
use crate::training::{train_plain, Regularizer, SchemeConfig, TrainedModel, TriggerSet};
use crate::verification::trigger_detection_rate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const DEFAULT_FEATURE_BITS: usize = 256;
pub const DEFAULT_EMBED_LAYER: usize = 1;
pub const DEFAULT_TRIGGER_SIZE: usize = 100;

/// `y = σ(X w)` over the flattened kernel `w` of one conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureWatermark {
    /// `[T, M]`, row-major.
    pub projection: Vec<f32>,
    pub bits: Vec<bool>,
    pub embed_layer: usize,
    pub lambda_r: f32,
}

impl FeatureWatermark {
    /// Standard-normal projection and uniformly random bits.
    pub fn generate(model: &PassportModel, embed_layer: usize, n_bits: usize, seed: u64) -> Result<Self> {
        let m = model
            .blocks
            .get(embed_layer)
            .ok_or_else(|| Error::Config(format!("no conv layer with id {embed_layer}")))?
            .weight
            .len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = (0..n_bits * m).map(|_| StandardNormal.sample(&mut rng)).collect();
        let bits = (0..n_bits).map(|_| rng.random()).collect();
        Ok(Self { projection, bits, embed_layer, lambda_r: 1.0 })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    fn weight_len(&self) -> usize {
        self.projection.len().checked_div(self.bits.len()).unwrap_or(0)
    }

    fn weights<'a>(&self, model: &'a PassportModel) -> Result<&'a [f32]> {
        let w = &model
            .blocks
            .get(self.embed_layer)
            .ok_or_else(|| Error::Contract(format!("model has no conv layer {}", self.embed_layer)))?
            .weight;
        if self.is_empty() || self.projection.len() != self.bits.len() * w.len() {
            return Err(Error::Contract(format!(
                "projection of {} values does not fit {} bits over {} weights",
                self.projection.len(),
                self.bits.len(),
                w.len()
            )));
        }
        Ok(w)
    }

    /// `y_j = σ(Σ_i X_ji w_i)`.
    pub fn extract_from(&self, w: &[f32]) -> Vec<f32> {
        let mut z = vec![0.0; self.len()];
        gemm(Trans::No, Trans::No, self.len(), self.weight_len(), 1, 1.0, &self.projection, w, 0.0, &mut z);
        z.into_iter().map(sigmoid).collect()
    }

    /// Mean binary cross entropy of `y` against the bits, with `∂/∂y·∂y/∂z = y − b`.
    fn bce(&self, y: &[f32]) -> (f64, Vec<f32>) {
        let t = self.len() as f64;
        let mut loss = 0.0;
        let mut dz = Vec::with_capacity(y.len());
        for (&yj, &b) in y.iter().zip(&self.bits) {
            let p = (yj as f64).clamp(1e-7, 1.0 - 1e-7);
            loss -= if b { p.ln() } else { (1.0 - p).ln() } / t;
            dz.push(((yj - b as u8 as f32) as f64 / t) as f32);
        }
        (loss, dz)
    }
}

impl Regularizer for FeatureWatermark {
    fn penalty(&self, model: &PassportModel) -> Result<(f64, Vec<(usize, Vec<f32>)>)> {
        let w = self.weights(model)?;
        let (loss, dz) = self.bce(&self.extract_from(w));
        let mut dw = vec![0.0; w.len()];
        gemm(Trans::Yes, Trans::No, w.len(), self.len(), 1, 1.0, &self.projection, &dz, 0.0, &mut dw);
        let slot = model
            .param_kinds()
            .iter()
            .position(|&k| k == ParamKind::ConvWeight(self.embed_layer))
            .expect("every block has a weight slot");
        Ok((loss, vec![(slot, dw)]))
    }
}

/// Fraction of bits recovered by thresholding `y` at 0.5.
pub fn detect_feature_watermark(model: &PassportModel, wm: &FeatureWatermark) -> Result<f64> {
    let y = wm.extract_from(wm.weights(model)?);
    let hits = y.iter().zip(&wm.bits).filter(|(&v, &b)| (v > 0.5) == b).count();
    Ok(hits as f64 / wm.len() as f64)
}

/// Plain training with `λ_r·E_R(w)` added to the task loss.
pub fn embed_feature_watermark(model: &PassportModel, wm: &FeatureWatermark, data: &Dataset, cfg: &SchemeConfig) -> Result<TrainedModel> {
    wm.weights(model)?;
    train_plain(model, data, None, Some(wm), wm.lambda_r, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriggerWatermark {
    pub trigger: TriggerSet,
}

/// Plain training with trigger samples appended to every batch. An empty
/// trigger set reduces to plain training.
pub fn embed_trigger_watermark(model: &PassportModel, wm: &TriggerWatermark, data: &Dataset, cfg: &SchemeConfig) -> Result<TrainedModel> {
    let trigger = (!wm.trigger.is_empty()).then_some(&wm.trigger);
    train_plain(model, data, trigger, None, 0.0, cfg)
}

pub fn detect_trigger_watermark(model: &PassportModel, trigger: &TriggerSet) -> Result<f64> {
    trigger_detection_rate(model, trigger, &Branch::Public)
}

#[derive(Debug, Clone, PartialEq)]
pub enum WatermarkKey {
    Feature(FeatureWatermark),
    Trigger(TriggerWatermark),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum KeyMeta {
    Feature { embed_layer: usize, lambda_r: f32, bits: usize },
    Trigger { shape: [usize; 3], num_classes: usize, labels: Vec<usize> },
}

pub fn save_watermark_key(path: &Path, model: &PassportModel, key: &WatermarkKey) -> Result<()> {
    let (meta, arrays) = match key {
        WatermarkKey::Feature(f) => (
            KeyMeta::Feature { embed_layer: f.embed_layer, lambda_r: f.lambda_r, bits: f.len() },
            vec![
                ("projection", Tensor::new(vec![f.len(), f.weight_len()], f.projection.clone())?),
                ("bits", Tensor::new(vec![f.len()], f.bits.iter().map(|&b| b as u8 as f32).collect())?),
            ],
        ),
        WatermarkKey::Trigger(t) => {
            let s = t.trigger.shape;
            (
                KeyMeta::Trigger { shape: s, num_classes: t.trigger.num_classes, labels: t.trigger.labels.clone() },
                vec![("images", Tensor::new(vec![t.trigger.len(), s[0], s[1], s[2]], t.trigger.images.clone())?)],
            )
        }
    };
    let mut c = Container::new(ContainerKind::WatermarkKey, model.fingerprint(), serde_json::to_value(meta)?);
    for (name, t) in arrays {
        c.push(name, t);
    }
    c.write(path)
}

pub fn load_watermark_key(path: &Path) -> Result<WatermarkKey> {
    let c = Container::read(path)?.expect_kind(ContainerKind::WatermarkKey)?;
    Ok(match serde_json::from_value(c.meta.clone())? {
        KeyMeta::Feature { embed_layer, lambda_r, bits } => {
            let b = c.array("bits")?;
            if b.data.len() != bits {
                return Err(Error::Format("bit count mismatch".into()));
            }
            WatermarkKey::Feature(FeatureWatermark {
                projection: c.array("projection")?.data.clone(),
                bits: b.data.iter().map(|&v| v > 0.5).collect(),
                embed_layer,
                lambda_r,
            })
        }
        KeyMeta::Trigger { shape, num_classes, labels } => {
            let images = c.array("images")?.data.clone();
            WatermarkKey::Trigger(TriggerWatermark { trigger: Dataset::new(images, labels, shape, num_classes)? })
        }
    })
}
