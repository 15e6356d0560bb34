//! Sign-encoded signatures carried by the scale factors of passport layers.
//!
//! Each output channel of a passport layer holds one bit: `γ > 0` reads as 1,
//! anything else as 0. A payload string is written MSB-first, eight bits per
//! byte, laid out layer by layer in passport-layer order. Channels beyond the
//! payload carry seeded random filler signs that are recorded with the
//! signature so that exact-match verification covers every channel.

use crate::error::{Error, Result};
use crate::models::PassportModel;
use crate::ops::Scalar;
use crate::passports::PassportSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_GAMMA0: f32 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSignature {
    pub layer: usize,
    /// Target sign per output channel, each `-1` or `+1`.
    pub signs: Vec<i8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub layers: Vec<LayerSignature>,
    pub ascii_payload: String,
    pub gamma0: f32,
    /// Filler signs occupying every channel after the payload, in layout order.
    pub padding_bits: Vec<i8>,
}

/// `Σ_i max(γ0 − γ_i b_i, 0)`.
pub fn sign_loss<T: Scalar>(gamma: &[T], b: &[i8], gamma0: T) -> Result<T> {
    Ok(sign_loss_with_grad(gamma, b, gamma0)?.0)
}

/// Sign loss and its (sub)gradient with respect to `γ`; at the kink the
/// zero branch is taken.
pub fn sign_loss_with_grad<T: Scalar>(gamma: &[T], b: &[i8], gamma0: T) -> Result<(T, Vec<T>)> {
    if gamma.len() != b.len() {
        return Err(Error::Contract(format!("{} scale factors but {} target signs", gamma.len(), b.len())));
    }
    if b.iter().any(|&s| s != 1 && s != -1) {
        return Err(Error::Contract("target signs must be -1 or +1".into()));
    }
    if !(gamma0 > T::zero()) {
        return Err(Error::Contract("gamma0 must be positive".into()));
    }
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); gamma.len()];
    for ((&g, &s), d) in gamma.iter().zip(b).zip(grad.iter_mut()) {
        let s = T::from_f64(s as f64);
        let slack = gamma0 - g * s;
        if slack > T::zero() {
            loss = loss + slack;
            *d = -s;
        }
    }
    Ok((loss, grad))
}

pub fn sign_of_bit(bit: bool) -> i8 {
    if bit {
        1
    } else {
        -1
    }
}

pub fn bit_of_scale(gamma: f32) -> bool {
    gamma > 0.0
}

/// MSB-first bits of each byte of `ascii`.
pub fn ascii_to_bits(ascii: &str) -> Result<Vec<bool>> {
    if !ascii.is_ascii() {
        return Err(Error::Contract("signature payload must be ASCII".into()));
    }
    Ok(ascii.bytes().flat_map(|byte| (0..8).rev().map(move |i| byte >> i & 1 == 1)).collect())
}

/// Packs complete groups of eight bits (MSB first) into bytes; trailing bits are ignored.
pub fn bits_to_bytes(bits: &[bool]) -> Vec<u8> {
    bits.chunks_exact(8).map(|c| c.iter().fold(0u8, |acc, &b| acc << 1 | b as u8)).collect()
}

/// Decodes a `±1` sign string such as `{-1,1,1,1,-1,1,-1,-1}` to its bytes.
pub fn signs_to_bytes(signs: &[i8]) -> Vec<u8> {
    bits_to_bytes(&signs.iter().map(|&s| s > 0).collect::<Vec<_>>())
}

fn printable_prefix(bytes: &[u8]) -> String {
    bytes.iter().take_while(|b| b.is_ascii_graphic() || **b == b' ').map(|&b| b as char).collect()
}

/// Maps a byte string to text without loss, one char per byte.
fn bytes_to_text(bytes: &[u8]) -> String {
    bytes.iter().map(|&b| b as char).collect()
}

impl Signature {
    pub fn total_bits(&self) -> usize {
        self.layers.iter().map(|l| l.signs.len()).sum()
    }

    pub fn payload_bits(&self) -> usize {
        self.ascii_payload.len() * 8
    }

    /// All target signs in layout order.
    pub fn flat_signs(&self) -> Vec<i8> {
        self.layers.iter().flat_map(|l| l.signs.iter().copied()).collect()
    }

    pub fn layer(&self, layer: usize) -> Option<&LayerSignature> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    /// Rebuilds a signature from per-layer signs, e.g. after modification.
    pub fn from_layers(layers: Vec<LayerSignature>, ascii_payload: String, gamma0: f32) -> Result<Self> {
        let flat: Vec<i8> = layers.iter().flat_map(|l| l.signs.iter().copied()).collect();
        let payload = ascii_payload.len() * 8;
        if payload > flat.len() {
            return Err(Error::Capacity { needed: payload, available: flat.len() });
        }
        Ok(Self { padding_bits: flat[payload..].to_vec(), layers, ascii_payload, gamma0 })
    }

    /// Fraction of positions where `bits` agrees with this signature.
    pub fn match_rate(&self, bits: &[bool]) -> Result<f64> {
        let target = self.flat_signs();
        if bits.len() != target.len() {
            return Err(Error::Shape(format!("{} detected bits vs {} signature bits", bits.len(), target.len())));
        }
        if target.is_empty() {
            return Ok(1.0);
        }
        let hits = bits.iter().zip(&target).filter(|(&b, &s)| sign_of_bit(b) == s).count();
        Ok(hits as f64 / target.len() as f64)
    }

    pub fn decode_payload(&self) -> String {
        bytes_to_text(&signs_to_bytes(&self.flat_signs())[..self.ascii_payload.len()])
    }
}

/// Encodes `ascii` into the sign string of layers with the given
/// `(layer_id, channels)` capacities.
pub fn encode_signature(ascii: &str, capacities: &[(usize, usize)], seed: u64, gamma0: f32) -> Result<Signature> {
    let payload = ascii_to_bits(ascii)?;
    let available: usize = capacities.iter().map(|c| c.1).sum();
    if payload.len() > available {
        return Err(Error::Capacity { needed: payload.len(), available });
    }
    if !(gamma0 > 0.0) {
        return Err(Error::Contract("gamma0 must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let padding: Vec<i8> = (payload.len()..available).map(|_| sign_of_bit(rng.random::<bool>())).collect();
    let mut flat = payload.iter().map(|&b| sign_of_bit(b)).chain(padding.iter().copied());
    let layers = capacities
        .iter()
        .map(|&(layer, c)| LayerSignature { layer, signs: flat.by_ref().take(c).collect() })
        .collect();
    Ok(Signature { layers, ascii_payload: ascii.to_string(), gamma0, padding_bits: padding })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Detected bit per channel, per passport layer.
    pub layers: Vec<(usize, Vec<bool>)>,
    /// Decoded text: the reference payload length when a reference was given,
    /// otherwise the longest printable prefix.
    pub ascii: String,
    /// Fraction of bits matching the reference signature, when one was given.
    pub match_rate: Option<f64>,
}

impl Detection {
    pub fn bits(&self) -> Vec<bool> {
        self.layers.iter().flat_map(|(_, b)| b.iter().copied()).collect()
    }

    /// Ownership is claimed only if every bit matches.
    pub fn exact(&self) -> bool {
        self.match_rate == Some(1.0)
    }
}

/// Recomputes `γ` of every passport layer from `passports`, binarizes the
/// signs, decodes them and compares against `reference`.
pub fn detect_signature(model: &PassportModel, passports: &PassportSet, reference: Option<&Signature>) -> Result<Detection> {
    let scales = model.passport_scales(passports)?;
    let layers: Vec<(usize, Vec<bool>)> =
        scales.iter().map(|(&l, s)| (l, s.gamma.iter().map(|&g| bit_of_scale(g)).collect())).collect();
    detection_from_bits(layers, reference)
}

pub fn detection_from_bits(layers: Vec<(usize, Vec<bool>)>, reference: Option<&Signature>) -> Result<Detection> {
    let bits: Vec<bool> = layers.iter().flat_map(|(_, b)| b.iter().copied()).collect();
    let bytes = bits_to_bytes(&bits);
    let (ascii, match_rate) = match reference {
        Some(sig) => {
            if let Some(bad) = sig.layers.iter().zip(&layers).find(|(s, (l, b))| s.layer != *l || s.signs.len() != b.len()) {
                return Err(Error::Shape(format!("signature layout for conv{} does not match the model", bad.0.layer + 1)));
            }
            let n = sig.ascii_payload.len().min(bytes.len());
            (bytes_to_text(&bytes[..n]), Some(sig.match_rate(&bits)?))
        }
        None => (printable_prefix(&bytes), None),
    };
    Ok(Detection { layers, ascii, match_rate })
}
