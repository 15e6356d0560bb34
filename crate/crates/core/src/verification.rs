//! Ownership verification: fidelity of the claimed passports, exact
//! signature match, and for V3 a black-box trigger-set stage.

use crate::data::{accuracy, predict_all, Dataset};
use crate::error::{Error, Result};
use crate::models::{Branch, PassportModel, Scheme};
use crate::passports::{gen_random_set, PassportSet};
use crate::signatures::{detect_signature, Signature};
use crate::training::TriggerSet;
use serde::{Deserialize, Serialize};

pub const DEFAULT_EPSILON_F: f64 = 3.0;
pub const DEFAULT_TRIGGER_THRESHOLD: f64 = 0.9;
pub const DEFAULT_FAKE_PASSPORTS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityConfig {
    /// `M_t`, in accuracy points.
    pub target_accuracy: f64,
    /// `ε_f`, in accuracy points.
    pub epsilon_f: f64,
}

impl FidelityConfig {
    pub fn new(target_accuracy: f64, epsilon_f: f64) -> Result<Self> {
        if !(epsilon_f > 0.0) {
            return Err(Error::Config("epsilon_f must be positive".into()));
        }
        Ok(Self { target_accuracy, epsilon_f })
    }

    pub fn passes(&self, accuracy: f64) -> bool {
        (accuracy - self.target_accuracy).abs() <= self.epsilon_f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityOutcome {
    pub accuracy: f64,
    pub target_accuracy: f64,
    pub gap: f64,
    pub pass: bool,
}

/// Accuracy on `test` with the claimed credentials plugged in, compared to
/// the target metric.
pub fn fidelity(model: &PassportModel, claimed: &Branch<'_>, test: &Dataset, cfg: &FidelityConfig) -> Result<FidelityOutcome> {
    let acc = accuracy(model, test, claimed)?;
    Ok(FidelityOutcome { accuracy: acc, target_accuracy: cfg.target_accuracy, gap: acc - cfg.target_accuracy, pass: cfg.passes(acc) })
}

/// Fraction of trigger images classified to their designated labels.
pub fn trigger_detection_rate(model: &PassportModel, trigger: &TriggerSet, branch: &Branch<'_>) -> Result<f64> {
    if trigger.is_empty() {
        return Err(Error::Data("trigger set is empty".into()));
    }
    let pred = predict_all(model, trigger, branch)?;
    Ok(pred.iter().zip(&trigger.labels).filter(|(p, l)| p == l).count() as f64 / trigger.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Owned,
    NotOwned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub fidelity: FidelityConfig,
    pub trigger_threshold: f64,
}

impl VerifyConfig {
    pub fn new(target_accuracy: f64) -> Result<Self> {
        Ok(Self { fidelity: FidelityConfig::new(target_accuracy, DEFAULT_EPSILON_F)?, trigger_threshold: DEFAULT_TRIGGER_THRESHOLD })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub scheme: Scheme,
    pub model_fingerprint: String,
    pub weights_digest: String,
    pub accuracy_with_claimed_passport: f64,
    /// `M_t` the claim is measured against.
    pub baseline_accuracy: f64,
    pub epsilon_f: f64,
    pub fidelity_pass: bool,
    /// Public-branch accuracy of multi-task models.
    pub public_accuracy: Option<f64>,
    /// Detected bits as a `0`/`1` string in layout order.
    pub signature_bits: String,
    pub decoded_payload: String,
    pub signature_match_rate: f64,
    pub trigger_detection_rate: Option<f64>,
    pub trigger_threshold: f64,
    pub verdict: Verdict,
}

impl VerificationReport {
    /// Recomputes the verdict from the report's own fields at a different `ε_f`.
    pub fn verdict_at(&self, epsilon_f: f64) -> Verdict {
        let fid = (self.accuracy_with_claimed_passport - self.baseline_accuracy).abs() <= epsilon_f;
        let trig = self.trigger_detection_rate.is_none_or(|r| r >= self.trigger_threshold);
        if fid && self.signature_match_rate == 1.0 && trig {
            Verdict::Owned
        } else {
            Verdict::NotOwned
        }
    }
}

/// Runs F and V for a claim `(passports, signature)`. V3 models must come
/// with their trigger set, which is probed through the public branch only.
pub fn verify_ownership(
    model: &PassportModel,
    passports: &PassportSet,
    signature: &Signature,
    trigger: Option<&TriggerSet>,
    test: &Dataset,
    cfg: &VerifyConfig,
) -> Result<VerificationReport> {
    let scheme = model.spec.scheme;
    if model.passport_layers().is_empty() {
        return Err(Error::Config("model has no passport layers to verify".into()));
    }
    let trigger_rate = match (scheme, trigger) {
        (Scheme::V3, None) => return Err(Error::Config("V3 verification needs the trigger set".into())),
        (Scheme::V3, Some(t)) => Some(trigger_detection_rate(model, t, &Branch::Public)?),
        _ => None,
    };
    passports.check_against(model)?;
    let fid = fidelity(model, &Branch::Passport(passports), test, &cfg.fidelity)?;
    let det = detect_signature(model, passports, Some(signature))?;
    let public_accuracy = if scheme.is_multitask() { Some(accuracy(model, test, &Branch::Public)?) } else { None };
    let mut report = VerificationReport {
        scheme,
        model_fingerprint: model.fingerprint(),
        weights_digest: model.weights_digest(),
        accuracy_with_claimed_passport: fid.accuracy,
        baseline_accuracy: cfg.fidelity.target_accuracy,
        epsilon_f: cfg.fidelity.epsilon_f,
        fidelity_pass: fid.pass,
        public_accuracy,
        signature_bits: det.bits().iter().map(|&b| if b { '1' } else { '0' }).collect(),
        decoded_payload: det.ascii.clone(),
        signature_match_rate: det.match_rate.expect("reference given"),
        trigger_detection_rate: trigger_rate,
        trigger_threshold: cfg.trigger_threshold,
        verdict: Verdict::NotOwned,
    };
    report.verdict = report.verdict_at(cfg.fidelity.epsilon_f);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeStats {
    pub accuracies: Vec<f64>,
    /// `accuracy − M_t` per fake passport set.
    pub gaps: Vec<f64>,
    pub mean_accuracy: Option<f64>,
    pub max_accuracy: Option<f64>,
    /// Number of fakes that passed fidelity.
    pub fidelity_passes: usize,
}

/// Evaluates `n_fake` independently seeded random passport sets against
/// the fidelity criterion.
pub fn noninvertibility_probe(model: &PassportModel, test: &Dataset, n_fake: usize, seed: u64, cfg: &FidelityConfig) -> Result<ProbeStats> {
    let accuracies = fake_passport_accuracies(model, test, n_fake, seed)?;
    let gaps: Vec<f64> = accuracies.iter().map(|a| a - cfg.target_accuracy).collect();
    let mean_accuracy = (!accuracies.is_empty()).then(|| accuracies.iter().sum::<f64>() / accuracies.len() as f64);
    let max_accuracy = accuracies.iter().copied().reduce(f64::max);
    let fidelity_passes = accuracies.iter().filter(|&&a| cfg.passes(a)).count();
    Ok(ProbeStats { accuracies, gaps, mean_accuracy, max_accuracy, fidelity_passes })
}

/// Test accuracy under each of `n` independently seeded random passport sets.
pub fn fake_passport_accuracies(model: &PassportModel, test: &Dataset, n: usize, seed: u64) -> Result<Vec<f64>> {
    (0..n as u64)
        .map(|i| {
            let fake = gen_random_set(model, seed.wrapping_add(i.wrapping_mul(0x9e37_79b9)))?;
            accuracy(model, test, &Branch::Passport(&fake))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, SyntheticTask};
    use crate::models::{Architecture, ModelSpec};
    use crate::signatures::{encode_signature, DEFAULT_GAMMA0};
    use proptest::prelude::*;

    #[test]
    fn exact_target_passes() {
        let c = FidelityConfig::new(91.12, 3.0).unwrap();
        assert!(c.passes(91.12));
        assert!(c.passes(90.91));
        assert!(!c.passes(84.0));
        assert!(!c.passes(10.0));
        assert!(FidelityConfig::new(90.0, 0.0).is_err());
    }

    fn fixture() -> (PassportModel, PassportSet, Signature, Dataset) {
        let m = PassportModel::build(ModelSpec::new(Architecture::MiniNet, Scheme::V3, vec![1, 2]), 2).unwrap();
        let set = gen_random_set(&m, 1).unwrap();
        let sig = encode_signature("x", &m.passport_capacities(), 0, DEFAULT_GAMMA0).unwrap();
        (m, set, sig, synthetic(SyntheticTask::Shapes, 20, 0))
    }

    #[test]
    fn v3_needs_a_nonempty_trigger_set() {
        let (m, set, sig, test) = fixture();
        let cfg = VerifyConfig::new(50.0).unwrap();
        assert!(matches!(verify_ownership(&m, &set, &sig, None, &test, &cfg), Err(Error::Config(_))));
        let empty = Dataset::empty([3, 32, 32], 10);
        assert!(matches!(verify_ownership(&m, &set, &sig, Some(&empty), &test, &cfg), Err(Error::Data(_))));
    }

    #[test]
    fn untrained_signature_match_is_near_half() {
        let (m, set, _, test) = fixture();
        let sig = encode_signature("", &m.passport_capacities(), 77, DEFAULT_GAMMA0).unwrap();
        let trig = crate::data::random_trigger_set(5, [3, 32, 32], 10, 1);
        let r = verify_ownership(&m, &set, &sig, Some(&trig), &test, &VerifyConfig::new(50.0).unwrap()).unwrap();
        // 96 bits under a fair-coin null: mean 0.5, sd about 0.05.
        assert!((r.signature_match_rate - 0.5).abs() < 0.2, "{}", r.signature_match_rate);
        assert_eq!(r.verdict, Verdict::NotOwned);
        assert_eq!(r.signature_bits.len(), 96);
    }

    #[test]
    fn empty_probe() {
        let (m, _, _, test) = fixture();
        let s = noninvertibility_probe(&m, &test, 0, 0, &FidelityConfig::new(90.0, 3.0).unwrap()).unwrap();
        assert!(s.accuracies.is_empty());
        assert_eq!(s.mean_accuracy, None);
        assert_eq!(s.fidelity_passes, 0);
    }

    proptest! {
        #[test]
        fn verdict_can_only_be_lost_as_epsilon_shrinks(
            acc in 0.0f64..100.0, target in 0.0f64..100.0, e1 in 0.01f64..50.0, e2 in 0.01f64..50.0,
            exact in any::<bool>(), trig in proptest::option::of(0.0f64..1.0),
        ) {
            let (lo, hi) = if e1 < e2 { (e1, e2) } else { (e2, e1) };
            let r = VerificationReport {
                scheme: Scheme::V2,
                model_fingerprint: String::new(),
                weights_digest: String::new(),
                accuracy_with_claimed_passport: acc,
                baseline_accuracy: target,
                epsilon_f: hi,
                fidelity_pass: false,
                public_accuracy: None,
                signature_bits: String::new(),
                decoded_payload: String::new(),
                signature_match_rate: if exact { 1.0 } else { 0.99 },
                trigger_detection_rate: trig,
                trigger_threshold: DEFAULT_TRIGGER_THRESHOLD,
                verdict: Verdict::NotOwned,
            };
            if r.verdict_at(lo) == Verdict::Owned {
                prop_assert_eq!(r.verdict_at(hi), Verdict::Owned);
            }
        }
    }
}
