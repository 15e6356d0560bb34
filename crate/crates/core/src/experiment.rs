//! Experiment harness behind the `passport` command line: flat key-value
//! configuration, dataset loading, artifact layout, an append-only results
//! store and a markdown/SVG report.

use crate::attacks::{self, AttackBudget, DataAccess, FinetuneConfig, ReverseTarget, TriggerForgeConfig};
use crate::baselines::{
    detect_feature_watermark, detect_trigger_watermark, embed_feature_watermark, embed_trigger_watermark, load_watermark_key,
    save_watermark_key, FeatureWatermark, TriggerWatermark, WatermarkKey, DEFAULT_EMBED_LAYER, DEFAULT_FEATURE_BITS,
    DEFAULT_TRIGGER_SIZE,
};
use crate::data::{accuracy, load_cifar10, random_trigger_set, synthetic_split, Dataset, SyntheticTask};
use crate::error::{Error, Result};
use crate::models::{Architecture, Branch, ModelSpec, PassportModel, Scheme};
use crate::optim::LrSchedule;
use crate::passports::{gen_image_passports, gen_random_set, load_passports_for, save_passports, PassportKind, PassportSet};
use crate::signatures::{detect_signature, encode_signature, Signature, DEFAULT_GAMMA0};
use crate::stats::ks_two_sample;
use crate::training::{load_checkpoint, save_checkpoint, train_multitask, train_plain, train_v1, SchemeConfig, TrainedModel};
use crate::verification::{noninvertibility_probe, verify_ownership, FidelityConfig, VerificationReport, VerifyConfig, DEFAULT_EPSILON_F};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

pub const MODEL_FILE: &str = "model.ckpt";
pub const PASSPORT_FILE: &str = "passports.bin";
pub const TRIGGER_FILE: &str = "trigger.key";
pub const WATERMARK_FILE: &str = "watermark.key";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Shapes,
    Gratings,
    Cifar10,
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shapes" => Ok(DatasetName::Shapes),
            "gratings" => Ok(DatasetName::Gratings),
            "cifar10" => Ok(DatasetName::Cifar10),
            other => Err(Error::Config(format!("unknown dataset `{other}` (shapes, gratings, cifar10)"))),
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetName::Shapes => "shapes",
            DatasetName::Gratings => "gratings",
            DatasetName::Cifar10 => "cifar10",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineWatermark {
    None,
    Feature,
    Trigger,
}

impl FromStr for BaselineWatermark {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(BaselineWatermark::None),
            "feature" => Ok(BaselineWatermark::Feature),
            "trigger" => Ok(BaselineWatermark::Trigger),
            other => Err(Error::Config(format!("unknown watermark `{other}` (none, feature, trigger)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    ForgeFeature,
    ForgeTrigger,
    RandomPassport,
    ReversePassport,
    Insider,
    FlipSigns,
    Finetune,
    Prune,
}

impl AttackKind {
    pub const ALL: [AttackKind; 8] = [
        AttackKind::ForgeFeature,
        AttackKind::ForgeTrigger,
        AttackKind::RandomPassport,
        AttackKind::ReversePassport,
        AttackKind::Insider,
        AttackKind::FlipSigns,
        AttackKind::Finetune,
        AttackKind::Prune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::ForgeFeature => "forge-feature",
            AttackKind::ForgeTrigger => "forge-trigger",
            AttackKind::RandomPassport => "random-passport",
            AttackKind::ReversePassport => "reverse-passport",
            AttackKind::Insider => "insider",
            AttackKind::FlipSigns => "flip-signs",
            AttackKind::Finetune => "finetune",
            AttackKind::Prune => "prune",
        }
    }

    fn needs_passports(self) -> bool {
        !matches!(self, AttackKind::ForgeFeature | AttackKind::ForgeTrigger)
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown attack kind `{s}` ({})", names.join(", ")))
        })
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Every knob of a run. Serialized in full into each result record; `set`
/// accepts the same keys as the flat config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub architecture: Architecture,
    pub scheme: Scheme,
    /// `None` selects the architecture default; an empty list trains a baseline.
    pub passport_layers: Option<Vec<usize>>,
    pub passport_kind: String,
    pub passport_source: Option<PathBuf>,
    pub watermark: BaselineWatermark,
    pub dataset: DatasetName,
    pub data_dir: Option<PathBuf>,
    pub n_train: usize,
    pub n_test: usize,
    pub data_seed: u64,
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub lambda_t: f32,
    pub lambda_r: f32,
    pub gamma0: f32,
    pub trigger_size: usize,
    pub signature: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub results_dir: PathBuf,
    pub deterministic: bool,
    pub dry_run: bool,
    pub epsilon_f: f64,
    pub target_accuracy: Option<f64>,
    /// Attack compute as a fraction of the checkpoint's training sample passes.
    pub budget_fraction: f64,
    pub attack_lr: f32,
    pub reverse_target: ReverseTarget,
    pub flip_fraction: f64,
    pub flip_seeds: usize,
    pub n_fake: usize,
    pub prune_rates: Vec<f64>,
    pub finetune_epochs: usize,
    pub finetune_dataset: DatasetName,
    pub eta: f32,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::MiniNet,
            scheme: Scheme::V1,
            passport_layers: None,
            passport_kind: "random".into(),
            passport_source: None,
            watermark: BaselineWatermark::None,
            dataset: DatasetName::Shapes,
            data_dir: None,
            n_train: 5000,
            n_test: 1000,
            data_seed: 1,
            epochs: 30,
            lr: 0.01,
            batch_size: 64,
            lambda_t: 1.0,
            lambda_r: 1.0,
            gamma0: DEFAULT_GAMMA0,
            trigger_size: DEFAULT_TRIGGER_SIZE,
            signature: "owner:desk".into(),
            seed: 0,
            out_dir: PathBuf::from("out"),
            results_dir: PathBuf::from("results"),
            deterministic: false,
            dry_run: false,
            epsilon_f: DEFAULT_EPSILON_F,
            target_accuracy: None,
            budget_fraction: 0.05,
            attack_lr: 0.05,
            reverse_target: ReverseTarget::Passports,
            flip_fraction: 0.1,
            flip_seeds: 10,
            n_fake: 50,
            prune_rates: vec![0.0, 0.2, 0.4, 0.6, 0.8, 0.9],
            finetune_epochs: 5,
            finetune_dataset: DatasetName::Gratings,
            eta: 0.04,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn optional(value: &str) -> Option<&str> {
    (!value.is_empty() && value != "none").then_some(value)
}

impl ExperimentConfig {
    pub const KEYS: [&'static str; 38] = [
        "architecture",
        "scheme",
        "passport_layers",
        "passport_kind",
        "passport_source",
        "watermark",
        "dataset",
        "data_dir",
        "n_train",
        "n_test",
        "data_seed",
        "epochs",
        "lr",
        "batch_size",
        "lambda_t",
        "lambda_r",
        "gamma0",
        "trigger_size",
        "signature",
        "seed",
        "out_dir",
        "results_dir",
        "deterministic",
        "dry_run",
        "epsilon_f",
        "target_accuracy",
        "budget_fraction",
        "attack_lr",
        "reverse_target",
        "flip_fraction",
        "flip_seeds",
        "n_fake",
        "prune_rates",
        "finetune_epochs",
        "finetune_dataset",
        "eta",
        "passport_image_pool",
        "note",
    ];

    /// Sets one key. Passport layers are given 1-based (`conv2,conv3` or `2,3`).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "architecture" => self.architecture = value.parse()?,
            "scheme" => self.scheme = value.parse()?,
            "passport_layers" => {
                self.passport_layers = match value {
                    "default" => None,
                    v => Some(
                        parse_list::<String>(key, v)?
                            .iter()
                            .map(|s| match parse::<usize>(key, s.trim_start_matches("conv"))? {
                                0 => Err(Error::Config("passport layers are numbered from 1".into())),
                                n => Ok(n - 1),
                            })
                            .collect::<Result<_>>()?,
                    ),
                }
            }
            "passport_kind" => {
                value.parse::<PassportKind>()?;
                self.passport_kind = value.into();
            }
            "passport_image_pool" => {
                let kind: PassportKind = self.passport_kind.parse()?;
                let n: usize = parse(key, value)?;
                self.passport_kind = match kind {
                    PassportKind::Random => return Err(Error::Config("passport_image_pool needs an image passport kind".into())),
                    PassportKind::Image { mode, .. } => PassportKind::Image { mode, pool: n }.to_string(),
                };
            }
            "passport_source" => self.passport_source = optional(value).map(PathBuf::from),
            "watermark" => self.watermark = value.parse()?,
            "dataset" => self.dataset = value.parse()?,
            "data_dir" => self.data_dir = optional(value).map(PathBuf::from),
            "n_train" => self.n_train = parse(key, value)?,
            "n_test" => self.n_test = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lambda_t" => self.lambda_t = parse(key, value)?,
            "lambda_r" => self.lambda_r = parse(key, value)?,
            "gamma0" => self.gamma0 = parse(key, value)?,
            "trigger_size" => self.trigger_size = parse(key, value)?,
            "signature" => self.signature = value.into(),
            "seed" => self.seed = parse(key, value)?,
            "out_dir" => self.out_dir = value.into(),
            "results_dir" => self.results_dir = value.into(),
            "deterministic" => self.deterministic = parse(key, value)?,
            "dry_run" => self.dry_run = parse(key, value)?,
            "epsilon_f" => self.epsilon_f = parse(key, value)?,
            "target_accuracy" => self.target_accuracy = optional(value).map(|v| parse(key, v)).transpose()?,
            "budget_fraction" => self.budget_fraction = parse(key, value)?,
            "attack_lr" => self.attack_lr = parse(key, value)?,
            "reverse_target" => {
                self.reverse_target = match value {
                    "passports" => ReverseTarget::Passports,
                    "scales" => ReverseTarget::ScaleFactors,
                    _ => return Err(Error::Config(format!("reverse_target `{value}` is not passports or scales"))),
                }
            }
            "flip_fraction" => self.flip_fraction = parse(key, value)?,
            "flip_seeds" => self.flip_seeds = parse(key, value)?,
            "n_fake" => self.n_fake = parse(key, value)?,
            "prune_rates" => self.prune_rates = parse_list(key, value)?,
            "finetune_epochs" => self.finetune_epochs = parse(key, value)?,
            "finetune_dataset" => self.finetune_dataset = value.parse()?,
            "eta" => self.eta = parse(key, value)?,
            "note" => {}
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` document; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    /// Stable short hash of the full configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(canonical)[..6])
    }

    pub fn model_spec(&self, data: &Dataset) -> ModelSpec {
        let layers = self.passport_layers.clone().unwrap_or_else(|| self.architecture.default_passport_layers());
        ModelSpec::new(self.architecture, self.scheme, layers).with_classes(data.num_classes).with_input(data.shape)
    }

    pub fn scheme_config(&self) -> SchemeConfig {
        SchemeConfig {
            lambda_t: if self.scheme == Scheme::V3 { self.lambda_t } else { 0.0 },
            lambda_r: self.lambda_r,
            gamma0: self.gamma0,
            epochs: self.epochs,
            lr: LrSchedule { base: self.lr, ..LrSchedule::default() },
            batch_size: self.batch_size,
            seed: self.seed,
            ..SchemeConfig::new(self.scheme)
        }
    }
}

pub fn load_dataset(name: DatasetName, n_train: usize, n_test: usize, seed: u64, data_dir: Option<&Path>) -> Result<(Dataset, Dataset)> {
    match name {
        DatasetName::Shapes => Ok(synthetic_split(SyntheticTask::Shapes, n_train, n_test, seed)),
        DatasetName::Gratings => Ok(synthetic_split(SyntheticTask::Gratings, n_train, n_test, seed)),
        DatasetName::Cifar10 => {
            let dir = data_dir.ok_or_else(|| Error::Config("cifar10 needs data_dir".into()))?;
            let (train, test) = load_cifar10(dir)?;
            Ok((train.random_subset(n_train, seed)?, test.random_subset(n_test, seed ^ 1)?))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub command: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub metrics: BTreeMap<String, Value>,
    pub artifacts: BTreeMap<String, PathBuf>,
    /// Zero under the determinism flag.
    pub wall_clock_secs: f64,
    pub library_version: String,
}

impl ResultRecord {
    fn new(command: impl Into<String>, config: &ExperimentConfig) -> Self {
        Self {
            command: command.into(),
            config_hash: config.hash(),
            config: config.clone(),
            metrics: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            wall_clock_secs: 0.0,
            library_version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    fn metric(&mut self, key: &str, value: impl Serialize) {
        self.metrics.insert(key.into(), serde_json::to_value(value).expect("metric serializes"));
    }

    fn finish(mut self, started: Instant) -> Self {
        if !self.config.deterministic {
            self.wall_clock_secs = started.elapsed().as_secs_f64();
        }
        self
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).and_then(Value::as_f64)
    }
}

/// `root/runs/<unix-millis>-<config-hash>[-k]/record.json`. Directories are
/// claimed with `create_dir`, which fails if another process got there first.
pub struct ResultsStore {
    pub root: PathBuf,
}

impl ResultsStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn append(&self, record: &ResultRecord) -> Result<PathBuf> {
        let runs = self.root.join("runs");
        fs::create_dir_all(&runs)?;
        let millis = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
        let stem = format!("{millis:013}-{}", record.config_hash);
        let mut k = 0;
        let dir = loop {
            let name = if k == 0 { stem.clone() } else { format!("{stem}-{k}") };
            let d = runs.join(name);
            match fs::create_dir(&d) {
                Ok(()) => break d,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => k += 1,
                Err(e) => return Err(e.into()),
            }
        };
        let tmp = dir.join("record.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(record)?)?;
        let path = dir.join("record.json");
        fs::rename(tmp, &path)?;
        Ok(path)
    }

    /// All records in directory-name order; a missing store is empty.
    pub fn records(&self) -> Result<Vec<ResultRecord>> {
        let runs = self.root.join("runs");
        if !runs.exists() {
            return Ok(Vec::new());
        }
        let mut dirs: Vec<PathBuf> = fs::read_dir(&runs)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
        dirs.sort();
        let mut out = Vec::new();
        for d in dirs {
            let p = d.join("record.json");
            if p.exists() {
                out.push(serde_json::from_slice(&fs::read(&p)?)?);
            }
        }
        Ok(out)
    }
}

fn deployment_accuracy(model: &PassportModel, passports: &PassportSet, test: &Dataset) -> Result<f64> {
    accuracy(model, test, &attacks::deployment_branch(model, passports))
}

fn make_passports(cfg: &ExperimentConfig, model: &PassportModel, train: &Dataset) -> Result<PassportSet> {
    match cfg.passport_kind.parse::<PassportKind>()? {
        PassportKind::Random => gen_random_set(model, cfg.seed ^ 0x9a55),
        PassportKind::Image { mode, pool } => {
            let src = cfg
                .passport_source
                .as_ref()
                .ok_or_else(|| Error::Config("image passports need passport_source (a checkpoint)".into()))?;
            let (source, _) = load_checkpoint(src)?;
            gen_image_passports(&source, model, &train.images, train.len(), pool, mode, cfg.seed ^ 0x9a55)
        }
    }
}

/// Trains per `cfg` and writes the checkpoint, passports (with signature)
/// and any trigger or watermark key into `cfg.out_dir`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<ResultRecord> {
    let started = Instant::now();
    let (train, test) = load_dataset(cfg.dataset, cfg.n_train, cfg.n_test, cfg.data_seed, cfg.data_dir.as_deref())?;
    let spec = cfg.model_spec(&train);
    let model = PassportModel::build(spec, cfg.seed)?;
    let sc = cfg.scheme_config();
    let plain = model.passport_layers().is_empty();
    let mut rec = ResultRecord::new("train", cfg);
    let signature = if plain {
        None
    } else {
        Some(encode_signature(&cfg.signature, &model.passport_capacities(), cfg.seed, cfg.gamma0)?)
    };
    if plain && cfg.watermark == BaselineWatermark::None && cfg.scheme == Scheme::V3 {
        return Err(Error::Config("a V3 baseline has no trigger set; pick watermark = trigger or add passport layers".into()));
    }
    let mut check = sc.clone();
    if plain {
        check.lambda_t = 0.0;
    }
    check.scheme = if plain { Scheme::V1 } else { cfg.scheme };
    check.validate()?;
    if cfg.dry_run {
        rec.metric("dry_run", true);
        rec.metric("parameters", model.params().iter().map(|p| p.len()).sum::<usize>());
        return Ok(rec.finish(started));
    }
    fs::create_dir_all(&cfg.out_dir)?;
    let trigger = (cfg.scheme == Scheme::V3 || cfg.watermark == BaselineWatermark::Trigger)
        .then(|| random_trigger_set(cfg.trigger_size, train.shape, train.num_classes, cfg.seed ^ 0x7e1));
    let out: TrainedModel;
    if plain {
        match cfg.watermark {
            BaselineWatermark::None => out = train_plain(&model, &train, None, None, 0.0, &sc)?,
            BaselineWatermark::Feature => {
                let wm = FeatureWatermark::generate(&model, DEFAULT_EMBED_LAYER, DEFAULT_FEATURE_BITS, cfg.seed ^ 0xfea7)?;
                out = embed_feature_watermark(&model, &wm, &train, &sc)?;
                rec.metric("watermark_detection", detect_feature_watermark(&out.model, &wm)?);
                let p = cfg.out_dir.join(WATERMARK_FILE);
                save_watermark_key(&p, &out.model, &WatermarkKey::Feature(wm))?;
                rec.artifacts.insert("watermark".into(), p);
            }
            BaselineWatermark::Trigger => {
                let wm = TriggerWatermark { trigger: trigger.clone().expect("drawn above") };
                out = embed_trigger_watermark(&model, &wm, &train, &SchemeConfig { lambda_t: cfg.lambda_t, ..sc.clone() })?;
                rec.metric("watermark_detection", detect_trigger_watermark(&out.model, &wm.trigger)?);
                let p = cfg.out_dir.join(WATERMARK_FILE);
                save_watermark_key(&p, &out.model, &WatermarkKey::Trigger(wm))?;
                rec.artifacts.insert("watermark".into(), p);
            }
        }
        rec.metric("accuracy", accuracy(&out.model, &test, &Branch::Public)?);
    } else {
        let sig = signature.as_ref().expect("encoded above");
        let passports = make_passports(cfg, &model, &train)?;
        out = match cfg.scheme {
            Scheme::V1 => train_v1(&model, &train, &passports, sig, &sc)?,
            Scheme::V2 => train_multitask(&model, &train, &passports, sig, None, &sc)?,
            Scheme::V3 => train_multitask(&model, &train, &passports, sig, trigger.as_ref(), &sc)?,
        };
        let passport_acc = accuracy(&out.model, &test, &Branch::Passport(&passports))?;
        rec.metric("passport_accuracy", passport_acc);
        rec.metric("accuracy", deployment_accuracy(&out.model, &passports, &test)?);
        if cfg.scheme.is_multitask() {
            rec.metric("public_accuracy", accuracy(&out.model, &test, &Branch::Public)?);
        }
        let det = detect_signature(&out.model, &passports, Some(sig))?;
        rec.metric("signature_match_rate", det.match_rate);
        rec.metric("decoded_signature", &det.ascii);
        let p = cfg.out_dir.join(PASSPORT_FILE);
        save_passports(&p, &passports, Some(sig))?;
        rec.artifacts.insert("passports".into(), p);
        if let Some(t) = &trigger {
            rec.metric("trigger_detection", detect_trigger_watermark(&out.model, t)?);
            let p = cfg.out_dir.join(TRIGGER_FILE);
            save_watermark_key(&p, &out.model, &WatermarkKey::Trigger(TriggerWatermark { trigger: t.clone() }))?;
            rec.artifacts.insert("trigger".into(), p);
        }
    }
    rec.metric("sample_passes", out.sample_passes);
    rec.metric("epochs", cfg.epochs);
    if let Some(last) = out.history.last() {
        rec.metric("final_loss", last.loss.total);
    }
    let ck = cfg.out_dir.join(MODEL_FILE);
    save_checkpoint(&ck, &out.model, Some(&sc), &out.history, out.sample_passes)?;
    rec.artifacts.insert("model".into(), ck);
    fs::write(cfg.out_dir.join(SUMMARY_FILE), serde_json::to_vec_pretty(&rec.metrics)?)?;
    let rec = rec.finish(started);
    ResultsStore::new(&cfg.results_dir).append(&rec)?;
    Ok(rec)
}

fn sibling(model_path: &Path, name: &str) -> PathBuf {
    model_path.parent().unwrap_or(Path::new(".")).join(name)
}

/// `M_t`: explicit config value, else public accuracy for V2/V3, else the
/// accuracy recorded next to the checkpoint at training time.
fn target_accuracy(cfg: &ExperimentConfig, model_path: &Path, model: &PassportModel, test: &Dataset) -> Result<f64> {
    if let Some(t) = cfg.target_accuracy {
        return Ok(t);
    }
    if model.spec.scheme.is_multitask() {
        return accuracy(model, test, &Branch::Public);
    }
    let summary = sibling(model_path, SUMMARY_FILE);
    let metrics: BTreeMap<String, Value> = serde_json::from_slice(&fs::read(&summary).map_err(|_| {
        Error::Config(format!("no target_accuracy given and no {} next to the checkpoint", SUMMARY_FILE))
    })?)?;
    metrics
        .get("passport_accuracy")
        .or_else(|| metrics.get("accuracy"))
        .and_then(Value::as_f64)
        .ok_or_else(|| Error::Format(format!("{} has no accuracy", summary.display())))
}

fn load_trigger(path: Option<&Path>, model_path: &Path) -> Result<Option<Dataset>> {
    let p = match path {
        Some(p) => p.to_path_buf(),
        None => sibling(model_path, TRIGGER_FILE),
    };
    if !p.exists() {
        return if path.is_some() { Err(Error::Config(format!("trigger file {} not found", p.display()))) } else { Ok(None) };
    }
    match load_watermark_key(&p)? {
        WatermarkKey::Trigger(t) => Ok(Some(t.trigger)),
        WatermarkKey::Feature(_) => Err(Error::Config(format!("{} holds a feature key, not a trigger set", p.display()))),
    }
}

fn claimed(path: &Path, model: &PassportModel) -> Result<(PassportSet, Signature)> {
    let (set, sig) = load_passports_for(path, model)?;
    let sig = sig.ok_or_else(|| Error::Config(format!("{} carries no signature claim", path.display())))?;
    Ok((set, sig))
}

pub fn cmd_verify(cfg: &ExperimentConfig, model_path: &Path, passport_path: &Path, trigger_path: Option<&Path>) -> Result<(VerificationReport, ResultRecord)> {
    let started = Instant::now();
    let (model, _) = load_checkpoint(model_path)?;
    let (passports, signature) = claimed(passport_path, &model)?;
    let (_, test) = load_dataset(cfg.dataset, cfg.n_train, cfg.n_test, cfg.data_seed, cfg.data_dir.as_deref())?;
    let trigger = if model.spec.scheme == Scheme::V3 { load_trigger(trigger_path, model_path)? } else { None };
    let vc = VerifyConfig {
        fidelity: FidelityConfig::new(target_accuracy(cfg, model_path, &model, &test)?, cfg.epsilon_f)?,
        ..VerifyConfig::new(0.0)?
    };
    let report = verify_ownership(&model, &passports, &signature, trigger.as_ref(), &test, &vc)?;
    let mut rec = ResultRecord::new("verify", cfg);
    rec.metric("report", &report);
    rec.metric("verdict", report.verdict);
    rec.artifacts.insert("model".into(), model_path.into());
    rec.artifacts.insert("passports".into(), passport_path.into());
    let rec = rec.finish(started);
    ResultsStore::new(&cfg.results_dir).append(&rec)?;
    Ok((report, rec))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Pixel values sampled from two image sets for a KS comparison.
pub fn pixel_sample(a: &Dataset, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| a.images[rng.random_range(0..a.images.len())] as f64).collect()
}

/// Runs one attack against the artifacts of a training run and writes any
/// forged artifact into `cfg.out_dir`.
pub fn cmd_attack(
    cfg: &ExperimentConfig,
    kind: AttackKind,
    model_path: &Path,
    passport_path: Option<&Path>,
    key_path: Option<&Path>,
) -> Result<ResultRecord> {
    let started = Instant::now();
    let (model, meta) = load_checkpoint(model_path)?;
    let mut rec = ResultRecord::new(format!("attack:{kind}"), cfg);
    rec.metric("kind", kind.name());
    rec.artifacts.insert("model".into(), model_path.into());
    let claim = if kind.needs_passports() {
        let p = passport_path.map(Path::to_path_buf).unwrap_or_else(|| sibling(model_path, PASSPORT_FILE));
        let c = claimed(&p, &model)?;
        rec.artifacts.insert("passports".into(), p);
        Some(c)
    } else {
        None
    };
    if cfg.dry_run {
        rec.metric("dry_run", true);
        return Ok(rec.finish(started));
    }
    let (train, test) = load_dataset(cfg.dataset, cfg.n_train, cfg.n_test, cfg.data_seed, cfg.data_dir.as_deref())?;
    let iterations = AttackBudget::iterations_for(meta.sample_passes, cfg.budget_fraction, cfg.batch_size);
    let budget = |access| AttackBudget { batch_size: cfg.batch_size, ..AttackBudget::new(iterations, cfg.attack_lr, cfg.seed, access) };
    fs::create_dir_all(&cfg.out_dir)?;
    match kind {
        AttackKind::ForgeFeature => {
            let before = accuracy(&model, &test, &Branch::Public)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let bits: Vec<bool> = (0..DEFAULT_FEATURE_BITS).map(|_| rng.random()).collect();
            let out = attacks::forge_feature_watermark(&model, DEFAULT_EMBED_LAYER, &bits, None, &AttackBudget::new(iterations, 1.0, cfg.seed, DataAccess::None))?;
            rec.metric("forged_detection", out.detection);
            rec.metric("converged", out.converged);
            rec.metric("iterations", out.iterations);
            rec.metric("weights_unchanged", out.weights_unchanged);
            rec.metric("accuracy_before", before);
            rec.metric("accuracy_after", accuracy(&model, &test, &Branch::Public)?);
            let p = cfg.out_dir.join("forged-feature.key");
            save_watermark_key(&p, &model, &WatermarkKey::Feature(out.watermark))?;
            rec.artifacts.insert("forged".into(), p);
        }
        AttackKind::ForgeTrigger => {
            let fc = TriggerForgeConfig {
                eta: cfg.eta,
                iterations: (meta.sample_passes as f64 * cfg.budget_fraction / cfg.trigger_size.max(1) as f64) as usize,
                n_base: cfg.trigger_size,
                seed: cfg.seed,
                ..TriggerForgeConfig::default()
            };
            let out = attacks::forge_trigger_set(&model, &Branch::Public, &fc)?;
            rec.metric("forged_detection", out.detection);
            rec.metric("converged", out.converged);
            rec.metric("iterations", out.iterations);
            rec.metric("weights_unchanged", out.weights_unchanged);
            rec.metric("sample_passes", out.sample_passes);
            if let Some(WatermarkKey::Trigger(genuine)) = key_path.map(load_watermark_key).transpose()? {
                let (d, p) = ks_two_sample(&pixel_sample(&genuine.trigger, 2000, 1), &pixel_sample(&out.forged, 2000, 2));
                rec.metric("ks_statistic", d);
                rec.metric("ks_p_value", p);
            }
            let p = cfg.out_dir.join("forged-trigger.key");
            save_watermark_key(&p, &model, &WatermarkKey::Trigger(TriggerWatermark { trigger: out.forged }))?;
            rec.artifacts.insert("forged".into(), p);
        }
        AttackKind::RandomPassport => {
            let out = attacks::attack_random_passport(&model, &test, cfg.n_fake, cfg.seed)?;
            let (passports, _) = claim.as_ref().expect("loaded");
            rec.metric("valid_accuracy", accuracy(&model, &test, &Branch::Passport(passports))?);
            rec.metric("accuracies", &out.accuracies);
            rec.metric("mean_accuracy", out.mean);
            rec.metric("max_accuracy", out.max);
        }
        AttackKind::ReversePassport => {
            let (passports, signature) = claim.as_ref().expect("loaded");
            let out = attacks::attack_reverse_passport(&model, &train, &test, &budget(DataAccess::TrainTest), cfg.reverse_target)?;
            rec.metric("valid_accuracy", accuracy(&model, &test, &Branch::Passport(passports))?);
            rec.metric("best_accuracy", out.best_accuracy);
            rec.metric("final_accuracy", out.final_accuracy);
            rec.metric("history", &out.history);
            rec.metric("sample_passes", out.sample_passes);
            if let Some(forged) = &out.passports {
                // The forger presents the recovered passports with the signature they decode to.
                let det = detect_signature(&model, forged, None)?;
                let bits: Vec<bool> = det.layers.iter().flat_map(|(_, b)| b.iter().copied()).collect();
                let claim_sig = Signature::from_layers(
                    det.layers
                        .iter()
                        .map(|(l, b)| crate::signatures::LayerSignature {
                            layer: *l,
                            signs: b.iter().map(|&x| crate::signatures::sign_of_bit(x)).collect(),
                        })
                        .collect(),
                    String::new(),
                    signature.gamma0,
                )?;
                rec.metric("forged_signature_bits", bits.len());
                let p = cfg.out_dir.join("forged-passports.bin");
                save_passports(&p, forged, Some(&claim_sig))?;
                rec.artifacts.insert("forged".into(), p);
            }
        }
        AttackKind::Insider => {
            let (passports, signature) = claim.as_ref().expect("loaded");
            let out = attacks::attack_insider(&model, passports, signature, cfg.flip_fraction, &train, &test, &budget(DataAccess::TrainTest))?;
            rec.metric("flip_fraction", out.flip_fraction);
            rec.metric("accuracy_before", out.accuracy_before);
            rec.metric("accuracy_after", out.accuracy_after);
            rec.metric("modified_match_rate", out.modified_match_rate);
            rec.metric("original_match_rate", out.original_match_rate);
            let p = cfg.out_dir.join("insider-passports.bin");
            save_passports(&p, &out.passports, Some(&out.modified_signature))?;
            rec.artifacts.insert("forged".into(), p);
        }
        AttackKind::FlipSigns => {
            let (passports, signature) = claim.as_ref().expect("loaded");
            let layers = model.passport_layers().to_vec();
            let mut accs = Vec::new();
            for s in 0..cfg.flip_seeds.max(1) as u64 {
                accs.push(attacks::attack_flip_signs(&model, passports, signature, cfg.flip_fraction, &layers, &test, cfg.seed + s)?.accuracy);
            }
            rec.metric("flip_fraction", cfg.flip_fraction);
            rec.metric("accuracies", &accs);
            rec.metric("median_accuracy", median(&mut accs));
        }
        AttackKind::Finetune => {
            let (passports, signature) = claim.as_ref().expect("loaded");
            let (ntr, nte) = load_dataset(cfg.finetune_dataset, cfg.n_train, cfg.n_test, cfg.data_seed ^ 0xf7, cfg.data_dir.as_deref())?;
            let trigger = if model.spec.scheme == Scheme::V3 { load_trigger(key_path, model_path)? } else { None };
            let fc = FinetuneConfig {
                epochs: cfg.finetune_epochs,
                lr: LrSchedule { base: cfg.lr, ..LrSchedule::default() },
                batch_size: cfg.batch_size,
                seed: cfg.seed,
                ..FinetuneConfig::default()
            };
            let before_sig = detect_signature(&model, passports, Some(signature))?.match_rate;
            let before_trig = trigger.as_ref().map(|t| detect_trigger_watermark(&model, t)).transpose()?;
            let out = attacks::removal_finetune(&model, passports, signature, trigger.as_ref(), &ntr, &nte, &fc)?;
            rec.metric("signature_detection_before", before_sig);
            rec.metric("signature_detection", out.signature_detection);
            rec.metric("trigger_detection_before", before_trig);
            rec.metric("trigger_detection", out.trigger_detection);
            rec.metric("new_task_accuracy", out.new_task_accuracy);
            let p = cfg.out_dir.join("finetuned.ckpt");
            save_checkpoint(&p, &out.model, None, &[], 0)?;
            rec.artifacts.insert("finetuned".into(), p);
        }
        AttackKind::Prune => {
            let (passports, signature) = claim.as_ref().expect("loaded");
            let curve = attacks::prune_curve(&model, &cfg.prune_rates, passports, signature, &test)?;
            rec.metric("curve", &curve);
        }
    }
    let rec = rec.finish(started);
    ResultsStore::new(&cfg.results_dir).append(&rec)?;
    Ok(rec)
}

/// Fidelity of `n_fake` random passport sets against `M_t`.
pub fn cmd_probe(cfg: &ExperimentConfig, model_path: &Path) -> Result<ResultRecord> {
    let started = Instant::now();
    let (model, _) = load_checkpoint(model_path)?;
    let (_, test) = load_dataset(cfg.dataset, cfg.n_train, cfg.n_test, cfg.data_seed, cfg.data_dir.as_deref())?;
    let target = target_accuracy(cfg, model_path, &model, &test)?;
    let stats = noninvertibility_probe(&model, &test, cfg.n_fake, cfg.seed, &FidelityConfig::new(target, cfg.epsilon_f)?)?;
    let mut rec = ResultRecord::new("probe", cfg);
    rec.metric("target_accuracy", target);
    rec.metric("accuracies", &stats.accuracies);
    rec.metric("mean_accuracy", stats.mean_accuracy);
    rec.metric("max_accuracy", stats.max_accuracy);
    rec.metric("fidelity_passes", stats.fidelity_passes);
    rec.artifacts.insert("model".into(), model_path.into());
    let rec = rec.finish(started);
    ResultsStore::new(&cfg.results_dir).append(&rec)?;
    Ok(rec)
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub markdown: String,
    /// `(file name, svg document)`.
    pub plots: Vec<(String, String)>,
}

fn fmt_metric(v: Option<&Value>) -> String {
    match v {
        Some(Value::Number(n)) => n.as_f64().map(|f| format!("{f:.2}")).unwrap_or_else(|| n.to_string()),
        Some(Value::Null) | None => "-".into(),
        Some(Value::String(s)) => s.clone(),
        Some(other) => other.to_string(),
    }
}

fn svg_frame(title: &str, x_label: &str, y_label: &str, body: &str, legend: &[(&str, &str)]) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="480" height="320" font-family="sans-serif" font-size="11">
<rect width="480" height="320" fill="white"/>
<text x="240" y="18" text-anchor="middle" font-size="13">{title}</text>
<line x1="50" y1="270" x2="450" y2="270" stroke="black"/>
<line x1="50" y1="270" x2="50" y2="40" stroke="black"/>
<text x="250" y="300" text-anchor="middle">{x_label}</text>
<text x="14" y="155" text-anchor="middle" transform="rotate(-90 14 155)">{y_label}</text>
"##
    );
    for i in 0..=5 {
        let y = 270.0 - 46.0 * i as f64;
        let _ = writeln!(s, r#"<text x="45" y="{:.0}" text-anchor="end">{}</text>"#, y + 4.0, 20 * i);
    }
    s.push_str(body);
    for (i, (name, color)) in legend.iter().enumerate() {
        let y = 50 + 16 * i;
        let _ = writeln!(s, r#"<rect x="360" y="{}" width="10" height="10" fill="{color}"/><text x="375" y="{}">{name}</text>"#, y - 9, y);
    }
    s.push_str("</svg>\n");
    s
}

/// Detection and accuracy (percent) against pruning rate.
pub fn prune_plot(curve: &[(f64, f64, f64)]) -> String {
    let px = |r: f64| 50.0 + 400.0 * r;
    let py = |v: f64| 270.0 - 2.3 * v;
    let line = |f: &dyn Fn(&(f64, f64, f64)) -> f64, color: &str| {
        let pts: Vec<String> = curve.iter().map(|p| format!("{:.1},{:.1}", px(p.0), py(f(p)))).collect();
        format!("<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n", pts.join(" "))
    };
    let mut body = line(&|p| 100.0 * p.2, "#1f77b4");
    body += &line(&|p| p.1, "#d62728");
    for i in 0..=5 {
        let r = i as f64 * 0.2;
        let _ = writeln!(body, r#"<text x="{:.0}" y="284" text-anchor="middle">{r:.1}</text>"#, px(r));
    }
    svg_frame("Signature detection under pruning", "pruning rate", "percent", &body, &[("detection", "#1f77b4"), ("accuracy", "#d62728")])
}

/// Overlaid 5-point histograms of accuracies per series.
pub fn accuracy_histogram(series: &[(&str, &[f64])]) -> String {
    const COLORS: [&str; 3] = ["#2ca02c", "#ff7f0e", "#9467bd"];
    let mut counts = vec![[0usize; 20]; series.len()];
    for (c, (_, vals)) in counts.iter_mut().zip(series) {
        for &v in vals.iter() {
            c[((v / 5.0).floor() as usize).min(19)] += 1;
        }
    }
    let peak = counts.iter().flatten().copied().max().unwrap_or(1).max(1) as f64;
    let mut body = String::new();
    let w = 20.0 / series.len().max(1) as f64;
    for (k, c) in counts.iter().enumerate() {
        for (bin, &n) in c.iter().enumerate().filter(|(_, n)| **n > 0) {
            let h = 230.0 * n as f64 / peak;
            let x = 50.0 + 20.0 * bin as f64 + w * k as f64;
            let _ = writeln!(body, r#"<rect x="{x:.1}" y="{:.1}" width="{w:.1}" height="{h:.1}" fill="{}"/>"#, 270.0 - h, COLORS[k % 3]);
        }
    }
    for i in 0..=5 {
        let _ = writeln!(body, r#"<text x="{:.0}" y="284" text-anchor="middle">{}</text>"#, 50 + 80 * i, 20 * i);
    }
    let legend: Vec<(&str, &str)> = series.iter().enumerate().map(|(i, (n, _))| (*n, COLORS[i % 3])).collect();
    svg_frame("Test accuracy by passport source (count, scaled)", "accuracy (%)", "relative count", &body, &legend)
}

fn table(out: &mut String, title: &str, cols: &[&str], rows: &[Vec<String>]) {
    if rows.is_empty() {
        return;
    }
    let _ = writeln!(out, "\n## {title}\n\n| {} |\n|{}|", cols.join(" | "), cols.iter().map(|_| "---").collect::<Vec<_>>().join("|"));
    for r in rows {
        let _ = writeln!(out, "| {} |", r.join(" | "));
    }
}

pub fn build_report(records: &[ResultRecord]) -> Report {
    let mut md = String::from("# Results\n");
    let _ = writeln!(md, "\n{} record(s).", records.len());
    let by = |prefix: &str| records.iter().filter(move |r| r.command == prefix).collect::<Vec<_>>();
    let m = |r: &ResultRecord, k: &str| fmt_metric(r.metrics.get(k));
    let train: Vec<Vec<String>> = by("train")
        .iter()
        .filter(|r| !r.metrics.contains_key("dry_run"))
        .map(|r| {
            vec![
                r.config_hash.clone(),
                r.config.architecture.to_string(),
                r.config.scheme.to_string(),
                m(r, "accuracy"),
                m(r, "passport_accuracy"),
                m(r, "signature_match_rate"),
                m(r, "trigger_detection"),
                m(r, "watermark_detection"),
            ]
        })
        .collect();
    table(&mut md, "Training runs", &["config", "arch", "scheme", "accuracy", "passport acc", "sig match", "trigger det", "wm det"], &train);
    let verify: Vec<Vec<String>> = by("verify")
        .iter()
        .map(|r| {
            let rep = r.metrics.get("report");
            let g = |k: &str| fmt_metric(rep.and_then(|v| v.get(k)));
            vec![r.config_hash.clone(), g("accuracy_with_claimed_passport"), g("baseline_accuracy"), g("signature_match_rate"), m(r, "verdict")]
        })
        .collect();
    table(&mut md, "Verification", &["config", "claimed acc", "M_t", "sig match", "verdict"], &verify);
    let mut attack_rows = Vec::new();
    for r in records.iter().filter(|r| r.command.starts_with("attack:")) {
        let kind = r.command.trim_start_matches("attack:");
        let summary = match kind {
            "forge-feature" | "forge-trigger" => format!(
                "detection {} in {} iterations, weights unchanged {}",
                m(r, "forged_detection"),
                m(r, "iterations"),
                m(r, "weights_unchanged")
            ),
            "random-passport" => format!("mean {} / max {} (valid {})", m(r, "mean_accuracy"), m(r, "max_accuracy"), m(r, "valid_accuracy")),
            "reverse-passport" => format!("best {} (valid {})", m(r, "best_accuracy"), m(r, "valid_accuracy")),
            "insider" => format!("{} flipped: {} -> {}", m(r, "flip_fraction"), m(r, "accuracy_before"), m(r, "accuracy_after")),
            "flip-signs" => format!("{} flipped: median {}", m(r, "flip_fraction"), m(r, "median_accuracy")),
            "finetune" => format!(
                "signature {} -> {}, trigger {} -> {}, new task {}",
                m(r, "signature_detection_before"),
                m(r, "signature_detection"),
                m(r, "trigger_detection_before"),
                m(r, "trigger_detection"),
                m(r, "new_task_accuracy")
            ),
            "prune" => "see pruning table".into(),
            _ => String::new(),
        };
        attack_rows.push(vec![r.config_hash.clone(), r.config.scheme.to_string(), kind.to_string(), summary]);
    }
    table(&mut md, "Attacks", &["config", "scheme", "kind", "outcome"], &attack_rows);
    let mut plots = Vec::new();
    for (i, r) in records.iter().filter(|r| r.command == "attack:prune").enumerate() {
        let curve: Vec<(f64, f64, f64)> = r
            .metrics
            .get("curve")
            .and_then(Value::as_array)
            .map(|a| {
                a.iter()
                    .filter_map(|p| Some((p.get("rate")?.as_f64()?, p.get("accuracy")?.as_f64()?, p.get("detection")?.as_f64()?)))
                    .collect()
            })
            .unwrap_or_default();
        let rows: Vec<Vec<String>> =
            curve.iter().map(|c| vec![format!("{:.2}", c.0), format!("{:.2}", c.1), format!("{:.2}", 100.0 * c.2)]).collect();
        table(&mut md, &format!("Pruning ({} {})", r.config.scheme, r.config_hash), &["rate", "accuracy", "detection %"], &rows);
        let name = format!("prune-{i}.svg");
        let _ = writeln!(md, "\n![pruning]({name})");
        plots.push((name, prune_plot(&curve)));
    }
    let valid: Vec<f64> = records
        .iter()
        .filter_map(|r| if r.command == "train" { r.get_f64("passport_accuracy") } else { r.get_f64("valid_accuracy") })
        .collect();
    let fake1: Vec<f64> = records
        .iter()
        .filter(|r| r.command == "attack:random-passport" || r.command == "probe")
        .filter_map(|r| r.metrics.get("accuracies").and_then(Value::as_array))
        .flat_map(|a| a.iter().filter_map(Value::as_f64).collect::<Vec<_>>())
        .collect();
    let fake2: Vec<f64> = by("attack:reverse-passport").iter().filter_map(|r| r.get_f64("best_accuracy")).collect();
    if !fake1.is_empty() || !fake2.is_empty() {
        let name = "accuracy-histogram.svg".to_string();
        let _ = writeln!(md, "\n## Passport accuracy\n\n![histogram]({name})");
        plots.push((name, accuracy_histogram(&[("valid", &valid), ("fake1", &fake1), ("fake2", &fake2)])));
    }
    Report { markdown: md, plots }
}

/// Writes `report.md` and the plots into `out_dir`; an empty or missing
/// results directory yields an empty report.
pub fn cmd_report(results_dir: &Path, out_dir: &Path) -> Result<Report> {
    let report = build_report(&ResultsStore::new(results_dir).records()?);
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("report.md"), &report.markdown)?;
    for (name, svg) in &report.plots {
        fs::write(out_dir.join(name), svg)?;
    }
    Ok(report)
}

/// All metrics of a record as one JSON value, for printing.
pub fn summary(record: &ResultRecord) -> Value {
    json!({ "command": record.command, "config_hash": record.config_hash, "metrics": record.metrics, "artifacts": record.artifacts })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_config_parses_and_rejects_unknown_keys() {
        let mut c = ExperimentConfig::default();
        c.apply_text("scheme = v3 # comment\npassport_layers = conv2, 3\nprune_rates = 0,0.5\n\nsignature = hi there").unwrap();
        assert_eq!(c.scheme, Scheme::V3);
        assert_eq!(c.passport_layers, Some(vec![1, 2]));
        assert_eq!(c.prune_rates, vec![0.0, 0.5]);
        assert_eq!(c.signature, "hi there");
        assert!(c.apply_text("bogus = 1").is_err());
        assert!(c.apply_text("epochs = many").is_err());
        assert!(c.set("passport_layers", "0").is_err());
        c.set("passport_layers", "none").unwrap();
        assert_eq!(c.passport_layers, Some(vec![]));
    }

    #[test]
    fn every_listed_key_is_settable() {
        for key in ExperimentConfig::KEYS {
            let mut c = ExperimentConfig::default();
            c.set("passport_kind", "fixed").unwrap();
            let v = match key {
                "architecture" => "alexnet_p",
                "scheme" => "v2",
                "passport_layers" => "3",
                "passport_kind" => "shuffled:4",
                "watermark" => "feature",
                "dataset" | "finetune_dataset" => "gratings",
                "deterministic" | "dry_run" => "true",
                "reverse_target" => "scales",
                "prune_rates" => "0.1",
                "passport_source" | "data_dir" | "out_dir" | "results_dir" | "signature" | "note" => "x",
                "lr" | "lambda_t" | "lambda_r" | "gamma0" | "epsilon_f" | "target_accuracy" | "budget_fraction" | "attack_lr" | "flip_fraction" | "eta" => "0.5",
                _ => "3",
            };
            c.set(key, v).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn attack_kinds_round_trip_and_reject_unknown() {
        for k in AttackKind::ALL {
            assert_eq!(k.name().parse::<AttackKind>().unwrap(), k);
        }
        assert!(matches!("melt".parse::<AttackKind>(), Err(Error::Config(_))));
    }

    #[test]
    fn empty_store_gives_empty_report() {
        let dir = tempfile::tempdir().unwrap();
        let r = cmd_report(&dir.path().join("absent"), &dir.path().join("rep")).unwrap();
        assert!(r.plots.is_empty());
        assert!(dir.path().join("rep/report.md").exists());
    }

    #[test]
    fn store_never_overwrites() {
        let dir = tempfile::tempdir().unwrap();
        let store = ResultsStore::new(dir.path());
        let rec = ResultRecord::new("train", &ExperimentConfig::default());
        let a = store.append(&rec).unwrap();
        let b = store.append(&rec).unwrap();
        assert_ne!(a, b);
        assert_eq!(store.records().unwrap(), vec![rec.clone(), rec]);
    }

    #[test]
    fn plots_are_well_formed() {
        let p = prune_plot(&[(0.0, 90.0, 1.0), (0.6, 70.0, 1.0), (0.9, 20.0, 0.9)]);
        assert!(p.starts_with("<svg") && p.trim_end().ends_with("</svg>"));
        let h = accuracy_histogram(&[("valid", &[90.0]), ("fake1", &[10.0, 12.0]), ("fake2", &[])]);
        assert_eq!(h.matches("<rect").count(), 1 + 2 + 3);
    }
}
