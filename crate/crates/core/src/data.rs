//! Datasets: an offline synthetic 10-class image task (and a disjoint second
//! task for transfer), CIFAR10 binary batches from a local directory, and
//! the batching and accuracy helpers shared by training and attacks.

use crate::error::{Error, Result};
use crate::models::{Branch, Mode, PassportModel};
use crate::ops::loss::argmax_rows;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

/// Images in `[n, c, h, w]` layout with one label each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub shape: [usize; 3],
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<usize>, shape: [usize; 3], num_classes: usize) -> Result<Self> {
        let per: usize = shape.iter().product();
        if images.len() != labels.len() * per {
            return Err(Error::Data(format!("{} values for {} images of {shape:?}", images.len(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(Self { images, labels, shape, num_classes })
    }

    pub fn empty(shape: [usize; 3], num_classes: usize) -> Self {
        Self { images: Vec::new(), labels: Vec::new(), shape, num_classes }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Gathers the given samples into a contiguous batch.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f32>, Vec<usize>) {
        let mut x = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            x.extend_from_slice(self.image(i));
        }
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let (images, labels) = self.gather(indices);
        Self { images, labels, shape: self.shape, num_classes: self.num_classes }
    }

    /// The first `n` samples of a seeded permutation.
    pub fn random_subset(&self, n: usize, seed: u64) -> Result<Self> {
        if n > self.len() {
            return Err(Error::Data(format!("subset of {n} from {} samples", self.len())));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n);
        Ok(self.subset(&idx))
    }
}

/// Mini-batches of sample indices over one shuffled epoch; the last batch
/// may be short.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

const EVAL_BATCH: usize = 250;

/// Predicted class of every sample.
pub fn predict_all(model: &PassportModel, data: &Dataset, branch: &Branch<'_>) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    let per = data.image_len();
    for start in (0..data.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(data.len());
        let pass = model.forward(&data.images[start * per..end * per], end - start, branch, Mode::Eval, false)?;
        out.extend(argmax_rows(&pass.logits, model.num_classes()));
    }
    Ok(out)
}

/// Top-1 accuracy in percent.
pub fn accuracy(model: &PassportModel, data: &Dataset, branch: &Branch<'_>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("accuracy of an empty dataset".into()));
    }
    let pred = predict_all(model, data, branch)?;
    let hits = pred.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTask {
    /// Ten geometric shapes at random positions, sizes and colors.
    Shapes,
    /// Ten sinusoidal gratings (five orientations, two frequencies).
    Gratings,
}

impl fmt::Display for SyntheticTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticTask::Shapes => "shapes",
            SyntheticTask::Gratings => "gratings",
        })
    }
}

impl FromStr for SyntheticTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shapes" => Ok(SyntheticTask::Shapes),
            "gratings" => Ok(SyntheticTask::Gratings),
            other => Err(Error::Config(format!("unknown synthetic task `{other}`"))),
        }
    }
}

pub const SYNTHETIC_SIDE: usize = 32;

fn shape_mask(class: usize, u: f32, v: f32, s: f32) -> bool {
    let r = (u * u + v * v).sqrt();
    let box_r = u.abs().max(v.abs());
    match class {
        0 => r < s,
        1 => r < s && r > 0.55 * s,
        2 => box_r < 0.8 * s,
        3 => box_r < 0.85 * s && box_r > 0.5 * s,
        4 => {
            let top = -0.8 * s;
            let base = 0.65 * s;
            v > top && v < base && u.abs() < (v - top) / (base - top) * 0.85 * s
        }
        5 => (u.abs() < 0.25 * s && v.abs() < s) || (v.abs() < 0.25 * s && u.abs() < s),
        6 => {
            let (a, b) = ((u + v) * std::f32::consts::FRAC_1_SQRT_2, (u - v) * std::f32::consts::FRAC_1_SQRT_2);
            (a.abs() < 0.22 * s && b.abs() < s) || (b.abs() < 0.22 * s && a.abs() < s)
        }
        7 => box_r < 0.85 * s && (v / (0.34 * s)).floor() as i32 % 2 == 0,
        8 => box_r < 0.85 * s && (u / (0.34 * s)).floor() as i32 % 2 == 0,
        9 => box_r < 0.85 * s && ((u / (0.42 * s)).floor() as i32 + (v / (0.42 * s)).floor() as i32) % 2 == 0,
        _ => unreachable!("ten classes"),
    }
}

fn render(task: SyntheticTask, class: usize, rng: &mut ChaCha8Rng, noise: &Normal<f32>, out: &mut [f32]) {
    let side = SYNTHETIC_SIDE;
    let plane = side * side;
    let mut bg = [0.0f32; 3];
    let mut fg = [0.0f32; 3];
    for ch in 0..3 {
        bg[ch] = rng.random_range(-0.9..0.3);
        fg[ch] = bg[ch] + rng.random_range(0.3..1.0);
    }
    if rng.random::<bool>() {
        std::mem::swap(&mut bg, &mut fg);
    }
    match task {
        SyntheticTask::Shapes => {
            let s = rng.random_range(6.0..11.0f32);
            let cx = 15.5 + rng.random_range(-5.0..5.0f32);
            let cy = 15.5 + rng.random_range(-5.0..5.0f32);
            let rot = rng.random_range(-0.3..0.3f32);
            let (sr, cr) = rot.sin_cos();
            for y in 0..side {
                for x in 0..side {
                    let (dx, dy) = (x as f32 - cx, y as f32 - cy);
                    let (u, v) = (cr * dx + sr * dy, -sr * dx + cr * dy);
                    let m = shape_mask(class, u, v, s);
                    for ch in 0..3 {
                        out[ch * plane + y * side + x] = if m { fg[ch] } else { bg[ch] };
                    }
                }
            }
        }
        SyntheticTask::Gratings => {
            let theta = (class % 5) as f32 * std::f32::consts::PI / 5.0 + rng.random_range(-0.12..0.12f32);
            let cycles = if class < 5 { 2.5 } else { 5.5 } * rng.random_range(0.9..1.1f32);
            let k = 2.0 * std::f32::consts::PI * cycles / side as f32;
            let phase = rng.random_range(0.0..std::f32::consts::TAU);
            let (st, ct) = theta.sin_cos();
            for y in 0..side {
                for x in 0..side {
                    let w = 0.5 + 0.5 * (k * (ct * x as f32 + st * y as f32) + phase).sin();
                    for ch in 0..3 {
                        out[ch * plane + y * side + x] = bg[ch] + (fg[ch] - bg[ch]) * w;
                    }
                }
            }
        }
    }
    for v in out.iter_mut() {
        *v += noise.sample(rng);
    }
}

/// `n` samples with labels balanced round-robin over ten classes, fully
/// determined by `seed`.
pub fn synthetic(task: SyntheticTask, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (task as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let noise = Normal::new(0.0, 0.5).expect("valid std");
    let per = 3 * SYNTHETIC_SIDE * SYNTHETIC_SIDE;
    let mut images = vec![0.0; n * per];
    let mut labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
    labels.shuffle(&mut rng);
    for (i, &class) in labels.iter().enumerate() {
        render(task, class, &mut rng, &noise, &mut images[i * per..(i + 1) * per]);
    }
    Dataset { images, labels, shape: [3, SYNTHETIC_SIDE, SYNTHETIC_SIDE], num_classes: 10 }
}

/// Train and test splits drawn from disjoint seed streams.
pub fn synthetic_split(task: SyntheticTask, n_train: usize, n_test: usize, seed: u64) -> (Dataset, Dataset) {
    (synthetic(task, n_train, seed), synthetic(task, n_test, seed.wrapping_add(0x5eed_0000_0001)))
}

/// Abstract trigger images (blocky random patterns) with uniformly random
/// labels. They come from a different distribution than any task data.
pub fn random_trigger_set(n: usize, shape: [usize; 3], num_classes: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = shape;
    let cell = 8;
    let mut images = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let (gh, gw) = (h.div_ceil(cell), w.div_ceil(cell));
        let grid: Vec<f32> = (0..c * gh * gw).map(|_| rng.random_range(-1.0..1.0)).collect();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    images.push(grid[(ch * gh + y / cell) * gw + x / cell]);
                }
            }
        }
        labels.push(rng.random_range(0..num_classes));
    }
    Dataset { images, labels, shape, num_classes }
}

const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];
const CIFAR_TRAIN_FILES: [&str; 5] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
const CIFAR_TEST_FILE: &str = "test_batch.bin";
const CIFAR_MANIFEST: &str = "MANIFEST.sha256";
const CIFAR_RECORD: usize = 1 + 3072;

fn decode_cifar(bytes: &[u8], images: &mut Vec<f32>, labels: &mut Vec<usize>) -> Result<()> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Data(format!("CIFAR10 batch of {} bytes is not whole records", bytes.len())));
    }
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::Data(format!("CIFAR10 label {label}")));
        }
        labels.push(label);
        for (i, &p) in rec[1..].iter().enumerate() {
            let ch = i / 1024;
            images.push((p as f32 / 255.0 - CIFAR_MEAN[ch]) / CIFAR_STD[ch]);
        }
    }
    Ok(())
}

/// Verifies the binary batch files in `dir` against `MANIFEST.sha256`,
/// writing the manifest on first use.
pub fn verify_cifar_cache(dir: &Path) -> Result<()> {
    let files: Vec<&str> = CIFAR_TRAIN_FILES.iter().copied().chain([CIFAR_TEST_FILE]).collect();
    let mut digests = Vec::with_capacity(files.len());
    for f in &files {
        let bytes = fs::read(dir.join(f)).map_err(|e| Error::Data(format!("{}: {e}", dir.join(f).display())))?;
        digests.push(hex::encode(Sha256::digest(&bytes)));
    }
    let manifest = dir.join(CIFAR_MANIFEST);
    let current: String = files.iter().zip(&digests).map(|(f, d)| format!("{d}  {f}\n")).collect();
    match fs::read_to_string(&manifest) {
        Ok(stored) if stored == current => Ok(()),
        Ok(_) => Err(Error::Data(format!("CIFAR10 files in {} do not match {CIFAR_MANIFEST}", dir.display()))),
        Err(_) => Ok(fs::write(&manifest, current)?),
    }
}

/// Loads the CIFAR10 binary release from `dir`, normalized per channel.
/// Returns `(train, test)`.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    verify_cifar_cache(dir)?;
    let load = |names: &[&str]| -> Result<Dataset> {
        let (mut images, mut labels) = (Vec::new(), Vec::new());
        for f in names {
            decode_cifar(&fs::read(dir.join(f))?, &mut images, &mut labels)?;
        }
        Dataset::new(images, labels, [3, 32, 32], 10)
    };
    Ok((load(&CIFAR_TRAIN_FILES)?, load(&[CIFAR_TEST_FILE])?))
}
