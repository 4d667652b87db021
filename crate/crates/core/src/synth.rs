//! Synthetic paired (fMRI, image, label) data.
//!
//! Each class is a parametric scene: a shape type and a colour, drawn with
//! random position and scale jitter. Voxel responses are a smoothed linear
//! encoding of pooled image features, per subject, plus white noise and a
//! low-rank background. Smoothing makes neighbouring voxels redundant and the
//! per-subject encodings make subjects disagree on the same image.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{CheckpointMeta, ParamStore};
use crate::tensor::Tensor;
use crate::xmodal::gather_rows;
use crate::seeded_rng;

pub const DATASET_FORMAT: &str = "neurovis-dataset";
pub const DATASET_VERSION: u32 = 1;

/// Pooled feature grid side.
const POOL: usize = 8;

const STREAM_ENCODING: u64 = 1;
const STREAM_BACKGROUND: u64 = 2;
const STREAM_SAMPLE: u64 = 1 << 32;

const PALETTE: [[f64; 3]; 10] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.75, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.90],
    [0.95, 0.55, 0.10],
    [0.50, 0.20, 0.70],
    [0.95, 0.95, 0.95],
    [0.55, 0.40, 0.20],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_voxels: usize,
    pub image_size: usize,
    pub n_classes: usize,
    pub n_subjects: usize,
    /// Signal-to-noise ratio; `inf` disables noise.
    pub snr: f64,
    /// Width of the spatial smoothing kernel, in voxels.
    pub redundancy_len: usize,
    /// Rank of the shared background component.
    pub background_rank: usize,
    /// Size of the subject-specific part of the encoding relative to the
    /// shared part.
    pub subject_variability: f64,
    pub samples_per_class: usize,
    pub test_per_class: usize,
    /// Put the last `holdout_classes` classes in the test split only.
    pub holdout_classes: usize,
    /// Voxel count must be a multiple of this (the fMRI patch size).
    pub patch_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_voxels: 1024,
            image_size: 32,
            n_classes: 10,
            n_subjects: 3,
            snr: 1.0,
            redundancy_len: 8,
            background_rank: 4,
            subject_variability: 0.5,
            samples_per_class: 40,
            test_per_class: 10,
            holdout_classes: 0,
            patch_size: 16,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.patch_size == 0 || self.n_voxels == 0 || !self.n_voxels.is_multiple_of(self.patch_size) {
            return bad(format!(
                "n_voxels {} must be a positive multiple of the patch size {}",
                self.n_voxels, self.patch_size
            ));
        }
        if self.image_size < POOL || !self.image_size.is_multiple_of(POOL) {
            return bad(format!("image_size {} must be a multiple of {POOL}", self.image_size));
        }
        if self.n_classes < 2 || self.n_classes > PALETTE.len() {
            return bad(format!("n_classes must be in [2, {}]", PALETTE.len()));
        }
        if self.n_subjects == 0 || self.samples_per_class == 0 {
            return bad("need at least one subject and one sample per class".into());
        }
        if self.test_per_class > self.samples_per_class {
            return bad("test_per_class exceeds samples_per_class".into());
        }
        if self.holdout_classes >= self.n_classes {
            return bad("at least one class must remain for training".into());
        }
        if !(self.snr > 0.0) {
            return bad(format!("snr must be positive, got {}", self.snr));
        }
        if self.redundancy_len == 0 || !(self.subject_variability >= 0.0) {
            return bad("redundancy_len must be positive and subject_variability non-negative".into());
        }
        Ok(())
    }

    fn feature_dim(&self) -> usize {
        POOL * POOL * 3 + 27
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub config: SynthConfig,
    /// `[N, n_voxels]`
    pub voxels: Tensor,
    /// `[N, H, W, 3]` in `[0, 1]`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub subjects: Vec<usize>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Renders one scene of class `class` with jitter drawn from `rng`.
pub fn render<R: Rng + ?Sized>(class: usize, size: usize, rng: &mut R) -> Tensor {
    let s = size as f64;
    let cx = s * (0.5 + rng.random_range(-0.12..0.12));
    let cy = s * (0.5 + rng.random_range(-0.12..0.12));
    let r = s * 0.3 * rng.random_range(0.8..1.2);
    let color = PALETTE[class % PALETTE.len()];
    let shape = class % 5;
    let mut img = Tensor::full([size, size, 3], 0.08);
    let data = img.data_mut();
    for y in 0..size {
        for x in 0..size {
            let dx = (x as f64 + 0.5 - cx) / r;
            let dy = (y as f64 + 0.5 - cy) / r;
            let inside = match shape {
                0 => dx * dx + dy * dy <= 1.0,
                1 => dx.abs() <= 0.8 && dy.abs() <= 0.8,
                2 => (-0.9..=0.8).contains(&dy) && dx.abs() <= (dy + 0.9) * 0.55,
                3 => (dx.abs() <= 0.3 && dy.abs() <= 1.0) || (dy.abs() <= 0.3 && dx.abs() <= 1.0),
                _ => {
                    let d = dx * dx + dy * dy;
                    (0.36..=1.0).contains(&d)
                }
            };
            if inside {
                let o = (y * size + x) * 3;
                data[o..o + 3].copy_from_slice(&color);
            }
        }
    }
    img
}

/// Colour-tuned unit centres: a 3×3×3 grid over RGB.
const TUNING_LEVELS: [f64; 3] = [0.1, 0.5, 0.9];
const TUNING_WIDTH: f64 = 0.25;
/// Gain of the position-invariant colour units relative to the retinotopic ones.
const TUNING_GAIN: f64 = 3.0;

/// Image features seen by the voxel encoder: average-pooled, centred
/// `8·8·3` retinotopic values followed by 27 position-invariant
/// colour-tuned responses.
pub fn features(image: &Tensor) -> Vec<f64> {
    let size = image.shape()[0];
    let cell = size / POOL;
    let norm = (cell * cell) as f64;
    let mut f = vec![0.0; POOL * POOL * 3 + 27];
    let (spatial, tuned) = f.split_at_mut(POOL * POOL * 3);
    let pixels = (size * size) as f64;
    for y in 0..size {
        for x in 0..size {
            let o = (y * size + x) * 3;
            let px = &image.data()[o..o + 3];
            let fo = ((y / cell) * POOL + x / cell) * 3;
            for c in 0..3 {
                spatial[fo + c] += (px[c] - 0.3) / norm;
            }
            for (u, out) in tuned.iter_mut().enumerate() {
                let centre = [TUNING_LEVELS[u / 9], TUNING_LEVELS[(u / 3) % 3], TUNING_LEVELS[u % 3]];
                let d2: f64 = px.iter().zip(centre).map(|(a, b)| (a - b).powi(2)).sum();
                *out += TUNING_GAIN * (-d2 / (2.0 * TUNING_WIDTH * TUNING_WIDTH)).exp() / pixels;
            }
        }
    }
    f
}

/// Gaussian smoothing along the voxel axis, with standard deviation
/// `width / 2` and zero padding.
pub fn smooth(v: &[f64], width: usize) -> Vec<f64> {
    let sigma = width as f64 / 2.0;
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let n = v.len() as isize;
    (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let j = i + k as isize - radius;
                if (0..n).contains(&j) {
                    acc += w * v[j as usize];
                }
            }
            acc
        })
        .collect()
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

fn matvec(m: &[f64], cols: usize, x: &[f64]) -> Vec<f64> {
    m.chunks_exact(cols)
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Generates the dataset; every sample draws from its own stream of `seed`.
pub fn generate(config: &SynthConfig) -> Result<PairedDataset> {
    config.validate()?;
    let (v, fd) = (config.n_voxels, config.feature_dim());
    let mut enc_rng = seeded_rng(config.seed, STREAM_ENCODING);
    let std = 1.0 / (fd as f64).sqrt();
    let shared = gaussian_matrix(v, fd, std, &mut enc_rng);
    let encodings: Vec<Vec<f64>> = (0..config.n_subjects)
        .map(|_| {
            let own = gaussian_matrix(v, fd, std * config.subject_variability, &mut enc_rng);
            shared.iter().zip(own).map(|(a, b)| a + b).collect()
        })
        .collect();
    let mut bg_rng = seeded_rng(config.seed, STREAM_BACKGROUND);
    let background: Vec<Vec<f64>> = (0..config.background_rank)
        .map(|_| smooth(&gaussian_matrix(v, 1, 1.0, &mut bg_rng), config.redundancy_len * 4))
        .collect();

    let per_subject = config.n_classes * config.samples_per_class;
    let n = per_subject * config.n_subjects;
    let size = config.image_size;
    let mut images = Vec::with_capacity(n * size * size * 3);
    let mut signals = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut subjects = Vec::with_capacity(n);
    for i in 0..n {
        let subject = i / per_subject;
        let class = (i % per_subject) % config.n_classes;
        let mut rng = seeded_rng(config.seed, STREAM_SAMPLE + i as u64);
        let img = render(class, size, &mut rng);
        let signal = smooth(&matvec(&encodings[subject], fd, &features(&img)), config.redundancy_len);
        images.extend_from_slice(img.data());
        signals.push(signal);
        labels.push(class);
        subjects.push(subject);
    }

    // noise is scaled relative to the overall signal spread
    let count = (n * v) as f64;
    let mean = signals.iter().flatten().sum::<f64>() / count;
    let spread = (signals.iter().flatten().map(|x| (x - mean).powi(2)).sum::<f64>() / count).sqrt();
    let noise_std = if config.snr.is_finite() { spread / config.snr } else { 0.0 };
    let bg_norm = background
        .first()
        .map(|b| (b.iter().map(|x| x * x).sum::<f64>() / v as f64).sqrt())
        .unwrap_or(1.0);
    let mut voxels = Vec::with_capacity(n * v);
    for (i, signal) in signals.iter().enumerate() {
        let mut rng = seeded_rng(config.seed, STREAM_SAMPLE + (n + i) as u64);
        let coeffs: Vec<f64> = (0..background.len())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let bg_scale = noise_std / (bg_norm * (background.len().max(1) as f64).sqrt());
        for (j, s) in signal.iter().enumerate() {
            let bg: f64 = background.iter().zip(&coeffs).map(|(b, c)| b[j] * c).sum();
            let white: f64 = StandardNormal.sample(&mut rng);
            let x = if noise_std > 0.0 {
                s + noise_std * white + bg_scale * bg
            } else {
                *s
            };
            voxels.push(x);
        }
    }

    let (train, test) = split(config, &labels, &subjects);
    Ok(PairedDataset {
        config: config.clone(),
        voxels: Tensor::new([n, v], voxels)?,
        images: Tensor::new([n, size, size, 3], images)?,
        labels,
        subjects,
        train,
        test,
    })
}

/// Class-balanced split: per subject and class, the last `test_per_class`
/// samples go to test, unless the class is held out entirely.
fn split(config: &SynthConfig, labels: &[usize], subjects: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let first_held = config.n_classes - config.holdout_classes;
    let mut seen = vec![0usize; config.n_classes * config.n_subjects];
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, (&y, &s)) in labels.iter().zip(subjects).enumerate() {
        let slot = &mut seen[s * config.n_classes + y];
        let is_test = y >= first_held || *slot >= config.samples_per_class - config.test_per_class;
        *slot += 1;
        if is_test {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    (train, test)
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    version: u32,
    code_version: String,
    n_samples: usize,
    n_voxels: usize,
    image_size: usize,
    n_classes: usize,
    n_subjects: usize,
    seed: u64,
    /// Generating configuration as TOML text.
    config: String,
    arrays: String,
}

fn index_tensor(v: &[usize]) -> Tensor {
    Tensor::from_fn([v.len()], |i| v[i] as f64)
}

fn tensor_index(t: &Tensor, limit: usize, what: &str, path: &Path) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&x| {
            if x >= 0.0 && x.fract() == 0.0 && (x as usize) < limit {
                Ok(x as usize)
            } else {
                Err(Error::format(path, format!("{what} entry {x} out of range")))
            }
        })
        .collect()
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Samples at `idx` as `(voxels, images, labels)`.
    pub fn select(&self, idx: &[usize]) -> Result<(Tensor, Tensor, Vec<usize>)> {
        Ok((
            gather_rows(&self.voxels, idx)?,
            gather_rows(&self.images, idx)?,
            idx.iter().map(|&i| self.labels[i]).collect(),
        ))
    }

    /// Split indices restricted to one subject.
    pub fn subject_split(&self, subject: usize) -> (Vec<usize>, Vec<usize>) {
        let keep = |v: &[usize]| v.iter().copied().filter(|&i| self.subjects[i] == subject).collect();
        (keep(&self.train), keep(&self.test))
    }

    /// Writes `dataset.json` and the array files into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut ps = ParamStore::new();
        ps.add("voxels", self.voxels.clone())?;
        ps.add("images", self.images.clone())?;
        ps.add("labels", index_tensor(&self.labels))?;
        ps.add("subjects", index_tensor(&self.subjects))?;
        ps.add("train", index_tensor(&self.train))?;
        ps.add("test", index_tensor(&self.test))?;
        let config = toml::to_string(&self.config).map_err(|e| Error::config(e.to_string()))?;
        ps.save(&dir.join("arrays.json"), &CheckpointMeta::new(config.clone()))?;
        let manifest = DatasetManifest {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            code_version: crate::CODE_VERSION.into(),
            n_samples: self.len(),
            n_voxels: self.config.n_voxels,
            image_size: self.config.image_size,
            n_classes: self.config.n_classes,
            n_subjects: self.config.n_subjects,
            seed: self.config.seed,
            config,
            arrays: "arrays.json".into(),
        };
        fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("dataset.json");
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path,
                stage: "synth".into(),
            });
        }
        let m: DatasetManifest =
            serde_json::from_str(&fs::read_to_string(&path)?).map_err(|e| Error::format(&path, e.to_string()))?;
        if m.format != DATASET_FORMAT || m.version != DATASET_VERSION {
            return Err(Error::format(
                &path,
                format!("unsupported dataset {} v{}", m.format, m.version),
            ));
        }
        let config: SynthConfig = toml::from_str(&m.config).map_err(|e| Error::format(&path, e.to_string()))?;
        let (ps, _) = ParamStore::load(&dir.join(&m.arrays))?;
        let get = |name: &str| {
            ps.id(name)
                .map(|id| ps.get(id).clone().with_requires_grad(false))
                .ok_or_else(|| Error::format(&path, format!("array {name} missing")))
        };
        let voxels = get("voxels")?;
        let images = get("images")?;
        let n = m.n_samples;
        if voxels.shape() != [n, m.n_voxels] || images.shape() != [n, m.image_size, m.image_size, 3] {
            return Err(Error::format(&path, "array shapes disagree with the manifest"));
        }
        let labels = tensor_index(&get("labels")?, m.n_classes, "label", &path)?;
        let subjects = tensor_index(&get("subjects")?, m.n_subjects, "subject", &path)?;
        let train = tensor_index(&get("train")?, n, "train index", &path)?;
        let test = tensor_index(&get("test")?, n, "test index", &path)?;
        if labels.len() != n || subjects.len() != n {
            return Err(Error::format(&path, "label count disagrees with the manifest"));
        }
        if config.n_classes != m.n_classes {
            return Err(Error::format(&path, "class count disagrees with the config"));
        }
        Ok(Self {
            config,
            voxels,
            images,
            labels,
            subjects,
            train,
            test,
        })
    }
}

/// Solves `A x = B` for symmetric positive definite `A` (`n × n`) with `m`
/// right-hand sides, in place of `b`.
fn cholesky_solve(a: &mut [f64], n: usize, b: &mut [f64], m: usize) -> Result<()> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) {
            return Err(Error::NonFinite {
                op: "ridge system is not positive definite".into(),
            });
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    for c in 0..m {
        for i in 0..n {
            let mut s = b[i * m + c];
            for k in 0..i {
                s -= a[i * n + k] * b[k * m + c];
            }
            b[i * m + c] = s / a[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i * m + c];
            for k in i + 1..n {
                s -= a[k * n + i] * b[k * m + c];
            }
            b[i * m + c] = s / a[i * n + i];
        }
    }
    Ok(())
}

/// Kernel ridge regression from voxels to one-hot class targets; returns the
/// test accuracy of the argmax prediction.
pub fn ridge_accuracy(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    n_classes: usize,
    lambda: f64,
) -> Result<f64> {
    let (n, d) = (train_x.shape()[0], train_x.shape()[1]);
    if n == 0 || test_y.is_empty() || test_x.shape()[1] != d {
        return Err(Error::contract("ridge baseline needs non-empty, equally wide inputs"));
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| train_x.data()[i * d + j]).sum::<f64>() / n as f64)
        .collect();
    let centred = |t: &Tensor, i: usize| -> Vec<f64> { t.row(i).iter().zip(&mean).map(|(a, b)| a - b).collect() };
    let xs: Vec<Vec<f64>> = (0..n).map(|i| centred(train_x, i)).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let k = dot(&xs[i], &xs[j]);
            gram[i * n + j] = k;
            gram[j * n + i] = k;
        }
        gram[i * n + i] += lambda;
    }
    let prior = 1.0 / n_classes as f64;
    let mut alpha: Vec<f64> = (0..n * n_classes)
        .map(|i| f64::from(u8::from(train_y[i / n_classes] == i % n_classes)) - prior)
        .collect();
    cholesky_solve(&mut gram, n, &mut alpha, n_classes)?;
    let mut correct = 0;
    for (t, &y) in test_y.iter().enumerate() {
        let x = centred(test_x, t);
        let mut scores = vec![0.0; n_classes];
        for (i, xi) in xs.iter().enumerate() {
            let k = dot(&x, xi);
            for (c, s) in scores.iter_mut().enumerate() {
                *s += k * alpha[i * n_classes + c];
            }
        }
        correct += usize::from(crate::eval::argmax(&scores) == y);
    }
    Ok(correct as f64 / test_y.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            n_voxels: 256,
            samples_per_class: 12,
            test_per_class: 4,
            n_subjects: 2,
            seed,
            ..SynthConfig::default()
        }
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    fn lag_correlation(ds: &PairedDataset, lag: usize) -> f64 {
        let v = ds.config.n_voxels;
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for i in 0..ds.len() {
            let row = ds.voxels.row(i);
            for j in 0..v - lag {
                a.push(row[j]);
                b.push(row[j + lag]);
            }
        }
        pearson(&a, &b)
    }

    #[test]
    fn rejects_bad_sizes() {
        for cfg in [
            SynthConfig { n_voxels: 1000, ..small(0) },
            SynthConfig { image_size: 12, ..small(0) },
            SynthConfig { n_classes: 11, ..small(0) },
            SynthConfig { snr: 0.0, ..small(0) },
            SynthConfig { test_per_class: 13, ..small(0) },
            SynthConfig { holdout_classes: 10, ..small(0) },
        ] {
            assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn noiseless_single_subject_is_linearly_decodable() {
        let cfg = SynthConfig {
            snr: f64::INFINITY,
            n_subjects: 1,
            n_voxels: 1024,
            ..small(1)
        };
        let ds = generate(&cfg).unwrap();
        let again = generate(&cfg).unwrap();
        assert_eq!(ds, again);
        let (xtr, _, ytr) = ds.select(&ds.train).unwrap();
        let (xte, _, yte) = ds.select(&ds.test).unwrap();
        let acc = ridge_accuracy(&xtr, &ytr, &xte, &yte, 10, 1.0).unwrap();
        assert!(acc >= 0.95, "{acc}");
    }

    #[test]
    fn neighbouring_voxels_are_redundant() {
        let ds = generate(&small(2)).unwrap();
        let near = lag_correlation(&ds, 1);
        let far = lag_correlation(&ds, ds.config.redundancy_len);
        let farther = lag_correlation(&ds, 3 * ds.config.redundancy_len);
        assert!(near > far && far > farther, "{near} {far} {farther}");
    }

    #[test]
    fn subjects_differ_yet_share_a_decoder() {
        let cfg = SynthConfig {
            snr: f64::INFINITY,
            n_voxels: 1024,
            ..small(3)
        };
        let ds = generate(&cfg).unwrap();
        let img = render(4, 32, &mut seeded_rng(9, 9));
        let f = features(&img);
        let mut enc_rng = seeded_rng(cfg.seed, STREAM_ENCODING);
        let fd = cfg.feature_dim();
        let std = 1.0 / (fd as f64).sqrt();
        let shared = gaussian_matrix(cfg.n_voxels, fd, std, &mut enc_rng);
        let resp: Vec<Vec<f64>> = (0..2)
            .map(|_| {
                let own = gaussian_matrix(cfg.n_voxels, fd, std * cfg.subject_variability, &mut enc_rng);
                let w: Vec<f64> = shared.iter().zip(own).map(|(a, b)| a + b).collect();
                smooth(&matvec(&w, fd, &f), cfg.redundancy_len)
            })
            .collect();
        let cos = resp[0].iter().zip(&resp[1]).map(|(a, b)| a * b).sum::<f64>()
            / (resp[0].iter().map(|a| a * a).sum::<f64>() * resp[1].iter().map(|b| b * b).sum::<f64>()).sqrt();
        assert!(cos < 0.99, "{cos}");

        // decoder fitted on subject 0 transfers above chance to subject 1
        let (tr0, _) = ds.subject_split(0);
        let (_, te1) = ds.subject_split(1);
        let (xtr, _, ytr) = ds.select(&tr0).unwrap();
        let (xte, _, yte) = ds.select(&te1).unwrap();
        let acc = ridge_accuracy(&xtr, &ytr, &xte, &yte, 10, 1e-2).unwrap();
        assert!(acc > 0.2, "{acc}");
    }

    #[test]
    fn ridge_baseline_is_above_chance_but_imperfect() {
        let cfg = SynthConfig {
            n_subjects: 1,
            samples_per_class: 40,
            test_per_class: 10,
            ..SynthConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let (xtr, _, ytr) = ds.select(&ds.train).unwrap();
        let (xte, _, yte) = ds.select(&ds.test).unwrap();
        let acc = ridge_accuracy(&xtr, &ytr, &xte, &yte, 10, 10.0).unwrap();
        assert!(acc > 0.2 && acc < 1.0, "{acc}");
    }

    #[test]
    fn splits_are_balanced_and_holdout_disjoint() {
        let ds = generate(&small(4)).unwrap();
        for c in 0..10 {
            assert_eq!(ds.test.iter().filter(|&&i| ds.labels[i] == c).count(), 8);
            assert_eq!(ds.train.iter().filter(|&&i| ds.labels[i] == c).count(), 16);
        }
        let held = generate(&SynthConfig {
            holdout_classes: 3,
            ..small(4)
        })
        .unwrap();
        let train: std::collections::BTreeSet<_> = held.train.iter().map(|&i| held.labels[i]).collect();
        let test: std::collections::BTreeSet<_> = held.test.iter().map(|&i| held.labels[i]).collect();
        assert!(train.is_disjoint(&test.iter().copied().filter(|&c| c >= 7).collect()));
        assert!(train.iter().all(|&c| c < 7));
        assert_eq!(held.train.len() + held.test.len(), held.len());
    }

    #[test]
    fn save_load_round_trip_and_truncation() {
        let ds = generate(&small(5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = PairedDataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert!(back.images.data().iter().zip(ds.images.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(back.voxels.data().iter().zip(ds.voxels.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("dataset.json")).unwrap()).unwrap();
        assert_eq!(manifest["n_classes"], 10);

        let blob = dir.path().join("arrays.bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 9]).unwrap();
        assert!(PairedDataset::load(dir.path()).is_err());

        let text = fs::read_to_string(dir.path().join("dataset.json")).unwrap();
        fs::write(dir.path().join("dataset.json"), text.replace("\"version\": 1", "\"version\": 99")).unwrap();
        assert!(matches!(PairedDataset::load(dir.path()), Err(Error::Format { .. })));
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(PairedDataset::load(empty.path()), Err(Error::MissingArtifact { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn generation_is_seed_determined(seed in 0u64..1000) {
            let cfg = SynthConfig {
                n_voxels: 64,
                image_size: 8,
                samples_per_class: 2,
                test_per_class: 1,
                n_subjects: 1,
                seed,
                ..SynthConfig::default()
            };
            let a = generate(&cfg).unwrap();
            prop_assert_eq!(&a, &generate(&cfg).unwrap());
            prop_assert!(a.voxels.is_finite());
            prop_assert!(a.images.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }

        #[test]
        fn smoothing_preserves_length_and_constants(width in 1usize..12, n in 40usize..80) {
            let out = smooth(&vec![1.0; n], width);
            prop_assert_eq!(out.len(), n);
            let mid = out[n / 2];
            prop_assert!(out.iter().all(|&x| x <= mid + 1e-12));
        }
    }
}
