//! The n-way top-k semantic classification metric and the small image
//! classifier that serves as its judge.
//!
//! For every trial the ground-truth class (the classifier's argmax on the
//! ground-truth image) competes with `n − 1` distinct random distractor
//! classes. The trial succeeds when the ground-truth class ranks within the
//! top `k` of the generated image's probabilities restricted to those
//! candidates.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::dcmae::ensure_finite;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear};
use crate::optim::{AdamW, AdamWConfig, WarmupCosine};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::xmodal::gather_rows;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub image_size: usize,
    pub channels: usize,
    pub n_classes: usize,
    pub width: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            n_classes: 10,
            width: 16,
        }
    }
}

/// Three stride-2 convolutions, global average pooling and a softmax head.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub config: ClassifierConfig,
    convs: [Conv2d; 3],
    head: Linear,
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, config: &ClassifierConfig, rng: &mut R) -> Result<Self> {
        if config.n_classes < 2 {
            return Err(Error::config(format!(
                "a classifier needs at least 2 classes, got {}",
                config.n_classes
            )));
        }
        let (c, w) = (config.channels, config.width);
        Ok(Self {
            config: config.clone(),
            convs: [
                Conv2d::new(ps, "clf.conv0", c, w, 3, 2, 1, rng)?,
                Conv2d::new(ps, "clf.conv1", w, 2 * w, 3, 2, 1, rng)?,
                Conv2d::new(ps, "clf.conv2", 2 * w, 2 * w, 3, 2, 1, rng)?,
            ],
            head: Linear::new(ps, "clf.head", 2 * w, config.n_classes, rng)?,
        })
    }

    /// Class logits for `[B, H, W, C]` images.
    pub fn logits<'g>(&self, ps: &ParamStore, images: Var<'g>) -> Result<Var<'g>> {
        let mut x = images;
        for conv in &self.convs {
            x = conv.forward(ps, x)?.silu()?;
        }
        let s = x.shape();
        let pooled = x.reshape([s[0], s[1] * s[2], s[3]])?.mean_axis1()?;
        self.head.forward(ps, pooled)
    }

    /// Probability rows `[B, n_classes]`.
    pub fn predict(&self, ps: &ParamStore, images: &Tensor) -> Result<Tensor> {
        let g = Graph::inference();
        Ok(self.logits(ps, g.constant(images))?.softmax()?.value())
    }

    /// Trains with cross-entropy on labeled images; returns per-step losses.
    #[allow(clippy::too_many_arguments)]
    pub fn train<R: Rng + ?Sized>(
        &self,
        ps: &mut ParamStore,
        images: &Tensor,
        labels: &[usize],
        steps: usize,
        batch: usize,
        lr: f64,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let c = self.config.n_classes;
        let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
        if distinct.len() < 2 {
            return Err(Error::contract("classifier training needs at least 2 distinct classes"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::contract(format!("label {bad} outside [0, {c})")));
        }
        let mut opt = AdamW::new(AdamWConfig::default(), ps.ids_with_prefix("clf.").collect());
        let schedule = WarmupCosine::new(lr, steps as u64, 0.05);
        let mut losses = Vec::with_capacity(steps);
        for step in 0..steps {
            let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..labels.len())).collect();
            let x = gather_rows(images, &idx)?;
            let onehot = Tensor::from_fn([batch, c], |i| f64::from(u8::from(labels[idx[i / c]] == i % c)));
            let g = Graph::new();
            let loss = self
                .logits(ps, g.constant(&x))?
                .log_softmax()?
                .mul_const(&onehot)?
                .sum()?
                .scale(-1.0 / batch as f64)?;
            let value = loss.item()?;
            ensure_finite("classifier loss", &[("L", value)])?;
            g.backward_into(loss, ps)?;
            opt.step(ps, schedule.lr(step as u64))?;
            ps.zero_grad();
            losses.push(value);
        }
        Ok(losses)
    }

    /// Fraction of `images` whose argmax matches `labels`.
    pub fn accuracy(&self, ps: &ParamStore, images: &Tensor, labels: &[usize]) -> Result<f64> {
        let mut correct = 0usize;
        for start in (0..labels.len()).step_by(64) {
            let idx: Vec<usize> = (start..(start + 64).min(labels.len())).collect();
            let p = self.predict(ps, &gather_rows(images, &idx)?)?;
            for (row, &i) in idx.iter().enumerate() {
                correct += usize::from(argmax(p.row(row)) == labels[i]);
            }
        }
        Ok(correct as f64 / labels.len() as f64)
    }
}

/// Index of the first maximum.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn check_nk(classes: usize, n: usize, k: usize) -> Result<()> {
    if n < 1 || n > classes {
        return Err(Error::config(format!("n = {n} must be in [1, {classes}]")));
    }
    if k < 1 || k > n {
        return Err(Error::config(format!("k = {k} must be in [1, n = {n}]")));
    }
    Ok(())
}

/// One trial: does `gt` rank within the top `k` of `probs` among itself and
/// `n − 1` random distractors? Ties are broken uniformly at random.
pub fn topk_trial<R: Rng + ?Sized>(probs: &[f64], gt: usize, n: usize, k: usize, rng: &mut R) -> Result<bool> {
    let c = probs.len();
    check_nk(c, n, k)?;
    if gt >= c {
        return Err(Error::contract(format!("class {gt} outside [0, {c})")));
    }
    let mut candidates: Vec<usize> = sample(rng, c - 1, n - 1)
        .into_iter()
        .map(|j| if j >= gt { j + 1 } else { j })
        .collect();
    candidates.push(gt);
    candidates.shuffle(rng);
    candidates.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    Ok(candidates[..k].contains(&gt))
}

/// Outcome of repeated trials for one generated / ground-truth pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub n: usize,
    pub k: usize,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
}

/// `trials` independent trials with ground truth `gt`.
pub fn nway_topk_probs<R: Rng + ?Sized>(
    generated: &[f64],
    gt: usize,
    n: usize,
    k: usize,
    trials: usize,
    rng: &mut R,
) -> Result<TrialSummary> {
    if trials == 0 {
        return Err(Error::config("trial count must be positive"));
    }
    let mut successes = 0;
    for _ in 0..trials {
        successes += usize::from(topk_trial(generated, gt, n, k, rng)?);
    }
    Ok(TrialSummary {
        n,
        k,
        trials,
        successes,
        success_rate: successes as f64 / trials as f64,
    })
}

/// The metric on one image pair; the ground-truth class is the
/// classifier's argmax on `ground_truth` unless `label` is given.
#[allow(clippy::too_many_arguments)]
pub fn nway_topk<R: Rng + ?Sized>(
    generated: &Tensor,
    ground_truth: &Tensor,
    classifier: &Classifier,
    ps: &ParamStore,
    n: usize,
    k: usize,
    trials: usize,
    label: Option<usize>,
    rng: &mut R,
) -> Result<TrialSummary> {
    check_nk(classifier.config.n_classes, n, k)?;
    let batch = |t: &Tensor| {
        let mut s = vec![1];
        s.extend_from_slice(t.shape());
        t.reshape(s)
    };
    let p_gen = classifier.predict(ps, &batch(generated)?)?;
    let gt = match label {
        Some(y) => y,
        None => argmax(classifier.predict(ps, &batch(ground_truth)?)?.data()),
    };
    nway_topk_probs(p_gen.data(), gt, n, k, trials, rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub index: usize,
    pub gt_class: usize,
    pub successes: usize,
    pub success_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub k: usize,
    pub trials: usize,
    pub seed: u64,
    pub per_image: Vec<ImageResult>,
    pub mean_sr: f64,
}

/// Evaluates every pair, with one random stream per pair.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_pairs(
    generated_probs: &Tensor,
    gt_classes: &[usize],
    n: usize,
    k: usize,
    trials: usize,
    seed: u64,
) -> Result<EvalReport> {
    let c = generated_probs.shape()[1];
    check_nk(c, n, k)?;
    if generated_probs.shape()[0] != gt_classes.len() || gt_classes.is_empty() {
        return Err(Error::contract(format!(
            "{} generated images for {} ground-truth images",
            generated_probs.shape()[0],
            gt_classes.len()
        )));
    }
    let mut per_image = Vec::with_capacity(gt_classes.len());
    for (i, &gt) in gt_classes.iter().enumerate() {
        let mut rng = crate::seeded_rng(seed, i as u64);
        let s = nway_topk_probs(generated_probs.row(i), gt, n, k, trials, &mut rng)?;
        per_image.push(ImageResult {
            index: i,
            gt_class: gt,
            successes: s.successes,
            success_rate: s.success_rate,
        });
    }
    let mean_sr = per_image.iter().map(|r| r.success_rate).sum::<f64>() / per_image.len() as f64;
    Ok(EvalReport {
        n,
        k,
        trials,
        seed,
        per_image,
        mean_sr,
    })
}

impl EvalReport {
    pub fn write(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        std::fs::write(json_path, serde_json::to_string_pretty(self)?)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(csv_path)?);
        writeln!(f, "index,gt_class,successes,trials,success_rate")?;
        for r in &self.per_image {
            writeln!(f, "{},{},{},{},{}", r.index, r.gt_class, r.successes, self.trials, r.success_rate)?;
        }
        writeln!(f, "mean,,,{},{}", self.trials, self.mean_sr)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    #[test]
    fn rejects_bad_arguments() {
        let p = vec![0.1; 10];
        let mut r = seeded_rng(1, 0);
        assert!(topk_trial(&p, 0, 11, 1, &mut r).is_err());
        assert!(topk_trial(&p, 0, 5, 6, &mut r).is_err());
        let mut ps = ParamStore::new();
        let one = ClassifierConfig {
            n_classes: 1,
            ..ClassifierConfig::default()
        };
        assert!(Classifier::new(&mut ps, &one, &mut r).is_err());
    }

    #[test]
    fn peaked_probabilities_always_succeed() {
        let mut p = vec![0.01; 50];
        p[7] = 0.51;
        let s = nway_topk_probs(&p, 7, 50, 1, 500, &mut seeded_rng(2, 0)).unwrap();
        assert_eq!(s.success_rate, 1.0);
    }

    #[test]
    fn uniform_classifier_hits_k_over_n() {
        for (n, k) in [(10, 1), (50, 1), (50, 5), (2, 1)] {
            let p = vec![1.0 / 50.0; 50];
            let trials = 10_000;
            let s = nway_topk_probs(&p, 3, n, k, trials, &mut seeded_rng(3, n as u64)).unwrap();
            let expect = k as f64 / n as f64;
            let sigma = (expect * (1.0 - expect) / trials as f64).sqrt();
            assert!((s.success_rate - expect).abs() <= 3.0 * sigma, "n={n} k={k}: {}", s.success_rate);
            assert_eq!(s.success_rate, s.successes as f64 / trials as f64);
        }
    }

    #[test]
    fn success_rate_monotone_in_k() {
        let p: Vec<f64> = (0..20).map(|i| ((i * 7) % 20) as f64).collect();
        let mut last = 0.0;
        for k in 1..=10 {
            let s = nway_topk_probs(&p, 4, 10, k, 2000, &mut seeded_rng(4, 0)).unwrap();
            assert!(s.success_rate >= last);
            last = s.success_rate;
        }
        assert_eq!(last, 1.0);
    }

    #[test]
    fn two_way_equals_pairwise_win_rate() {
        let p = [0.3, 0.1, 0.2, 0.2, 0.05, 0.15];
        let gt = 2;
        // direct pairwise: beats 3 distractors, ties 1, loses to 1
        let expect = (3.0 + 0.5) / 5.0;
        let s = nway_topk_probs(&p, gt, 2, 1, 20_000, &mut seeded_rng(5, 0)).unwrap();
        let sigma = (expect * (1.0 - expect) / 20_000.0f64).sqrt();
        assert!((s.success_rate - expect).abs() < 3.0 * sigma, "{}", s.success_rate);
    }

    #[test]
    fn identical_images_score_one() {
        let mut ps = ParamStore::new();
        let cfg = ClassifierConfig {
            image_size: 8,
            ..ClassifierConfig::default()
        };
        let clf = Classifier::new(&mut ps, &cfg, &mut seeded_rng(6, 0)).unwrap();
        let mut r = seeded_rng(7, 0);
        for _ in 0..5 {
            let img = Tensor::randn([8, 8, 3], 1.0, &mut r);
            for (n, k) in [(10, 1), (5, 2), (2, 1)] {
                let s = nway_topk(&img, &img, &clf, &ps, n, k, 200, None, &mut r).unwrap();
                assert_eq!(s.success_rate, 1.0);
            }
        }
        let p = clf.predict(&ps, &Tensor::randn([4, 8, 8, 3], 1.0, &mut r)).unwrap();
        for i in 0..4 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(p.row(i).iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn classifier_learns_color_classes() {
        let mut ps = ParamStore::new();
        let cfg = ClassifierConfig {
            image_size: 8,
            n_classes: 3,
            width: 8,
            ..ClassifierConfig::default()
        };
        let clf = Classifier::new(&mut ps, &cfg, &mut seeded_rng(8, 0)).unwrap();
        let mut r = seeded_rng(9, 0);
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let noise = Tensor::randn([60, 8, 8, 3], 0.1, &mut r);
        let images = Tensor::from_fn([60, 8, 8, 3], |i| {
            let y = labels[i / 192];
            f64::from(u8::from(i % 3 == y)) + noise.data()[i]
        });
        clf.train(&mut ps, &images, &labels, 150, 16, 1e-2, &mut r).unwrap();
        assert!(clf.accuracy(&ps, &images, &labels).unwrap() >= 0.95);
        assert!(clf.train(&mut ps, &images, &[0; 60], 1, 4, 1e-2, &mut r).is_err());
    }

    #[test]
    fn report_aggregates() {
        let probs = Tensor::new([2, 3], vec![0.8, 0.1, 0.1, 0.2, 0.2, 0.6]).unwrap();
        let rep = evaluate_pairs(&probs, &[0, 1], 3, 1, 100, 11).unwrap();
        assert_eq!(rep.per_image[0].success_rate, 1.0);
        assert_eq!(rep.per_image[1].success_rate, 0.0);
        assert_eq!(rep.mean_sr, 0.5);
        assert_eq!(rep, evaluate_pairs(&probs, &[0, 1], 3, 1, 100, 11).unwrap());
        let dir = tempfile::tempdir().unwrap();
        rep.write(&dir.path().join("r.json"), &dir.path().join("r.csv")).unwrap();
        let back: EvalReport =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
        assert_eq!(back, rep);
    }
}
