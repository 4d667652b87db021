//! Stage orchestration: resolved run configuration, presets, file-based
//! stage boundaries, metrics and the end-to-end run.
//!
//! A run directory holds one sub-directory per stage. Stages communicate
//! only through the files they write there, so any stage can be rerun from
//! its predecessors' artifacts.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dcmae::{self, phase1_step, DcMaeConfig, FmriAutoencoder, DECODER_PREFIX, ENCODER_PREFIX};
use crate::diffusion::{
    conditioning_gap, ddpm_sample, finetune_step, finetune_trainable, plms_sample, pretrain_step, CondDenoiser,
    DenoiserConfig, FinetuneContext, LatentAe, LatentAeConfig, NoiseSchedule, ScheduleConfig, DENOISER_PREFIX,
    LATENT_PREFIX,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_pairs, argmax, Classifier, ClassifierConfig, EvalReport};
use crate::optim::{AdamW, AdamWConfig, WarmupCosine};
use crate::params::{CheckpointMeta, ParamStore};
use crate::synth::{generate as synthesize, PairedDataset, SynthConfig};
use crate::tensor::Tensor;
use crate::xmodal::{
    self, gather_rows, pretrain_image_mae, ImageMaeConfig, XModalConfig, XModalModel,
    CROSS_PREFIX, IMAGE_DECODER_PREFIX, IMAGE_ENCODER_PREFIX,
};
use crate::seeded_rng;

/// Optimisation settings of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 16,
            lr: 1e-3,
            warmup_frac: 0.05,
            weight_decay: 0.01,
        }
    }
}

impl TrainConfig {
    fn with(steps: usize, batch: usize, lr: f64) -> Self {
        Self {
            steps,
            batch,
            lr,
            ..Self::default()
        }
    }

    fn optimizer(&self, trainable: Vec<crate::params::ParamId>) -> AdamW {
        AdamW::new(
            AdamWConfig {
                weight_decay: self.weight_decay,
                ..AdamWConfig::default()
            },
            trainable,
        )
    }

    fn schedule(&self) -> WarmupCosine {
        WarmupCosine::new(self.lr, self.steps as u64, self.warmup_frac)
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.batch == 0 || !(self.lr > 0.0) || !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::config(format!(
                "[{name}] needs batch > 0, lr > 0 and warmup_frac in [0, 1)"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImagePretrainConfig {
    pub mask_ratio: f64,
    pub train: TrainConfig,
}

impl Default for ImagePretrainConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.5,
            train: TrainConfig::with(400, 16, 1e-3),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    Plms,
    Ddpm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub sampler: Sampler,
    pub steps: usize,
    /// Write PNG files next to the generated tensor.
    pub write_png: bool,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            sampler: Sampler::Plms,
            steps: 25,
            write_png: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n: usize,
    pub k: usize,
    pub trials: usize,
    /// Use dataset labels as ground truth instead of the classifier's
    /// prediction on the ground-truth image.
    pub use_dataset_labels: bool,
    pub classifier_train: TrainConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n: 10,
            k: 1,
            trials: 100,
            use_dataset_labels: false,
            classifier_train: TrainConfig::with(400, 32, 3e-3),
        }
    }
}

/// Every hyperparameter consumed by any stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    /// Subject whose paired data drives the paired stages.
    pub subject: usize,
    pub synth: SynthConfig,
    pub fmri: DcMaeConfig,
    pub pretrain: TrainConfig,
    pub image: ImageMaeConfig,
    pub image_pretrain: ImagePretrainConfig,
    pub xmodal: XModalConfig,
    pub xtune: TrainConfig,
    pub latent: LatentAeConfig,
    pub latent_train: TrainConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub ldm_pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub generate: GenerateConfig,
    pub classifier: ClassifierConfig,
    pub evaluate: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "desk-default".into(),
            seed: 0,
            subject: 0,
            synth: SynthConfig {
                snr: 2.0,
                samples_per_class: 100,
                ..SynthConfig::default()
            },
            fmri: DcMaeConfig::default(),
            pretrain: TrainConfig::with(1200, 16, 1e-3),
            image: ImageMaeConfig::default(),
            image_pretrain: ImagePretrainConfig::default(),
            xmodal: XModalConfig::default(),
            xtune: TrainConfig::with(400, 16, 5e-4),
            latent: LatentAeConfig::default(),
            latent_train: TrainConfig {
                weight_decay: 0.0,
                ..TrainConfig::with(400, 16, 2e-3)
            },
            denoiser: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
            ldm_pretrain: TrainConfig::with(3000, 32, 1e-3),
            finetune: TrainConfig::with(3000, 16, 1e-3),
            generate: GenerateConfig::default(),
            classifier: ClassifierConfig::default(),
            evaluate: EvalConfig::default(),
        }
    }
}

pub const PRESETS: [&str; 7] = [
    "desk-default",
    "god-s145",
    "god-s23",
    "table2-id6",
    "table2-best-mask",
    "table2-decoder6",
    "tiny",
];

impl RunConfig {
    /// Resolves a named preset. Paper-derived presets start from
    /// `desk-default` and override only the fields they name.
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = Self {
            preset: name.into(),
            ..Self::default()
        };
        match name {
            "desk-default" => {}
            "god-s145" | "god-s23" => {
                let p = dcmae::preset(name).expect("known preset");
                cfg.fmri.gamma_c = p.gamma_c;
                cfg.fmri.gamma_s = p.gamma_s;
                cfg.fmri.mask_ratio = p.mask_ratio;
            }
            "table2-id6" | "table2-best-mask" => {
                let p = xmodal::preset(name).expect("known preset");
                cfg.xmodal.gamma_f = p.gamma_f;
                cfg.xmodal.gamma_i = p.gamma_i;
                cfg.xmodal.fmri_mask_ratio = p.fmri_mask_ratio;
                cfg.xmodal.image_mask_ratio = p.image_mask_ratio;
            }
            "table2-decoder6" => {
                // decoders must stay shallower than their encoders
                cfg.fmri.depth_dec = 6;
                cfg.fmri.depth_enc = 8;
                cfg.image.depth_dec = 6;
                cfg.image.depth_enc = 8;
            }
            "tiny" => cfg = Self::tiny(),
            other => {
                return Err(Error::config(format!(
                    "unknown preset {other:?}; known: {}",
                    PRESETS.join(", ")
                )))
            }
        }
        Ok(cfg)
    }

    /// A seconds-scale configuration for smoke tests.
    fn tiny() -> Self {
        let mut c = Self {
            preset: "tiny".into(),
            ..Self::default()
        };
        c.synth = SynthConfig {
            n_voxels: 64,
            image_size: 8,
            n_classes: 4,
            n_subjects: 2,
            redundancy_len: 2,
            samples_per_class: 6,
            test_per_class: 2,
            patch_size: 4,
            ..SynthConfig::default()
        };
        c.fmri = DcMaeConfig {
            n_voxels: 64,
            patch: 4,
            dim: 8,
            heads: 2,
            depth_enc: 2,
            depth_dec: 1,
            dec_dim: 8,
            ..DcMaeConfig::default()
        };
        c.image = ImageMaeConfig {
            image_size: 8,
            patch: 2,
            dim: 8,
            heads: 2,
            depth_enc: 2,
            depth_dec: 1,
            dec_dim: 8,
            ..ImageMaeConfig::default()
        };
        c.latent = LatentAeConfig {
            image_size: 8,
            hidden: 4,
            latent_channels: 2,
            ..LatentAeConfig::default()
        };
        c.denoiser = DenoiserConfig {
            latent_size: 2,
            latent_channels: 2,
            base_channels: 4,
            time_dim: 8,
            freq_dim: 8,
            cond_dim: 8,
            n_classes: 4,
            diffusion_steps: 100,
        };
        c.schedule.steps = 100;
        c.classifier = ClassifierConfig {
            image_size: 8,
            n_classes: 4,
            width: 4,
            ..ClassifierConfig::default()
        };
        for t in [
            &mut c.pretrain,
            &mut c.image_pretrain.train,
            &mut c.xtune,
            &mut c.latent_train,
            &mut c.ldm_pretrain,
            &mut c.finetune,
            &mut c.evaluate.classifier_train,
        ] {
            t.steps = 4;
            t.batch = 4;
        }
        c.generate.steps = 5;
        c.evaluate.n = 4;
        c.evaluate.trials = 10;
        c
    }

    /// Parses TOML text; missing keys take `desk-default` values.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Canonical text: TOML with keys in sorted order at every level.
    pub fn dump(&self) -> String {
        let value = toml::Value::try_from(self).expect("config is representable as TOML");
        toml::to_string(&value).expect("TOML value serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.fmri.validate()?;
        self.image.validate()?;
        self.xmodal.validate()?;
        for (name, t) in [
            ("pretrain", &self.pretrain),
            ("image_pretrain", &self.image_pretrain.train),
            ("xtune", &self.xtune),
            ("latent_train", &self.latent_train),
            ("ldm_pretrain", &self.ldm_pretrain),
            ("finetune", &self.finetune),
            ("evaluate", &self.evaluate.classifier_train),
        ] {
            t.validate(name)?;
        }
        let mismatch = |what: &str, a: usize, b: usize| {
            if a == b {
                Ok(())
            } else {
                Err(Error::config(format!("{what}: {a} vs {b}")))
            }
        };
        let s = &self.synth;
        mismatch("fmri.n_voxels vs synth.n_voxels", self.fmri.n_voxels, s.n_voxels)?;
        mismatch("fmri.patch vs synth.patch_size", self.fmri.patch, s.patch_size)?;
        mismatch("image.image_size vs synth.image_size", self.image.image_size, s.image_size)?;
        mismatch("latent.image_size vs synth.image_size", self.latent.image_size, s.image_size)?;
        mismatch("classifier.image_size vs synth.image_size", self.classifier.image_size, s.image_size)?;
        mismatch("image tokens vs fmri tokens", self.image.num_tokens(), self.fmri.num_tokens())?;
        mismatch("denoiser.latent_size", self.denoiser.latent_size, self.latent.latent_size())?;
        mismatch("denoiser.latent_channels", self.denoiser.latent_channels, self.latent.latent_channels)?;
        mismatch("denoiser.cond_dim vs fmri.dim", self.denoiser.cond_dim, self.fmri.dim)?;
        mismatch("denoiser.n_classes", self.denoiser.n_classes, s.n_classes)?;
        mismatch("classifier.n_classes", self.classifier.n_classes, s.n_classes)?;
        mismatch("denoiser.diffusion_steps vs schedule.steps", self.denoiser.diffusion_steps, self.schedule.steps)?;
        if self.subject >= s.n_subjects {
            return Err(Error::config(format!("subject {} of {}", self.subject, s.n_subjects)));
        }
        if self.generate.steps == 0 || self.generate.steps > self.schedule.steps {
            return Err(Error::config("generate.steps must be in [1, schedule.steps]"));
        }
        if self.evaluate.n > s.n_classes || self.evaluate.k == 0 || self.evaluate.k > self.evaluate.n {
            return Err(Error::config("evaluate needs 1 ≤ k ≤ n ≤ number of classes"));
        }
        if self.evaluate.trials == 0 {
            return Err(Error::config("evaluate.trials must be positive"));
        }
        Ok(())
    }

    /// The generator configuration with the run seed applied.
    fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.synth.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    Pretrain,
    Xtune,
    TrainLatentAe,
    PretrainLdm,
    FinetuneLdm,
    Generate,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Synth,
        Stage::Pretrain,
        Stage::Xtune,
        Stage::TrainLatentAe,
        Stage::PretrainLdm,
        Stage::FinetuneLdm,
        Stage::Generate,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Pretrain => "pretrain",
            Stage::Xtune => "xtune",
            Stage::TrainLatentAe => "train-latent-ae",
            Stage::PretrainLdm => "pretrain-ldm",
            Stage::FinetuneLdm => "finetune-ldm",
            Stage::Generate => "generate",
            Stage::Evaluate => "evaluate",
        }
    }

    /// Random stream reserved for the stage.
    fn stream(self) -> u64 {
        100 + self as u64
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config(format!("unknown stage {s:?}")))
    }
}

/// Scalar outcomes of one stage.
pub type StageMetrics = BTreeMap<String, f64>;

fn stage_dir(run: &Path, stage: Stage) -> PathBuf {
    run.join(stage.name())
}

fn require(path: PathBuf, stage: Stage) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact {
            path,
            stage: stage.name().into(),
        })
    }
}

fn checkpoint(run: &Path, stage: Stage, file: &str) -> Result<PathBuf> {
    require(stage_dir(run, stage).join(file), stage)
}

/// Copies every parameter of `ps` under `prefixes` from the checkpoint.
fn load_into(ps: &mut ParamStore, path: &Path, prefixes: &[&str]) -> Result<()> {
    let (saved, _) = ParamStore::load(path)?;
    for prefix in prefixes {
        for id in ps.ids_with_prefix(prefix).collect::<Vec<_>>() {
            let name = ps.name(id).to_string();
            let src = saved
                .id(&name)
                .ok_or_else(|| Error::format(path, format!("parameter {name} missing")))?;
            if saved.get(src).shape() != ps.get(id).shape() {
                return Err(Error::format(path, format!("parameter {name} has the wrong shape")));
            }
            ps.get_mut(id).data_mut().copy_from_slice(saved.get(src).data());
        }
    }
    Ok(())
}

fn save_subset(ps: &ParamStore, path: &Path, prefixes: &[&str], cfg: &RunConfig) -> Result<()> {
    let mut out = ParamStore::new();
    for prefix in prefixes {
        let part = ps.subset(prefix)?;
        for id in part.ids() {
            out.add(part.name(id), part.get(id).clone())?;
        }
    }
    out.save(path, &CheckpointMeta::new(cfg.dump()))
}

fn write_losses(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    writeln!(f, "step,{}", header.join(","))?;
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{i},{}", cells.join(","))?;
    }
    Ok(())
}

fn loss_metrics(prefix: &str, losses: &[f64]) -> StageMetrics {
    let mut m = StageMetrics::new();
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        let tail = &losses[losses.len() - losses.len().div_ceil(10)..];
        m.insert(format!("{prefix}_first"), *first);
        m.insert(format!("{prefix}_last"), *last);
        m.insert(format!("{prefix}_tail_mean"), tail.iter().sum::<f64>() / tail.len() as f64);
    }
    m
}

fn sample_batch<R: Rng + ?Sized>(pool: &[usize], batch: usize, rng: &mut R) -> Vec<usize> {
    (0..batch).map(|_| pool[rng.random_range(0..pool.len())]).collect()
}

fn encode_latents(ae: &LatentAe, ps: &ParamStore, images: &Tensor) -> Result<Tensor> {
    let n = images.shape()[0];
    let mut data = Vec::new();
    let mut shape = vec![n];
    for start in (0..n).step_by(64) {
        let idx: Vec<usize> = (start..(start + 64).min(n)).collect();
        let z = ae.encode(ps, &gather_rows(images, &idx)?)?;
        shape.truncate(1);
        shape.extend_from_slice(&z.shape()[1..]);
        data.extend_from_slice(z.data());
    }
    Tensor::new(shape, data)
}

/// Builds the models every stage agrees on; parameter values come from
/// checkpoints, so the construction stream only matters for fresh models.
struct Models {
    ps: ParamStore,
    xmodal: XModalModel,
    latent: LatentAe,
    denoiser: CondDenoiser,
}

impl Models {
    fn new(cfg: &RunConfig) -> Result<Self> {
        let mut ps = ParamStore::new();
        let mut rng = seeded_rng(cfg.seed, 1);
        let xmodal = XModalModel::new(&mut ps, &cfg.xmodal, &cfg.fmri, &cfg.image, &mut rng)?;
        let latent = LatentAe::new(&mut ps, &cfg.latent, &mut rng)?;
        let denoiser = CondDenoiser::new(&mut ps, &cfg.denoiser, &mut rng)?;
        Ok(Self {
            ps,
            xmodal,
            latent,
            denoiser,
        })
    }

    fn fmri(&self) -> &FmriAutoencoder {
        &self.xmodal.fmri
    }
}

fn prepare_dir(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("config.toml"),
        format!("# {}\n{}", crate::CODE_VERSION, cfg.dump()),
    )?;
    Ok(())
}

/// Runs one stage, reading its inputs from and writing its outputs to `run`.
pub fn run_stage(stage: Stage, cfg: &RunConfig, run: &Path) -> Result<StageMetrics> {
    cfg.validate()?;
    let dir = stage_dir(run, stage);
    let mut rng = seeded_rng(cfg.seed, stage.stream());
    let metrics = match stage {
        Stage::Synth => {
            prepare_dir(cfg, &dir)?;
            let ds = synthesize(&cfg.synth_config())?;
            ds.save(&dir)?;
            StageMetrics::from([
                ("samples".into(), ds.len() as f64),
                ("train".into(), ds.train.len() as f64),
                ("test".into(), ds.test.len() as f64),
            ])
        }
        Stage::Pretrain => {
            let ds = load_dataset(run)?;
            prepare_dir(cfg, &dir)?;
            let mut m = Models::new(cfg)?;
            let ids: Vec<_> = m
                .ps
                .ids_with_prefix(ENCODER_PREFIX)
                .chain(m.ps.ids_with_prefix(DECODER_PREFIX))
                .collect();
            let mut opt = cfg.pretrain.optimizer(ids);
            let sched = cfg.pretrain.schedule();
            // unpaired fMRI from every subject's training split
            let mut rows = Vec::with_capacity(cfg.pretrain.steps);
            for step in 0..cfg.pretrain.steps {
                let idx = sample_batch(&ds.train, cfg.pretrain.batch, &mut rng);
                let batch = gather_rows(&ds.voxels, &idx)?;
                let l = phase1_step(&m.xmodal.fmri, &mut m.ps, &mut opt, &batch, sched.lr(step as u64), &mut rng)?;
                rows.push(vec![l.l_c, l.l_s, l.total]);
            }
            write_losses(&dir.join("losses.csv"), &["l_c", "l_s", "total"], &rows)?;
            save_subset(&m.ps, &dir.join("fmri.json"), &["fmri."], cfg)?;
            loss_metrics("loss", &rows.iter().map(|r| r[2]).collect::<Vec<_>>())
        }
        Stage::Xtune => {
            let ds = load_dataset(run)?;
            let phase1 = checkpoint(run, Stage::Pretrain, "fmri.json")?;
            prepare_dir(cfg, &dir)?;
            let mut m = Models::new(cfg)?;
            load_into(&mut m.ps, &phase1, &["fmri."])?;
            let ip = &cfg.image_pretrain;
            let train_images = gather_rows(&ds.images, &ds.train)?;
            let image_losses = pretrain_image_mae(
                &m.xmodal.image,
                &mut m.ps,
                &train_images,
                ip.train.steps,
                ip.train.batch,
                ip.mask_ratio,
                ip.train.lr,
                &mut rng,
            )?;
            write_losses(
                &dir.join("image_pretrain.csv"),
                &["loss"],
                &image_losses.iter().map(|&l| vec![l]).collect::<Vec<_>>(),
            )?;
            let (train, _) = ds.subject_split(cfg.subject);
            let mut opt = cfg.xtune.optimizer(m.xmodal.trainable(&m.ps));
            let sched = cfg.xtune.schedule();
            let mut rows = Vec::with_capacity(cfg.xtune.steps);
            for step in 0..cfg.xtune.steps {
                let idx = sample_batch(&train, cfg.xtune.batch, &mut rng);
                let (v, u, _) = ds.select(&idx)?;
                let l = m.xmodal.step(&mut m.ps, &mut opt, &v, &u, sched.lr(step as u64), &mut rng)?;
                rows.push(vec![l.l_f, l.l_i, l.total]);
            }
            write_losses(&dir.join("losses.csv"), &["l_f", "l_i", "total"], &rows)?;
            save_subset(
                &m.ps,
                &dir.join("xmodal.json"),
                &["fmri.", IMAGE_ENCODER_PREFIX, IMAGE_DECODER_PREFIX, CROSS_PREFIX],
                cfg,
            )?;
            let mut metrics = loss_metrics("loss", &rows.iter().map(|r| r[2]).collect::<Vec<_>>());
            metrics.extend(loss_metrics("image_pretrain", &image_losses));
            metrics
        }
        Stage::TrainLatentAe => {
            let ds = load_dataset(run)?;
            prepare_dir(cfg, &dir)?;
            let mut m = Models::new(cfg)?;
            let images = gather_rows(&ds.images, &ds.train)?;
            let t = &cfg.latent_train;
            let losses = m.latent.train(&mut m.ps, &images, t.steps, t.batch, t.lr, &mut rng)?;
            write_losses(
                &dir.join("losses.csv"),
                &["loss"],
                &losses.iter().map(|&l| vec![l]).collect::<Vec<_>>(),
            )?;
            save_subset(&m.ps, &dir.join("latent_ae.json"), &[LATENT_PREFIX], cfg)?;
            let mut metrics = loss_metrics("loss", &losses);
            metrics.insert("latent_scale".into(), m.ps.get(m.latent.scale).data()[0]);
            metrics
        }
        Stage::PretrainLdm => {
            let ds = load_dataset(run)?;
            let ae = checkpoint(run, Stage::TrainLatentAe, "latent_ae.json")?;
            prepare_dir(cfg, &dir)?;
            let mut m = Models::new(cfg)?;
            load_into(&mut m.ps, &ae, &[LATENT_PREFIX])?;
            let schedule = NoiseSchedule::from_config(&cfg.schedule)?;
            let latents = encode_latents(&m.latent, &m.ps, &gather_rows(&ds.images, &ds.train)?)?;
            let labels: Vec<usize> = ds.train.iter().map(|&i| ds.labels[i]).collect();
            let t = &cfg.ldm_pretrain;
            let mut opt = t.optimizer(m.ps.ids_with_prefix(DENOISER_PREFIX).collect());
            let sched = t.schedule();
            let positions: Vec<usize> = (0..labels.len()).collect();
            let mut losses = Vec::with_capacity(t.steps);
            for step in 0..t.steps {
                let idx = sample_batch(&positions, t.batch, &mut rng);
                let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                let z = gather_rows(&latents, &idx)?;
                losses.push(pretrain_step(
                    &m.denoiser,
                    &schedule,
                    &mut m.ps,
                    &mut opt,
                    z,
                    &y,
                    sched.lr(step as u64),
                    &mut rng,
                )?);
            }
            write_losses(
                &dir.join("losses.csv"),
                &["loss"],
                &losses.iter().map(|&l| vec![l]).collect::<Vec<_>>(),
            )?;
            save_subset(&m.ps, &dir.join("ldm.json"), &[DENOISER_PREFIX], cfg)?;
            loss_metrics("loss", &losses)
        }
        Stage::FinetuneLdm => {
            let ds = load_dataset(run)?;
            let xt = checkpoint(run, Stage::Xtune, "xmodal.json")?;
            let ae = checkpoint(run, Stage::TrainLatentAe, "latent_ae.json")?;
            let pretrained = cfg.ldm_pretrain.steps > 0;
            let ldm = if pretrained {
                Some(checkpoint(run, Stage::PretrainLdm, "ldm.json")?)
            } else {
                None
            };
            prepare_dir(cfg, &dir)?;
            let mut m = Models::new(cfg)?;
            load_into(&mut m.ps, &xt, &["fmri."])?;
            load_into(&mut m.ps, &ae, &[LATENT_PREFIX])?;
            if let Some(ldm) = &ldm {
                load_into(&mut m.ps, ldm, &[DENOISER_PREFIX])?;
            }
            let schedule = NoiseSchedule::from_config(&cfg.schedule)?;
            let (train, test) = ds.subject_split(cfg.subject);
            let (train_v, train_u, _) = ds.select(&train)?;
            let train_z = encode_latents(&m.latent, &m.ps, &train_u)?;
            let t = &cfg.finetune;
            let mut opt = t.optimizer(finetune_trainable(&m.ps, &m.denoiser, pretrained));
            let sched = t.schedule();
            let positions: Vec<usize> = (0..train.len()).collect();
            let mut losses = Vec::with_capacity(t.steps);
            {
                let Models { ps, xmodal, denoiser, .. } = &mut m;
                let ctx = FinetuneContext {
                    fmri: &xmodal.fmri,
                    denoiser,
                    schedule: &schedule,
                };
                for step in 0..t.steps {
                    let idx = sample_batch(&positions, t.batch, &mut rng);
                    let v = gather_rows(&train_v, &idx)?;
                    let z = gather_rows(&train_z, &idx)?;
                    losses.push(finetune_step(&ctx, ps, &mut opt, &v, z, sched.lr(step as u64), &mut rng)?);
                }
            }
            write_losses(
                &dir.join("losses.csv"),
                &["loss"],
                &losses.iter().map(|&l| vec![l]).collect::<Vec<_>>(),
            )?;
            save_subset(&m.ps, &dir.join("finetune.json"), &[ENCODER_PREFIX, DENOISER_PREFIX], cfg)?;
            let (test_v, test_u, _) = ds.select(&test)?;
            let test_z = encode_latents(&m.latent, &m.ps, &test_u)?;
            let ctx = FinetuneContext {
                fmri: m.fmri(),
                denoiser: &m.denoiser,
                schedule: &schedule,
            };
            let mut gap_rng = seeded_rng(cfg.seed, stage.stream() + 1000);
            let (matched, shuffled) = conditioning_gap(&ctx, &m.ps, &test_v, &test_z, 32, &mut gap_rng)?;
            let mut metrics = loss_metrics("loss", &losses);
            metrics.insert("matched_loss".into(), matched);
            metrics.insert("shuffled_loss".into(), shuffled);
            metrics.insert("conditioning_gap".into(), shuffled - matched);
            fs::write(dir.join("gap.json"), serde_json::to_string_pretty(&metrics)?)?;
            metrics
        }
        Stage::Generate => {
            let ds = load_dataset(run)?;
            let ft = checkpoint(run, Stage::FinetuneLdm, "finetune.json")?;
            let ae = checkpoint(run, Stage::TrainLatentAe, "latent_ae.json")?;
            prepare_dir(cfg, &dir)?;
            let mut m = Models::new(cfg)?;
            load_into(&mut m.ps, &ft, &[ENCODER_PREFIX, DENOISER_PREFIX])?;
            load_into(&mut m.ps, &ae, &[LATENT_PREFIX])?;
            let schedule = NoiseSchedule::from_config(&cfg.schedule)?;
            let (_, test) = ds.subject_split(cfg.subject);
            let (test_v, test_u, _) = ds.select(&test)?;
            let ctx = FinetuneContext {
                fmri: m.fmri(),
                denoiser: &m.denoiser,
                schedule: &schedule,
            };
            let tokens = ctx.tokens(&m.ps, &test_v)?;
            let model = m.denoiser.with_context(&m.ps, tokens);
            let shape = cfg.latent.latent_shape(test.len());
            let z = match cfg.generate.sampler {
                Sampler::Plms => plms_sample(&model, &schedule, &shape, cfg.generate.steps, &mut rng)?,
                Sampler::Ddpm => ddpm_sample(&model, &schedule, &shape, cfg.generate.steps, &mut rng)?,
            };
            let mut images = m.latent.decode(&m.ps, &z)?;
            images.data_mut().iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
            if !images.is_finite() {
                return Err(Error::NonFinite {
                    op: "generated images".into(),
                });
            }
            let mut out = ParamStore::new();
            out.add("generated", images.clone())?;
            out.add("ground_truth", test_u.clone())?;
            out.add("dataset_index", Tensor::from_fn([test.len()], |i| test[i] as f64))?;
            out.save(&dir.join("generated.json"), &CheckpointMeta::new(cfg.dump()))?;
            if cfg.generate.write_png {
                let png_dir = dir.join("png");
                fs::create_dir_all(&png_dir)?;
                for (row, &i) in test.iter().enumerate() {
                    let img = |t: &Tensor| Tensor::new(t.shape()[1..].to_vec(), t.row(row).to_vec());
                    save_png(&png_dir.join(format!("{i:05}_gen.png")), &img(&images)?)?;
                    save_png(&png_dir.join(format!("{i:05}_gt.png")), &img(&test_u)?)?;
                }
            }
            StageMetrics::from([("generated".into(), test.len() as f64)])
        }
        Stage::Evaluate => {
            let ds = load_dataset(run)?;
            let gen_path = checkpoint(run, Stage::Generate, "generated.json")?;
            prepare_dir(cfg, &dir)?;
            let (gen, _) = ParamStore::load(&gen_path)?;
            let get = |name: &str| {
                gen.id(name)
                    .map(|id| gen.get(id).clone())
                    .ok_or_else(|| Error::format(&gen_path, format!("tensor {name} missing")))
            };
            let (generated, ground_truth, index) = (get("generated")?, get("ground_truth")?, get("dataset_index")?);
            let mut ps = ParamStore::new();
            let clf = Classifier::new(&mut ps, &cfg.classifier, &mut seeded_rng(cfg.seed, 2))?;
            let t = &cfg.evaluate.classifier_train;
            let (train_u, train_y) = (gather_rows(&ds.images, &ds.train)?, ds.train.iter().map(|&i| ds.labels[i]).collect::<Vec<_>>());
            let losses = clf.train(&mut ps, &train_u, &train_y, t.steps, t.batch, t.lr, &mut rng)?;
            ps.save(&dir.join("classifier.json"), &CheckpointMeta::new(cfg.dump()))?;
            let test_y: Vec<usize> = index.data().iter().map(|&i| ds.labels[i as usize]).collect();
            let held_out_acc = clf.accuracy(&ps, &ground_truth, &test_y)?;
            let gen_acc = clf.accuracy(&ps, &generated, &test_y)?;
            let probs = predict_all(&clf, &ps, &generated)?;
            let gt_classes: Vec<usize> = if cfg.evaluate.use_dataset_labels {
                test_y
            } else {
                let p = predict_all(&clf, &ps, &ground_truth)?;
                (0..p.shape()[0]).map(|i| argmax(p.row(i))).collect()
            };
            let e = &cfg.evaluate;
            let report = evaluate_pairs(&probs, &gt_classes, e.n, e.k, e.trials, cfg.seed)?;
            report.write(&run.join("eval_report.json"), &dir.join("per_image.csv"))?;
            let mut metrics = loss_metrics("classifier_loss", &losses);
            metrics.insert("classifier_test_accuracy".into(), held_out_acc);
            metrics.insert("generated_accuracy".into(), gen_acc);
            metrics.insert("mean_sr".into(), report.mean_sr);
            metrics
        }
    };
    record_metrics(run, stage, &metrics)?;
    Ok(metrics)
}

fn predict_all(clf: &Classifier, ps: &ParamStore, images: &Tensor) -> Result<Tensor> {
    let n = images.shape()[0];
    let mut data = Vec::with_capacity(n * clf.config.n_classes);
    for start in (0..n).step_by(64) {
        let idx: Vec<usize> = (start..(start + 64).min(n)).collect();
        data.extend_from_slice(clf.predict(ps, &gather_rows(images, &idx)?)?.data());
    }
    Tensor::new([n, clf.config.n_classes], data)
}

fn load_dataset(run: &Path) -> Result<PairedDataset> {
    PairedDataset::load(&stage_dir(run, Stage::Synth))
}

/// Merges a stage's metrics into the run's `metrics.json` roll-up.
fn record_metrics(run: &Path, stage: Stage, metrics: &StageMetrics) -> Result<()> {
    let path = run.join("metrics.json");
    let mut all: BTreeMap<String, StageMetrics> = match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?,
        Err(_) => BTreeMap::new(),
    };
    all.insert(stage.name().into(), metrics.clone());
    fs::write(&path, serde_json::to_string_pretty(&all)?)?;
    Ok(())
}

/// Outcome of [`run_pipeline`].
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub report: EvalReport,
    pub metrics: BTreeMap<String, StageMetrics>,
    /// Wall-clock seconds per executed stage.
    pub seconds: BTreeMap<String, f64>,
}

/// Runs every stage from `from` onwards. Earlier stages must already have
/// written their artifacts into `run`.
pub fn run_pipeline(cfg: &RunConfig, run: &Path, from: Stage) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(run)?;
    fs::write(run.join("config.toml"), format!("# {}\n{}", crate::CODE_VERSION, cfg.dump()))?;
    let mut metrics = BTreeMap::new();
    let mut seconds = BTreeMap::new();
    for stage in Stage::ALL.into_iter().filter(|&s| s >= from) {
        let start = Instant::now();
        let m = run_stage(stage, cfg, run)?;
        seconds.insert(stage.name().to_string(), start.elapsed().as_secs_f64());
        metrics.insert(stage.name().to_string(), m);
    }
    fs::write(run.join("timings.json"), serde_json::to_string_pretty(&seconds)?)?;
    let path = run.join("eval_report.json");
    let report = serde_json::from_str(&fs::read_to_string(&path)?).map_err(|e| Error::format(&path, e.to_string()))?;
    Ok(RunSummary {
        report,
        metrics,
        seconds,
    })
}

/// Writes an `[H, W, 3]` image with values in `[0, 1]` as 8-bit RGB.
pub fn save_png(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::contract(format!("expected an [H, W, 3] image, got {s:?}")));
    }
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let w = BufWriter::new(fs::File::create(path)?);
    let mut enc = png::Encoder::new(w, s[1] as u32, s[0] as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let to_err = |e: png::EncodingError| Error::format(path, e.to_string());
    let mut writer = enc.write_header().map_err(to_err)?;
    writer.write_image_data(&bytes).map_err(to_err)?;
    writer.finish().map_err(to_err)?;
    Ok(())
}
