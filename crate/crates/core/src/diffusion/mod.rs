//! Latent diffusion: the forward noising process, a small latent
//! auto-encoder, the conditional denoiser and its samplers.

mod latent_ae;
mod sampler;
mod train;
mod unet;

pub use latent_ae::{LatentAe, LatentAeConfig, LATENT_PREFIX};
pub use sampler::{ddpm_from, ddpm_sample, plms_from, plms_sample, timesteps, NoisePredictor};
pub use train::{
    conditioning_gap, denoise_loss, finetune_trainable, pretrain_step, finetune_step, DenoiseBatch, FinetuneContext,
};
pub use unet::{CondDenoiser, Conditioning, DenoiserConfig, DENOISER_PREFIX};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-step variances of the forward chain.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl NoiseSchedule {
    /// `β` evenly spaced from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(format!(
                "invalid noise schedule: {steps} steps, beta {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        Self::linear(cfg.steps, cfg.beta_start, cfg.beta_end)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// `ᾱ` at `t`, with `ᾱ = 1` before the first step.
    pub fn alpha_bar(&self, t: Option<usize>) -> f64 {
        t.map_or(1.0, |t| self.alpha_bars[t])
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::contract(format!(
                "diffusion step {t} outside [0, {})",
                self.len()
            )));
        }
        Ok(())
    }

    /// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε`, one step index per batch row.
    pub fn q_sample(&self, z0: &Tensor, t: &[usize], eps: &Tensor) -> Result<Tensor> {
        if z0.shape() != eps.shape() || z0.shape().first() != Some(&t.len()) {
            return Err(Error::Shape {
                op: "q_sample",
                lhs: z0.shape().to_vec(),
                rhs: eps.shape().to_vec(),
            });
        }
        for &s in t {
            self.check(s)?;
        }
        let per = z0.numel() / t.len();
        Ok(Tensor::from_fn(z0.shape().to_vec(), |i| {
            let ab = self.alpha_bars[t[i / per]];
            ab.sqrt() * z0.data()[i] + (1.0 - ab).sqrt() * eps.data()[i]
        }))
    }

    /// Uniform step indices and standard normal noise for a training batch.
    pub fn draw<R: Rng + ?Sized>(&self, shape: &[usize], rng: &mut R) -> (Vec<usize>, Tensor) {
        let t = (0..shape[0]).map(|_| rng.random_range(0..self.len())).collect();
        (t, Tensor::randn(shape.to_vec(), 1.0, rng))
    }
}
