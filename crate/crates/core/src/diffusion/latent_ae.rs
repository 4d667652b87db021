//! Convolutional image auto-encoder that defines the diffusion latent space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::dcmae::ensure_finite;
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::optim::{AdamW, AdamWConfig, WarmupCosine};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::xmodal::gather_rows;

pub const LATENT_PREFIX: &str = "latent.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentAeConfig {
    pub image_size: usize,
    pub channels: usize,
    pub hidden: usize,
    pub latent_channels: usize,
}

impl Default for LatentAeConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            hidden: 32,
            latent_channels: 4,
        }
    }
}

impl LatentAeConfig {
    /// Spatial side of the latent grid (two stride-2 reductions).
    pub fn latent_size(&self) -> usize {
        self.image_size / 4
    }

    pub fn latent_shape(&self, batch: usize) -> [usize; 4] {
        let s = self.latent_size();
        [batch, s, s, self.latent_channels]
    }
}

/// Encoder `E_G` and decoder `D_G`. Latents are multiplied by a stored scale
/// so the training set has unit variance in latent space.
#[derive(Clone, Debug)]
pub struct LatentAe {
    pub config: LatentAeConfig,
    enc: [Conv2d; 4],
    dec: [Conv2d; 4],
    pub scale: ParamId,
}

impl LatentAe {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, config: &LatentAeConfig, rng: &mut R) -> Result<Self> {
        if !config.image_size.is_multiple_of(4) || config.image_size == 0 {
            return Err(Error::config("latent auto-encoder needs an image size divisible by 4"));
        }
        let (c, h, l) = (config.channels, config.hidden, config.latent_channels);
        let half = (h / 2).max(1);
        let enc = [
            Conv2d::new(ps, "latent.enc.0", c, half, 3, 1, 1, rng)?,
            Conv2d::new(ps, "latent.enc.1", half, h, 3, 2, 1, rng)?,
            Conv2d::new(ps, "latent.enc.2", h, h, 3, 2, 1, rng)?,
            Conv2d::new(ps, "latent.enc.3", h, l, 1, 1, 0, rng)?,
        ];
        let dec = [
            Conv2d::same(ps, "latent.dec.0", l, h, rng)?,
            Conv2d::same(ps, "latent.dec.1", h, h, rng)?,
            Conv2d::same(ps, "latent.dec.2", h, half, rng)?,
            Conv2d::same(ps, "latent.dec.3", half, c, rng)?,
        ];
        let scale = ps.add("latent.scale", Tensor::ones([1]))?;
        Ok(Self {
            config: config.clone(),
            enc,
            dec,
            scale,
        })
    }

    fn raw_encode<'g>(&self, ps: &ParamStore, images: Var<'g>) -> Result<Var<'g>> {
        let mut x = images;
        for (i, conv) in self.enc.iter().enumerate() {
            x = conv.forward(ps, x)?;
            if i + 1 < self.enc.len() {
                x = x.silu()?;
            }
        }
        Ok(x)
    }

    fn raw_decode<'g>(&self, ps: &ParamStore, latents: Var<'g>) -> Result<Var<'g>> {
        let mut x = latents;
        for (i, conv) in self.dec.iter().enumerate() {
            if i == 1 || i == 2 {
                x = x.upsample2x()?;
            }
            x = conv.forward(ps, x)?;
            if i + 1 < self.dec.len() {
                x = x.silu()?;
            }
        }
        Ok(x)
    }

    fn scale_value(&self, ps: &ParamStore) -> f64 {
        ps.get(self.scale).data()[0]
    }

    /// Scaled latents of `[B, H, W, C]` images.
    pub fn encode(&self, ps: &ParamStore, images: &Tensor) -> Result<Tensor> {
        let g = Graph::inference();
        let z = self.raw_encode(ps, g.constant(images))?.value();
        let s = self.scale_value(ps);
        Ok(Tensor::from_fn(z.shape().to_vec(), |i| z.data()[i] * s))
    }

    /// Images from scaled latents.
    pub fn decode(&self, ps: &ParamStore, latents: &Tensor) -> Result<Tensor> {
        let s = self.scale_value(ps);
        let z = Tensor::from_fn(latents.shape().to_vec(), |i| latents.data()[i] / s);
        let g = Graph::inference();
        Ok(self.raw_decode(ps, g.constant(&z))?.value())
    }

    pub fn trainable(&self, ps: &ParamStore) -> Vec<ParamId> {
        ps.ids_with_prefix(LATENT_PREFIX).filter(|&id| id != self.scale).collect()
    }

    /// Trains reconstruction on `images`, then sets the latent scale to the
    /// inverse standard deviation of the training latents. Returns per-step
    /// losses.
    #[allow(clippy::too_many_arguments)]
    pub fn train<R: Rng + ?Sized>(
        &self,
        ps: &mut ParamStore,
        images: &Tensor,
        steps: usize,
        batch: usize,
        lr: f64,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            self.trainable(ps),
        );
        let schedule = WarmupCosine::new(lr, steps as u64, 0.05);
        let n = images.shape()[0];
        let mut losses = Vec::with_capacity(steps);
        for step in 0..steps {
            let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
            let x = gather_rows(images, &idx)?;
            let g = Graph::new();
            let target = g.constant(&x);
            let recon = self.raw_decode(ps, self.raw_encode(ps, target)?)?;
            let loss = recon.sub(target)?.square()?.mean()?;
            let value = loss.item()?;
            ensure_finite("latent auto-encoder loss", &[("L", value)])?;
            g.backward_into(loss, ps)?;
            opt.step(ps, schedule.lr(step as u64))?;
            ps.zero_grad();
            losses.push(value);
        }
        self.calibrate(ps, images)?;
        Ok(losses)
    }

    /// Sets the scale so that encoded `images` have unit variance.
    pub fn calibrate(&self, ps: &mut ParamStore, images: &Tensor) -> Result<()> {
        ps.get_mut(self.scale).data_mut()[0] = 1.0;
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut count = 0usize;
        let n = images.shape()[0];
        for start in (0..n).step_by(64) {
            let idx: Vec<usize> = (start..(start + 64).min(n)).collect();
            let z = self.encode(ps, &gather_rows(images, &idx)?)?;
            for &v in z.data() {
                sum += v;
                sq += v * v;
            }
            count += z.numel();
        }
        let mean = sum / count as f64;
        let var = sq / count as f64 - mean * mean;
        if !(var > 0.0) {
            return Err(Error::NonFinite {
                op: format!("latent variance {var}"),
            });
        }
        ps.get_mut(self.scale).data_mut()[0] = 1.0 / var.sqrt();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    fn small() -> LatentAeConfig {
        LatentAeConfig {
            image_size: 8,
            channels: 3,
            hidden: 8,
            latent_channels: 2,
        }
    }

    #[test]
    fn shapes_round_trip() {
        let mut ps = ParamStore::new();
        let ae = LatentAe::new(&mut ps, &small(), &mut seeded_rng(1, 0)).unwrap();
        let x = Tensor::randn([3, 8, 8, 3], 1.0, &mut seeded_rng(2, 0));
        let z = ae.encode(&ps, &x).unwrap();
        assert_eq!(z.shape(), &small().latent_shape(3));
        assert_eq!(ae.decode(&ps, &z).unwrap().shape(), &[3, 8, 8, 3]);
    }

    #[test]
    fn training_reduces_error_and_calibrates_scale() {
        let mut ps = ParamStore::new();
        let ae = LatentAe::new(&mut ps, &small(), &mut seeded_rng(3, 0)).unwrap();
        let x = Tensor::from_fn([6, 8, 8, 3], |i| ((i % 7) as f64 / 7.0 + (i / 192) as f64 * 0.1).fract());
        let losses = ae.train(&mut ps, &x, 150, 6, 5e-3, &mut seeded_rng(4, 0)).unwrap();
        assert!(losses[losses.len() - 1] < 0.5 * losses[0], "{} -> {}", losses[0], losses[losses.len() - 1]);
        let z = ae.encode(&ps, &x).unwrap();
        let n = z.numel() as f64;
        let mean = z.data().iter().sum::<f64>() / n;
        let var = z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var - 1.0).abs() < 1e-9);
    }
}
