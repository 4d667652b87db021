//! Denoising objectives: label-conditioned pretraining and fMRI-conditioned
//! fine-tuning.

use rand::Rng;

use super::unet::{CondDenoiser, Conditioning, DENOISER_PREFIX};
use super::NoiseSchedule;
use crate::autograd::{Graph, Var};
use crate::dcmae::{ensure_finite, FmriAutoencoder, ENCODER_PREFIX};
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Clean latents with the step indices and noise used to corrupt them.
#[derive(Clone, Debug)]
pub struct DenoiseBatch {
    pub latents: Tensor,
    pub t: Vec<usize>,
    pub eps: Tensor,
}

impl DenoiseBatch {
    pub fn draw<R: Rng + ?Sized>(latents: Tensor, schedule: &NoiseSchedule, rng: &mut R) -> Self {
        let (t, eps) = schedule.draw(latents.shape(), rng);
        Self { latents, t, eps }
    }
}

/// `mean ‖ε − ε_θ(z_t, t, ctx)‖²`
pub fn denoise_loss<'g>(
    denoiser: &CondDenoiser,
    schedule: &NoiseSchedule,
    ps: &ParamStore,
    batch: &DenoiseBatch,
    ctx: Var<'g>,
) -> Result<Var<'g>> {
    let g = ctx.graph();
    let z_t = schedule.q_sample(&batch.latents, &batch.t, &batch.eps)?;
    let pred = denoiser.forward(ps, g.constant(&z_t), &batch.t, ctx)?;
    pred.sub(g.constant(&batch.eps))?.square()?.mean()
}

/// One label-conditioned step updating every denoiser parameter.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_step<R: Rng + ?Sized>(
    denoiser: &CondDenoiser,
    schedule: &NoiseSchedule,
    ps: &mut ParamStore,
    opt: &mut AdamW,
    latents: Tensor,
    labels: &[usize],
    lr: f64,
    rng: &mut R,
) -> Result<f64> {
    let batch = DenoiseBatch::draw(latents, schedule, rng);
    let g = Graph::new();
    let ctx = denoiser.context(ps, &g, Conditioning::Class(labels))?;
    let loss = denoise_loss(denoiser, schedule, ps, &batch, ctx)?;
    let value = loss.item()?;
    ensure_finite("denoiser pretraining loss", &[("L", value)])?;
    ps.zero_grad();
    g.backward_into(loss, ps)?;
    opt.step(ps, lr)?;
    ps.zero_grad();
    Ok(value)
}

/// Parameters updated by fMRI fine-tuning. With a pretrained backbone only
/// the conditioning pathway and the fMRI encoder move; without one the whole
/// denoiser is trained as well.
pub fn finetune_trainable(ps: &ParamStore, denoiser: &CondDenoiser, pretrained_backbone: bool) -> Vec<ParamId> {
    let conditioning = denoiser.conditioning_ids(ps);
    ps.ids()
        .filter(|&id| {
            let name = ps.name(id);
            name.starts_with(ENCODER_PREFIX)
                || conditioning.contains(&id)
                || (!pretrained_backbone && name.starts_with(DENOISER_PREFIX) && name != "ldm.class_embed")
        })
        .collect()
}

/// The fMRI encoder and denoiser used together for fine-tuning.
pub struct FinetuneContext<'a> {
    pub fmri: &'a FmriAutoencoder,
    pub denoiser: &'a CondDenoiser,
    pub schedule: &'a NoiseSchedule,
}

impl FinetuneContext<'_> {
    pub fn loss<'g>(&self, ps: &ParamStore, g: &'g Graph, voxels: &Tensor, batch: &DenoiseBatch) -> Result<Var<'g>> {
        if voxels.shape()[0] != batch.latents.shape()[0] {
            return Err(Error::contract(format!(
                "unpaired batch: {} fMRI samples, {} latents",
                voxels.shape()[0],
                batch.latents.shape()[0]
            )));
        }
        let tokens = self.fmri.features(ps, g.constant(voxels))?;
        let ctx = self.denoiser.context(ps, g, Conditioning::Tokens(tokens))?;
        denoise_loss(self.denoiser, self.schedule, ps, batch, ctx)
    }

    /// fMRI tokens for sampling, `[B, L, cond_dim]`.
    pub fn tokens(&self, ps: &ParamStore, voxels: &Tensor) -> Result<Tensor> {
        let g = Graph::inference();
        Ok(self.fmri.features(ps, g.constant(voxels))?.value())
    }
}

/// One fine-tuning step. Parameters outside `opt.trainable()` are bound as
/// constants, so they receive no gradient and are never written.
#[allow(clippy::too_many_arguments)]
pub fn finetune_step<R: Rng + ?Sized>(
    ctx: &FinetuneContext<'_>,
    ps: &mut ParamStore,
    opt: &mut AdamW,
    voxels: &Tensor,
    latents: Tensor,
    lr: f64,
    rng: &mut R,
) -> Result<f64> {
    let batch = DenoiseBatch::draw(latents, ctx.schedule, rng);
    let trainable = opt.trainable().to_vec();
    let frozen: Vec<ParamId> = ps.ids().filter(|id| !trainable.contains(id)).collect();
    let g = Graph::new().with_frozen(frozen);
    let loss = ctx.loss(ps, &g, voxels, &batch)?;
    let value = loss.item()?;
    ensure_finite("denoiser fine-tuning loss", &[("L", value)])?;
    ps.zero_grad();
    g.backward_into(loss, ps)?;
    opt.step(ps, lr)?;
    ps.zero_grad();
    Ok(value)
}

/// Mean denoising loss on `(voxels, latents)` with matched pairs and with
/// the fMRI rows rotated by one position, using identical noise and steps
/// for both. Returns `(matched, shuffled)`.
pub fn conditioning_gap<R: Rng + ?Sized>(
    ctx: &FinetuneContext<'_>,
    ps: &ParamStore,
    voxels: &Tensor,
    latents: &Tensor,
    batch: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let n = voxels.shape()[0];
    if n < 2 {
        return Err(Error::contract("conditioning gap needs at least two pairs"));
    }
    let rotated: Vec<usize> = (0..n).map(|i| (i + 1) % n).collect();
    let shuffled = crate::xmodal::gather_rows(voxels, &rotated)?;
    let (mut matched_sum, mut shuffled_sum) = (0.0, 0.0);
    for start in (0..n).step_by(batch.max(1)) {
        let idx: Vec<usize> = (start..(start + batch).min(n)).collect();
        let lat = crate::xmodal::gather_rows(latents, &idx)?;
        let b = DenoiseBatch::draw(lat, ctx.schedule, rng);
        let g = Graph::inference();
        let w = idx.len() as f64;
        matched_sum += w * ctx.loss(ps, &g, &crate::xmodal::gather_rows(voxels, &idx)?, &b)?.item()?;
        shuffled_sum += w * ctx.loss(ps, &g, &crate::xmodal::gather_rows(&shuffled, &idx)?, &b)?.item()?;
    }
    Ok((matched_sum / n as f64, shuffled_sum / n as f64))
}
