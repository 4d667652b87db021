//! Phase 2: joint tuning of the fMRI auto-encoder and an image masked
//! auto-encoder with mutual cross-attention guidance.
//!
//! Each branch encodes its visible tokens, inserts mask tokens to recover a
//! full-length latent sequence, and adds a cross-attention readout of the
//! other modality before decoding. The image decoder stays frozen.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::dcmae::{ensure_finite, DcMaeConfig, FmriAutoencoder};
use crate::error::{Error, Result};
use crate::mask::{draw_mask, MaskPlan};
use crate::nn::{unpatchify_image, CrossAttentionParams, Linear, PatchEmbed2d, TransformerConfig, TransformerStack};
use crate::optim::AdamW;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const IMAGE_ENCODER_PREFIX: &str = "image.enc.";
pub const IMAGE_DECODER_PREFIX: &str = "image.dec.";
pub const CROSS_PREFIX: &str = "xmodal.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageMaeConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth_enc: usize,
    pub depth_dec: usize,
    pub dec_dim: usize,
    pub mlp_ratio: f64,
}

impl Default for ImageMaeConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch: 4,
            dim: 48,
            heads: 4,
            depth_enc: 3,
            depth_dec: 2,
            dec_dim: 48,
            mlp_ratio: 2.0,
        }
    }
}

impl ImageMaeConfig {
    pub fn num_tokens(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    fn stack(&self, depth: usize, dim: usize) -> TransformerConfig {
        TransformerConfig {
            depth,
            dim,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            patch_size: self.patch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stack(self.depth_enc, self.dim).validate()?;
        self.stack(self.depth_dec, self.dec_dim).validate()?;
        if self.depth_dec >= self.depth_enc {
            return Err(Error::config("image decoder must be shallower than its encoder"));
        }
        if !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::config("image size must be a multiple of the patch size"));
        }
        Ok(())
    }
}

/// Image masked auto-encoder (`E_I`, `D_I`) over NHWC rasters.
#[derive(Clone, Debug)]
pub struct ImageAutoencoder {
    pub config: ImageMaeConfig,
    pub embed: PatchEmbed2d,
    pub encoder: TransformerStack,
    pub mask_token: ParamId,
    pub dec_embed: Linear,
    pub dec_pos: ParamId,
    pub decoder: TransformerStack,
    pub head: Linear,
}

impl ImageAutoencoder {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, config: &ImageMaeConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config;
        let embed = PatchEmbed2d::new(ps, "image.enc.embed", c.image_size, c.channels, c.patch, c.dim, rng)?;
        let encoder = TransformerStack::new(ps, "image.enc", &c.stack(c.depth_enc, c.dim), rng)?;
        let mask_token = ps.add("image.dec.mask_token", Tensor::randn([c.dim], 0.02, rng))?;
        let dec_embed = Linear::new(ps, "image.dec.embed", c.dim, c.dec_dim, rng)?;
        let dec_pos = ps.add("image.dec.pos", Tensor::randn([c.num_tokens(), c.dec_dim], 0.02, rng))?;
        let decoder = TransformerStack::new(ps, "image.dec", &c.stack(c.depth_dec, c.dec_dim), rng)?;
        let head = Linear::new(ps, "image.dec.head", c.dec_dim, c.patch * c.patch * c.channels, rng)?;
        Ok(Self {
            config: c.clone(),
            embed,
            encoder,
            mask_token,
            dec_embed,
            dec_pos,
            decoder,
            head,
        })
    }

    /// Visible-token encoder output: `[B, H, W, C] -> [B, K, dim]`.
    pub fn encode<'g>(&self, ps: &ParamStore, images: Var<'g>, plans: &[MaskPlan]) -> Result<Var<'g>> {
        let tokens = self.embed.forward(ps, images)?;
        let index: Vec<Vec<usize>> = plans.iter().map(|p| p.visible.clone()).collect();
        self.encoder.forward(ps, tokens.gather_tokens(&index)?)
    }

    pub fn expand<'g>(&self, ps: &ParamStore, latent: Var<'g>, plans: &[MaskPlan]) -> Result<Var<'g>> {
        let index: Vec<Vec<usize>> = plans.iter().map(|p| p.visible.clone()).collect();
        let fill = latent.graph().param(ps, self.mask_token);
        latent.scatter_tokens(fill, &index, self.config.num_tokens())
    }

    /// `[B, T, dim] -> [B, H, W, C]`
    pub fn decode<'g>(&self, ps: &ParamStore, full: Var<'g>) -> Result<Var<'g>> {
        let g = full.graph();
        let x = self.dec_embed.forward(ps, full)?.add_bcast(g.param(ps, self.dec_pos))?;
        let x = self.head.forward(ps, self.decoder.forward(ps, x)?)?;
        let s = self.config.image_size;
        unpatchify_image(x, self.config.patch, s, s)
    }

    pub fn reconstruct<'g>(&self, ps: &ParamStore, images: Var<'g>, plans: &[MaskPlan]) -> Result<Var<'g>> {
        let latent = self.encode(ps, images, plans)?;
        self.decode(ps, self.expand(ps, latent, plans)?)
    }
}

/// Mean squared error, optionally restricted to a 0/1 `weight` pattern of
/// the same shape.
fn mse<'g>(pred: Var<'g>, target: Var<'g>, weight: Option<&Tensor>) -> Result<Var<'g>> {
    let sq = pred.sub(target)?.square()?;
    match weight {
        None => sq.mean(),
        Some(w) => {
            let count: f64 = w.data().iter().sum();
            if count == 0.0 {
                return Err(Error::contract("masked-only loss with nothing masked"));
            }
            sq.mul_const(w)?.sum()?.scale(1.0 / count)
        }
    }
}

/// Pretrains the image auto-encoder on masked reconstruction. Returns the
/// per-step losses.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_image_mae<R: Rng + ?Sized>(
    model: &ImageAutoencoder,
    ps: &mut ParamStore,
    images: &Tensor,
    steps: usize,
    batch: usize,
    mask_ratio: f64,
    lr: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let ids: Vec<ParamId> = ps
        .ids_with_prefix(IMAGE_ENCODER_PREFIX)
        .chain(ps.ids_with_prefix(IMAGE_DECODER_PREFIX))
        .collect();
    let mut opt = AdamW::new(Default::default(), ids);
    let schedule = crate::optim::WarmupCosine::new(lr, steps as u64, 0.05);
    let n = images.shape()[0];
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
        let x = gather_rows(images, &idx)?;
        let plans = (0..batch)
            .map(|_| draw_mask(model.config.num_tokens(), mask_ratio, rng))
            .collect::<Result<Vec<_>>>()?;
        let g = Graph::new();
        let target = g.constant(&x);
        let loss = mse(model.reconstruct(ps, target, &plans)?, target, None)?;
        let value = loss.item()?;
        ensure_finite("image pretraining loss", &[("L", value)])?;
        g.backward_into(loss, ps)?;
        opt.step(ps, schedule.lr(step as u64))?;
        ps.zero_grad();
        losses.push(value);
    }
    Ok(losses)
}

/// Rows `idx` of a tensor along its leading axis.
pub fn gather_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let rows: Vec<&[f64]> = idx.iter().map(|&i| t.row(i)).collect();
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, rows.concat())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct XModalConfig {
    pub gamma_f: f64,
    pub gamma_i: f64,
    pub fmri_mask_ratio: f64,
    pub image_mask_ratio: f64,
    /// Std of the cross-attention projection initialization.
    pub ca_init_std: f64,
    /// Restrict reconstruction losses to masked positions.
    pub masked_only: bool,
}

impl Default for XModalConfig {
    fn default() -> Self {
        Self {
            gamma_f: 0.25,
            gamma_i: 1.5,
            fmri_mask_ratio: 0.75,
            image_mask_ratio: 0.5,
            ca_init_std: 0.02,
            masked_only: false,
        }
    }
}

impl XModalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma_f < 0.0 || self.gamma_i < 0.0 {
            return Err(Error::config("phase-2 loss weights must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.fmri_mask_ratio) || !(0.0..1.0).contains(&self.image_mask_ratio) {
            return Err(Error::config("phase-2 mask ratios must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Both auto-encoders and the two cross-attention modules.
#[derive(Clone, Debug)]
pub struct XModalModel {
    pub config: XModalConfig,
    pub fmri: FmriAutoencoder,
    pub image: ImageAutoencoder,
    /// Image queries attending over fMRI keys/values; guides the fMRI decoder.
    pub ca_f: CrossAttentionParams,
    /// fMRI queries attending over image keys/values; guides the image decoder.
    pub ca_i: CrossAttentionParams,
}

/// Masks of one paired batch.
#[derive(Clone, Debug)]
pub struct PairMasks {
    pub fmri: Vec<MaskPlan>,
    pub image: Vec<MaskPlan>,
}

impl PairMasks {
    pub fn draw<R: Rng + ?Sized>(model: &XModalModel, batch: usize, rng: &mut R) -> Result<Self> {
        let ft = model.fmri.config.num_tokens();
        let it = model.image.config.num_tokens();
        let fmri = (0..batch)
            .map(|_| draw_mask(ft, model.config.fmri_mask_ratio, rng))
            .collect::<Result<_>>()?;
        let image = (0..batch)
            .map(|_| draw_mask(it, model.config.image_mask_ratio, rng))
            .collect::<Result<_>>()?;
        Ok(Self { fmri, image })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Phase2Losses {
    pub l_f: f64,
    pub l_i: f64,
    pub total: f64,
}

impl XModalModel {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        config: &XModalConfig,
        fmri_cfg: &DcMaeConfig,
        image_cfg: &ImageMaeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let fmri = FmriAutoencoder::new(ps, fmri_cfg, rng)?;
        let image = ImageAutoencoder::new(ps, image_cfg, rng)?;
        let (fd, id) = (fmri_cfg.dim, image_cfg.dim);
        let std = config.ca_init_std;
        let ca_f = CrossAttentionParams::new(ps, "xmodal.ca_f", id, fd, fd, fd, std, rng)?;
        let ca_i = CrossAttentionParams::new(ps, "xmodal.ca_i", fd, id, id, id, std, rng)?;
        Ok(Self {
            config: config.clone(),
            fmri,
            image,
            ca_f,
            ca_i,
        })
    }

    /// Parameters updated in this phase: everything except the image decoder.
    pub fn trainable(&self, ps: &ParamStore) -> Vec<ParamId> {
        ps.ids().filter(|&id| !ps.name(id).starts_with(IMAGE_DECODER_PREFIX)).collect()
    }

    pub fn frozen(&self, ps: &ParamStore) -> Vec<ParamId> {
        ps.ids_with_prefix(IMAGE_DECODER_PREFIX).collect()
    }

    /// Full-length latents of both branches, `([B, T, dF], [B, T, dI])`.
    pub fn latents<'g>(
        &self,
        ps: &ParamStore,
        voxels: Var<'g>,
        images: Var<'g>,
        masks: &PairMasks,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let (vs, is) = (voxels.shape(), images.shape());
        if vs[0] != is[0] || masks.fmri.len() != vs[0] || masks.image.len() != is[0] {
            return Err(Error::contract(format!(
                "unpaired batch: {} fMRI samples, {} images",
                vs[0], is[0]
            )));
        }
        let h_f = self.fmri.expand(ps, self.fmri.encode(ps, voxels, &masks.fmri)?, &masks.fmri)?;
        let h_i = self.image.expand(ps, self.image.encode(ps, images, &masks.image)?, &masks.image)?;
        if h_f.shape()[1] != h_i.shape()[1] {
            return Err(Error::contract(format!(
                "unpaired token grids: {} fMRI tokens, {} image tokens",
                h_f.shape()[1],
                h_i.shape()[1]
            )));
        }
        Ok((h_f, h_i))
    }

    /// `D_F(h_F + CA_F(Q = h_I, K/V = h_F))`
    pub fn reconstruct_fmri_guided<'g>(&self, ps: &ParamStore, h_f: Var<'g>, h_i: Var<'g>) -> Result<Var<'g>> {
        let guided = h_f.add(self.ca_f.forward(ps, h_i, h_f)?)?;
        self.fmri.decode(ps, guided)
    }

    /// `D_I(h_I + CA_I(Q = h_F, K/V = h_I))`
    pub fn reconstruct_image_guided<'g>(&self, ps: &ParamStore, h_i: Var<'g>, h_f: Var<'g>) -> Result<Var<'g>> {
        let guided = h_i.add(self.ca_i.forward(ps, h_f, h_i)?)?;
        self.image.decode(ps, guided)
    }

    /// `(L_f, L_i, γ_F·L_f + γ_I·L_i)` for a fixed paired batch and masks.
    pub fn loss<'g>(
        &self,
        ps: &ParamStore,
        g: &'g Graph,
        voxels: &Tensor,
        images: &Tensor,
        masks: &PairMasks,
    ) -> Result<(Var<'g>, Var<'g>, Var<'g>)> {
        let (v, u) = (g.constant(voxels), g.constant(images));
        let (h_f, h_i) = self.latents(ps, v, u, masks)?;
        let v_d = self.reconstruct_fmri_guided(ps, h_f, h_i)?;
        let u_d = self.reconstruct_image_guided(ps, h_i, h_f)?;
        let (wf, wi) = if self.config.masked_only {
            (Some(self.fmri_weights(masks, voxels)?), Some(self.image_weights(masks, images)?))
        } else {
            (None, None)
        };
        let l_f = mse(v_d, v, wf.as_ref())?;
        let l_i = mse(u_d, u, wi.as_ref())?;
        let total = l_f.scale(self.config.gamma_f)?.add(l_i.scale(self.config.gamma_i)?)?;
        Ok((l_f, l_i, total))
    }

    fn fmri_weights(&self, masks: &PairMasks, voxels: &Tensor) -> Result<Tensor> {
        let (n, p) = (voxels.shape()[1], self.fmri.config.patch);
        let mut w = Vec::with_capacity(voxels.numel());
        for plan in &masks.fmri {
            let ind = plan.indicator();
            w.extend((0..n).map(|i| f64::from(u8::from(ind[i / p]))));
        }
        Tensor::new(voxels.shape().to_vec(), w)
    }

    fn image_weights(&self, masks: &PairMasks, images: &Tensor) -> Result<Tensor> {
        let c = &self.image.config;
        let (s, p, ch) = (c.image_size, c.patch, c.channels);
        let grid = s / p;
        let mut w = Vec::with_capacity(images.numel());
        for plan in &masks.image {
            let ind = plan.indicator();
            for i in 0..s * s * ch {
                let (y, x) = (i / ch / s, i / ch % s);
                w.push(f64::from(u8::from(ind[(y / p) * grid + x / p])));
            }
        }
        Tensor::new(images.shape().to_vec(), w)
    }

    /// One optimizer step on a paired batch with fresh masks.
    pub fn step<R: Rng + ?Sized>(
        &self,
        ps: &mut ParamStore,
        opt: &mut AdamW,
        voxels: &Tensor,
        images: &Tensor,
        lr: f64,
        rng: &mut R,
    ) -> Result<Phase2Losses> {
        let masks = PairMasks::draw(self, voxels.shape()[0], rng)?;
        let g = Graph::new().with_frozen(self.frozen(ps));
        let (l_f, l_i, total) = self.loss(ps, &g, voxels, images, &masks)?;
        let losses = Phase2Losses {
            l_f: l_f.item()?,
            l_i: l_i.item()?,
            total: total.item()?,
        };
        ensure_finite(
            "phase-2 loss",
            &[("L_f", losses.l_f), ("L_i", losses.l_i), ("L", losses.total)],
        )?;
        ps.zero_grad();
        g.backward_into(total, ps)?;
        opt.step(ps, lr)?;
        ps.zero_grad();
        Ok(losses)
    }
}

/// Named Phase-2 ablation settings.
pub fn preset(name: &str) -> Option<XModalConfig> {
    let base = XModalConfig::default();
    match name {
        "table2-id6" => Some(XModalConfig {
            gamma_f: 0.25,
            gamma_i: 1.5,
            ..base
        }),
        "table2-best-mask" => Some(XModalConfig {
            fmri_mask_ratio: 0.75,
            image_mask_ratio: 0.5,
            ..base
        }),
        _ => None,
    }
}
