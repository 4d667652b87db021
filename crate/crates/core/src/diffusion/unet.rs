//! A compact UNet noise predictor with cross-attention conditioning at two
//! resolutions and the condition added to the time embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sampler::NoisePredictor;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, CrossAttentionParams, LayerNorm, Linear, TimeEmbedding};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DENOISER_PREFIX: &str = "ldm.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub latent_size: usize,
    pub latent_channels: usize,
    /// Channels at full latent resolution; doubled after downsampling.
    pub base_channels: usize,
    pub time_dim: usize,
    pub freq_dim: usize,
    /// Width of conditioning tokens (fMRI encoder width).
    pub cond_dim: usize,
    /// Classes of the label-conditioned pretraining stage.
    pub n_classes: usize,
    pub diffusion_steps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_size: 8,
            latent_channels: 4,
            base_channels: 32,
            time_dim: 64,
            freq_dim: 32,
            cond_dim: 64,
            n_classes: 10,
            diffusion_steps: 1000,
        }
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: LayerNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: LayerNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, tdim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), cin)?,
            conv1: Conv2d::same(ps, &format!("{name}.conv1"), cin, cout, rng)?,
            temb: Linear::new(ps, &format!("{name}.temb"), tdim, cout, rng)?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), cout)?,
            conv2: Conv2d::same(ps, &format!("{name}.conv2"), cout, cout, rng)?,
            skip: if cin == cout {
                None
            } else {
                Some(Conv2d::new(ps, &format!("{name}.skip"), cin, cout, 1, 1, 0, rng)?)
            },
        })
    }

    fn forward<'g>(&self, ps: &ParamStore, x: Var<'g>, temb: Var<'g>) -> Result<Var<'g>> {
        let h = self.conv1.forward(ps, self.norm1.forward(ps, x)?.silu()?)?;
        let h = h.add_per_batch(self.temb.forward(ps, temb.silu()?)?)?;
        let h = self.conv2.forward(ps, self.norm2.forward(ps, h)?.silu()?)?;
        let base = match &self.skip {
            Some(s) => s.forward(ps, x)?,
            None => x,
        };
        base.add(h)
    }
}

/// Spatial positions attend over conditioning tokens; residual update.
#[derive(Clone, Debug)]
struct XAttnBlock {
    norm: LayerNorm,
    ca: CrossAttentionParams,
    out: Linear,
}

impl XAttnBlock {
    fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, ch: usize, cond: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(ps, &format!("{name}.norm"), ch)?,
            ca: CrossAttentionParams::new(ps, &format!("{name}.ca"), ch, cond, ch, ch, 1.0 / (cond as f64).sqrt(), rng)?,
            out: Linear::new(ps, &format!("{name}.out"), ch, ch, rng)?,
        })
    }

    fn forward<'g>(&self, ps: &ParamStore, x: Var<'g>, ctx: Var<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        let tokens = x.reshape([s[0], s[1] * s[2], s[3]])?;
        let q = self.norm.forward(ps, tokens)?;
        let h = self.out.forward(ps, self.ca.forward(ps, q, ctx)?)?;
        x.add(h.reshape(s)?)
    }
}

/// What the denoiser is conditioned on.
#[derive(Clone, Copy)]
pub enum Conditioning<'a, 'g> {
    /// Class labels, embedded as a single token each (label-to-image pretraining).
    Class(&'a [usize]),
    /// `[B, L, cond_dim]` tokens, e.g. fMRI encoder output.
    Tokens(Var<'g>),
}

/// `ε_θ(z_t, t, c)`
#[derive(Clone, Debug)]
pub struct CondDenoiser {
    pub config: DenoiserConfig,
    time: TimeEmbedding,
    cond_proj: Linear,
    class_embed: ParamId,
    conv_in: Conv2d,
    down_res: ResBlock,
    down_xattn: XAttnBlock,
    downsample: Conv2d,
    mid_res1: ResBlock,
    mid_xattn: XAttnBlock,
    mid_res2: ResBlock,
    up_conv: Conv2d,
    up_res: ResBlock,
    up_xattn: XAttnBlock,
    out_norm: LayerNorm,
    conv_out: Conv2d,
}

impl CondDenoiser {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, config: &DenoiserConfig, rng: &mut R) -> Result<Self> {
        let c = config;
        if !c.latent_size.is_multiple_of(2) || c.latent_size == 0 {
            return Err(Error::config("denoiser latent size must be even"));
        }
        let (c1, c2, td) = (c.base_channels, 2 * c.base_channels, c.time_dim);
        let conv_out = Conv2d::same(ps, "ldm.conv_out", c1, c.latent_channels, rng)?;
        // zero output layer: an untrained denoiser predicts no noise
        ps.get_mut(conv_out.weight).data_mut().fill(0.0);
        Ok(Self {
            config: c.clone(),
            time: TimeEmbedding::new(ps, "ldm.time", c.freq_dim, td, c.diffusion_steps, rng)?,
            cond_proj: Linear::new(ps, "ldm.cond_proj", c.cond_dim, td, rng)?,
            class_embed: ps.add("ldm.class_embed", Tensor::randn([c.n_classes.max(1), c.cond_dim], 1.0, rng))?,
            conv_in: Conv2d::same(ps, "ldm.conv_in", c.latent_channels, c1, rng)?,
            down_res: ResBlock::new(ps, "ldm.down.res", c1, c1, td, rng)?,
            down_xattn: XAttnBlock::new(ps, "ldm.down.xattn", c1, c.cond_dim, rng)?,
            downsample: Conv2d::new(ps, "ldm.down.sample", c1, c2, 3, 2, 1, rng)?,
            mid_res1: ResBlock::new(ps, "ldm.mid.res1", c2, c2, td, rng)?,
            mid_xattn: XAttnBlock::new(ps, "ldm.mid.xattn", c2, c.cond_dim, rng)?,
            mid_res2: ResBlock::new(ps, "ldm.mid.res2", c2, c2, td, rng)?,
            up_conv: Conv2d::same(ps, "ldm.up.conv", c2, c1, rng)?,
            up_res: ResBlock::new(ps, "ldm.up.res", 2 * c1, c1, td, rng)?,
            up_xattn: XAttnBlock::new(ps, "ldm.up.xattn", c1, c.cond_dim, rng)?,
            out_norm: LayerNorm::new(ps, "ldm.out_norm", c1)?,
            conv_out,
        })
    }

    /// Conditioning tokens `[B, L, cond_dim]` for the given conditioning.
    pub fn context<'g>(&self, ps: &ParamStore, g: &'g Graph, cond: Conditioning<'_, 'g>) -> Result<Var<'g>> {
        match cond {
            Conditioning::Tokens(t) => {
                let s = t.shape();
                if s.len() != 3 || s[2] != self.config.cond_dim {
                    return Err(Error::Shape {
                        op: "denoiser_context",
                        lhs: s,
                        rhs: vec![self.config.cond_dim],
                    });
                }
                Ok(t)
            }
            Conditioning::Class(labels) => {
                let n = self.config.n_classes;
                if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
                    return Err(Error::contract(format!("class {bad} outside [0, {n})")));
                }
                let onehot = Tensor::from_fn([labels.len(), n], |i| f64::from(u8::from(labels[i / n] == i % n)));
                g.constant(&onehot)
                    .matmul(g.param(ps, self.class_embed))?
                    .reshape([labels.len(), 1, self.config.cond_dim])
            }
        }
    }

    /// Predicted noise for latents `z` (`[B, S, S, C]`) at per-row steps `t`.
    pub fn forward<'g>(&self, ps: &ParamStore, z: Var<'g>, t: &[usize], ctx: Var<'g>) -> Result<Var<'g>> {
        let g = z.graph();
        let s = z.shape();
        let c = &self.config;
        if s != [t.len(), c.latent_size, c.latent_size, c.latent_channels] || ctx.shape()[0] != t.len() {
            return Err(Error::Shape {
                op: "denoiser",
                lhs: s,
                rhs: ctx.shape(),
            });
        }
        let temb = self
            .time
            .forward(ps, g, t)?
            .add(self.cond_proj.forward(ps, ctx.mean_axis1()?)?)?;
        let h0 = self.conv_in.forward(ps, z)?;
        let h1 = self.down_res.forward(ps, h0, temb)?;
        let h1 = self.down_xattn.forward(ps, h1, ctx)?;
        let h2 = self.downsample.forward(ps, h1)?;
        let h2 = self.mid_res1.forward(ps, h2, temb)?;
        let h2 = self.mid_xattn.forward(ps, h2, ctx)?;
        let h2 = self.mid_res2.forward(ps, h2, temb)?;
        let up = self.up_conv.forward(ps, h2.upsample2x()?)?;
        let h3 = self.up_res.forward(ps, up.concat_last(h1)?, temb)?;
        let h3 = self.up_xattn.forward(ps, h3, ctx)?;
        self.conv_out.forward(ps, self.out_norm.forward(ps, h3)?.silu()?)
    }

    /// Parameters of the cross-attention blocks and the condition projection.
    pub fn conditioning_ids(&self, ps: &ParamStore) -> Vec<ParamId> {
        ps.ids_with_prefix(DENOISER_PREFIX)
            .filter(|&id| {
                let name = ps.name(id);
                name.contains(".xattn.") || name.starts_with("ldm.cond_proj.")
            })
            .collect()
    }

    /// Weights that map conditioning tokens into the network: cross-attention
    /// key/value projections and the time-embedding projection.
    pub fn conditioning_inputs(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.cond_proj.ids().to_vec();
        for b in [&self.down_xattn, &self.mid_xattn, &self.up_xattn] {
            ids.extend(b.ca.w_k.ids());
            ids.extend(b.ca.w_v.ids());
        }
        ids
    }

    /// Binds fixed conditioning tokens for sampling.
    pub fn with_context<'a>(&'a self, ps: &'a ParamStore, context: Tensor) -> Conditioned<'a> {
        Conditioned {
            denoiser: self,
            ps,
            context,
        }
    }
}

/// A denoiser with fixed conditioning tokens, usable by the samplers.
pub struct Conditioned<'a> {
    denoiser: &'a CondDenoiser,
    ps: &'a ParamStore,
    context: Tensor,
}

impl NoisePredictor for Conditioned<'_> {
    fn predict_noise(&self, z: &Tensor, t: usize) -> Result<Tensor> {
        let g = Graph::inference();
        let steps = vec![t; z.shape()[0]];
        let out = self
            .denoiser
            .forward(self.ps, g.constant(z), &steps, g.constant(&self.context))?;
        Ok(out.value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, loss_fn, GradCheckOptions};
    use crate::seeded_rng;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            latent_size: 4,
            latent_channels: 2,
            base_channels: 4,
            time_dim: 8,
            freq_dim: 8,
            cond_dim: 6,
            n_classes: 3,
            diffusion_steps: 100,
        }
    }

    fn randomize_output(ps: &mut ParamStore, d: &CondDenoiser, seed: u64) {
        let n = ps.get(d.conv_out.weight).numel();
        let w = Tensor::randn([n], 0.3, &mut seeded_rng(seed, 0));
        ps.get_mut(d.conv_out.weight).data_mut().copy_from_slice(w.data());
    }

    #[test]
    fn output_shape_and_zero_init() {
        let mut ps = ParamStore::new();
        let d = CondDenoiser::new(&mut ps, &tiny(), &mut seeded_rng(1, 0)).unwrap();
        let g = Graph::inference();
        let z = g.constant(&Tensor::randn([2, 4, 4, 2], 1.0, &mut seeded_rng(2, 0)));
        let ctx = d.context(&ps, &g, Conditioning::Class(&[0, 2])).unwrap();
        let out = d.forward(&ps, z, &[3, 50], ctx).unwrap();
        assert_eq!(out.shape(), vec![2, 4, 4, 2]);
        assert!(out.to_vec().iter().all(|&v| v == 0.0));
        assert!(d.context(&ps, &g, Conditioning::Class(&[3])).is_err());
        let wrong = g.constant(&Tensor::zeros([2, 5, 7]));
        assert!(d.context(&ps, &g, Conditioning::Tokens(wrong)).is_err());
    }

    #[test]
    fn zeroed_conditioning_paths_ignore_tokens() {
        let mut ps = ParamStore::new();
        let d = CondDenoiser::new(&mut ps, &tiny(), &mut seeded_rng(3, 0)).unwrap();
        randomize_output(&mut ps, &d, 4);
        for id in d.conditioning_inputs() {
            ps.get_mut(id).data_mut().fill(0.0);
        }
        let mut r = seeded_rng(5, 0);
        let z = Tensor::randn([2, 4, 4, 2], 1.0, &mut r);
        let c1 = Tensor::randn([2, 5, 6], 1.0, &mut r);
        let c2 = Tensor::randn([2, 5, 6], 1.0, &mut r);
        let g = Graph::inference();
        let a = d.forward(&ps, g.constant(&z), &[10, 20], g.constant(&c1)).unwrap().to_vec();
        let b = d.forward(&ps, g.constant(&z), &[10, 20], g.constant(&c2)).unwrap().to_vec();
        assert_eq!(a, b);
        assert!(a.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn conditioning_changes_prediction() {
        let mut ps = ParamStore::new();
        let d = CondDenoiser::new(&mut ps, &tiny(), &mut seeded_rng(6, 0)).unwrap();
        randomize_output(&mut ps, &d, 7);
        let mut r = seeded_rng(8, 0);
        let z = Tensor::randn([1, 4, 4, 2], 1.0, &mut r);
        let g = Graph::inference();
        let a = d.forward(&ps, g.constant(&z), &[10], g.constant(&Tensor::randn([1, 5, 6], 1.0, &mut r))).unwrap();
        let b = d.forward(&ps, g.constant(&z), &[10], g.constant(&Tensor::randn([1, 5, 6], 1.0, &mut r))).unwrap();
        assert!(a.value().max_abs_diff(&b.value()) > 1e-6);
    }

    #[test]
    fn gradient_check_through_both_conditioning_paths() {
        let mut ps = ParamStore::new();
        let d = CondDenoiser::new(&mut ps, &tiny(), &mut seeded_rng(9, 0)).unwrap();
        randomize_output(&mut ps, &d, 10);
        let mut r = seeded_rng(11, 0);
        let z = Tensor::randn([2, 4, 4, 2], 1.0, &mut r);
        let eps = Tensor::randn([2, 4, 4, 2], 1.0, &mut r);
        let tokens = Tensor::randn([2, 3, 6], 1.0, &mut r);
        let tok_id = ps.add("test.tokens", tokens).unwrap();
        let f = loss_fn(|g, ps| {
            let ctx = g.param(ps, tok_id);
            let pred = d.forward(ps, g.constant(&z), &[5, 60], ctx)?;
            pred.sub(g.constant(&eps))?.square()?.mean()
        });
        let ids: Vec<ParamId> = ps.ids().filter(|&id| ps.name(id) != "ldm.class_embed").collect();
        let opts = GradCheckOptions {
            max_coords: 4,
            ..GradCheckOptions::default()
        };
        let report = grad_check(&f, &ps, &ids, &opts).unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }
}
