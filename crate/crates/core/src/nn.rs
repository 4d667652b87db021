//! Transformer and convolution building blocks.
//!
//! Modules only hold [`ParamId`]s; weights live in a [`ParamStore`] and are
//! bound into a graph on each forward call, so the same module can run in a
//! training graph and an inference graph.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Binds `id` into the graph that owns `like`.
fn bind<'g>(like: Var<'g>, ps: &ParamStore, id: ParamId) -> Var<'g> {
    like.graph().param(ps, id)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub patch_size: usize,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("transformer depth must be at least 1"));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.patch_size == 0 || self.mlp_ratio <= 0.0 {
            return Err(Error::config("patch size and mlp ratio must be positive"));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        ((self.dim as f64) * self.mlp_ratio).round() as usize
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (in_dim as f64).sqrt();
        Self::with_std(ps, name, in_dim, out_dim, std, rng)
    }

    pub fn with_std<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = ps.add(
            format!("{name}.weight"),
            Tensor::randn([in_dim, out_dim], std, rng),
        )?;
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros([out_dim]))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// `x · W + b` over the last axis of `x`.
    pub fn forward<'g>(&self, ps: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        x.matmul(bind(x, ps, self.weight))?
            .add_bcast(bind(x, ps, self.bias))
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.add(format!("{name}.gamma"), Tensor::ones([dim]))?,
            beta: ps.add(format!("{name}.beta"), Tensor::zeros([dim]))?,
        })
    }

    pub fn forward<'g>(&self, ps: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        x.layer_norm(bind(x, ps, self.gamma), bind(x, ps, self.beta), Self::EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, hidden, rng)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, dim, rng)?,
        })
    }

    pub fn forward<'g>(&self, ps: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        self.fc2.forward(ps, self.fc1.forward(ps, x)?.gelu()?)
    }
}

/// Multi-head self-attention over `[B, T, D]` tokens.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub heads: usize,
}

/// `[B, T, D] -> [B·H, T, D/H]`
fn split_heads(x: Var<'_>, heads: usize) -> Result<Var<'_>> {
    let s = x.shape();
    let (b, t, d) = (s[0], s[1], s[2]);
    if heads == 1 {
        return Ok(x);
    }
    x.reshape([b, t, heads, d / heads])?
        .permute(&[0, 2, 1, 3])?
        .reshape([b * heads, t, d / heads])
}

/// `[B·H, T, Dh] -> [B, T, H·Dh]`
fn merge_heads(x: Var<'_>, heads: usize) -> Result<Var<'_>> {
    if heads == 1 {
        return Ok(x);
    }
    let s = x.shape();
    let (bh, t, dh) = (s[0], s[1], s[2]);
    x.reshape([bh / heads, heads, t, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape([bh / heads, t, heads * dh])
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::new(ps, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(ps, &format!("{name}.v"), dim, dim, rng)?,
            proj: Linear::new(ps, &format!("{name}.proj"), dim, dim, rng)?,
            heads,
        })
    }

    pub fn forward<'g>(&self, ps: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let dim = x.shape()[2];
        let scale = 1.0 / ((dim / self.heads) as f64).sqrt();
        let q = split_heads(self.q.forward(ps, x)?, self.heads)?;
        let k = split_heads(self.k.forward(ps, x)?, self.heads)?;
        let v = split_heads(self.v.forward(ps, x)?, self.heads)?;
        let attn = q.bmm(k, true)?.scale(scale)?.softmax()?;
        let out = merge_heads(attn.bmm(v, false)?, self.heads)?;
        self.proj.forward(ps, out)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        cfg: &TransformerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), cfg.dim)?,
            attn: SelfAttention::new(ps, &format!("{name}.attn"), cfg.dim, cfg.heads, rng)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), cfg.dim)?,
            mlp: Mlp::new(ps, &format!("{name}.mlp"), cfg.dim, cfg.hidden(), rng)?,
        })
    }

    pub fn forward<'g>(&self, ps: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let x = x.add(self.attn.forward(ps, self.ln1.forward(ps, x)?)?)?;
        x.add(self.mlp.forward(ps, self.ln2.forward(ps, x)?)?)
    }
}

/// A stack of blocks followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct TransformerStack {
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
}

impl TransformerStack {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        cfg: &TransformerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(ps, &format!("{name}.blocks.{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            norm: LayerNorm::new(ps, &format!("{name}.norm"), cfg.dim)?,
        })
    }

    pub fn forward<'g>(&self, ps: &ParamStore, mut x: Var<'g>) -> Result<Var<'g>> {
        for b in &self.blocks {
            x = b.forward(ps, x)?;
        }
        self.norm.forward(ps, x)
    }
}

/// Tokenizes a voxel vector with a stride-`patch` 1-D convolution whose
/// kernel equals its stride, then adds learned positional embeddings.
#[derive(Clone, Debug)]
pub struct PatchEmbed1d {
    pub proj: Linear,
    pub pos: ParamId,
    pub patch: usize,
    pub n_voxels: usize,
}

impl PatchEmbed1d {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        n_voxels: usize,
        patch: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_voxels == 0 || patch == 0 {
            return Err(Error::config("patch embedding needs voxels and a patch size"));
        }
        let tokens = n_voxels.div_ceil(patch);
        Ok(Self {
            proj: Linear::new(ps, &format!("{name}.proj"), patch, dim, rng)?,
            pos: ps.add(format!("{name}.pos"), Tensor::randn([tokens, dim], 0.02, rng))?,
            patch,
            n_voxels,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.n_voxels.div_ceil(self.patch)
    }

    /// Zero padding appended so the voxel count divides the patch size.
    pub fn padding(&self) -> usize {
        self.num_tokens() * self.patch - self.n_voxels
    }

    /// Convolution output before positional embeddings: `[B, N] -> [B, T, D]`.
    pub fn tokens<'g>(&self, ps: &ParamStore, voxels: Var<'g>) -> Result<Var<'g>> {
        let s = voxels.shape();
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::contract(format!(
                "fMRI patch embedding needs a non-empty [batch, voxels] input, got {s:?}"
            )));
        }
        if s[1] != self.n_voxels {
            return Err(Error::Shape {
                op: "patch_embed_fmri",
                lhs: s,
                rhs: vec![self.n_voxels],
            });
        }
        let b = s[0];
        let padded = if self.padding() > 0 {
            let zeros = voxels
                .graph()
                .constant(&Tensor::zeros([b, self.padding()]));
            voxels.concat_last(zeros)?
        } else {
            voxels
        };
        let patches = padded.reshape([b, self.num_tokens(), self.patch])?;
        self.proj.forward(ps, patches)
    }

    pub fn forward<'g>(&self, ps: &ParamStore, voxels: Var<'g>) -> Result<Var<'g>> {
        let t = self.tokens(ps, voxels)?;
        t.add_bcast(bind(t, ps, self.pos))
    }
}

/// Splits an NHWC image batch into flattened non-overlapping patches:
/// `[B, H, W, C] -> [B, (H/p)·(W/p), p·p·C]`.
pub fn patchify_image(x: Var<'_>, patch: usize) -> Result<Var<'_>> {
    let s = x.shape();
    if s.len() != 4 || !s[1].is_multiple_of(patch) || !s[2].is_multiple_of(patch) {
        return Err(Error::Shape {
            op: "patchify_image",
            lhs: s,
            rhs: vec![patch],
        });
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / patch, w / patch);
    x.reshape([b, gh, patch, gw, patch, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape([b, gh * gw, patch * patch * c])
}

/// Inverse of [`patchify_image`].
pub fn unpatchify_image(x: Var<'_>, patch: usize, h: usize, w: usize) -> Result<Var<'_>> {
    let s = x.shape();
    let (gh, gw) = (h / patch, w / patch);
    if s.len() != 3 || s[1] != gh * gw || !s[2].is_multiple_of(patch * patch) {
        return Err(Error::Shape {
            op: "unpatchify_image",
            lhs: s,
            rhs: vec![patch, h, w],
        });
    }
    let (b, c) = (s[0], s[2] / (patch * patch));
    x.reshape([b, gh, gw, patch, patch, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape([b, h, w, c])
}

#[derive(Clone, Debug)]
pub struct PatchEmbed2d {
    pub proj: Linear,
    pub pos: ParamId,
    pub patch: usize,
    pub image_size: usize,
    pub channels: usize,
}

impl PatchEmbed2d {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        image_size: usize,
        channels: usize,
        patch: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if patch == 0 || !image_size.is_multiple_of(patch) {
            return Err(Error::config(format!(
                "image size {image_size} is not divisible by patch {patch}"
            )));
        }
        let tokens = (image_size / patch).pow(2);
        Ok(Self {
            proj: Linear::new(ps, &format!("{name}.proj"), patch * patch * channels, dim, rng)?,
            pos: ps.add(format!("{name}.pos"), Tensor::randn([tokens, dim], 0.02, rng))?,
            patch,
            image_size,
            channels,
        })
    }

    pub fn num_tokens(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn forward<'g>(&self, ps: &ParamStore, images: Var<'g>) -> Result<Var<'g>> {
        let t = self.proj.forward(ps, patchify_image(images, self.patch)?)?;
        t.add_bcast(bind(t, ps, self.pos))
    }
}

/// Projection weights of one cross-attention module: queries come from one
/// token set, keys and values from another.
#[derive(Clone, Debug)]
pub struct CrossAttentionParams {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub d_k: usize,
}

impl CrossAttentionParams {
    /// `q_width -> d_k` for queries, `kv_width -> d_k` for keys and
    /// `kv_width -> d_v` for values.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        q_width: usize,
        kv_width: usize,
        d_k: usize,
        d_v: usize,
        init_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w_q: Linear::with_std(ps, &format!("{name}.w_q"), q_width, d_k, init_std, rng)?,
            w_k: Linear::with_std(ps, &format!("{name}.w_k"), kv_width, d_k, init_std, rng)?,
            w_v: Linear::with_std(ps, &format!("{name}.w_v"), kv_width, d_v, init_std, rng)?,
            d_k,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [&self.w_q, &self.w_k, &self.w_v]
            .iter()
            .flat_map(|l| l.ids())
            .collect()
    }

    /// Attention weights `softmax(Q Kᵀ / √d_k)`: `[B, Tq, Tk]`.
    pub fn weights<'g>(&self, ps: &ParamStore, q_side: Var<'g>, kv_side: Var<'g>) -> Result<Var<'g>> {
        let (qs, ks) = (q_side.shape(), kv_side.shape());
        if ks.len() != 3 || ks[1] == 0 {
            return Err(Error::contract(format!(
                "cross-attention needs at least one key/value token, got {ks:?}"
            )));
        }
        if qs.len() != 3 || qs[0] != ks[0] || qs[2] != self.w_q.in_dim || ks[2] != self.w_k.in_dim {
            return Err(Error::Shape {
                op: "cross_attention",
                lhs: qs,
                rhs: ks,
            });
        }
        let q = self.w_q.forward(ps, q_side)?;
        let k = self.w_k.forward(ps, kv_side)?;
        q.bmm(k, true)?
            .scale(1.0 / (self.d_k as f64).sqrt())?
            .softmax()
    }

    /// `CA(Q, K, V) = softmax(Q Kᵀ / √d_k) V`, one output row per query token.
    pub fn forward<'g>(&self, ps: &ParamStore, q_side: Var<'g>, kv_side: Var<'g>) -> Result<Var<'g>> {
        let attn = self.weights(ps, q_side, kv_side)?;
        let v = self.w_v.forward(ps, kv_side)?;
        attn.bmm(v, false)
    }
}

/// Sinusoidal embedding of a diffusion step: `dim/2` sines followed by
/// `dim/2` cosines at geometrically spaced frequencies.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Sinusoidal features followed by a learned two-layer MLP.
#[derive(Clone, Debug)]
pub struct TimeEmbedding {
    pub fc1: Linear,
    pub fc2: Linear,
    pub freq_dim: usize,
    pub max_t: usize,
}

impl TimeEmbedding {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        freq_dim: usize,
        dim: usize,
        max_t: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), freq_dim, dim, rng)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), dim, dim, rng)?,
            freq_dim,
            max_t,
        })
    }

    pub fn sinusoid(&self, steps: &[usize]) -> Result<Tensor> {
        if let Some(&bad) = steps.iter().find(|&&t| t > self.max_t) {
            return Err(Error::contract(format!(
                "time step {bad} outside [0, {}]",
                self.max_t
            )));
        }
        let data = steps
            .iter()
            .flat_map(|&t| sinusoidal_embedding(t, self.freq_dim))
            .collect();
        Tensor::new([steps.len(), self.freq_dim], data)
    }

    /// `[B] steps -> [B, dim]`
    pub fn forward<'g>(&self, ps: &ParamStore, g: &'g crate::Graph, steps: &[usize]) -> Result<Var<'g>> {
        let s = g.constant(&self.sinusoid(steps)?);
        self.fc2.forward(ps, self.fc1.forward(ps, s)?.silu()?)
    }
}

/// 2-D convolution over NHWC tensors via patch extraction and a matmul.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = kernel * kernel * in_ch;
        Ok(Self {
            weight: ps.add(
                format!("{name}.weight"),
                Tensor::randn([fan_in, out_ch], 1.0 / (fan_in as f64).sqrt(), rng),
            )?,
            bias: ps.add(format!("{name}.bias"), Tensor::zeros([out_ch]))?,
            kernel,
            stride,
            pad,
            in_ch,
            out_ch,
        })
    }

    /// 3×3, stride 1, same padding.
    pub fn same<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, rng: &mut R) -> Result<Self> {
        Self::new(ps, name, in_ch, out_ch, 3, 1, 1, rng)
    }

    pub fn forward<'g>(&self, ps: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        if s.len() != 4 || s[3] != self.in_ch {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: s,
                rhs: vec![self.in_ch, self.out_ch],
            });
        }
        let ho = (s[1] + 2 * self.pad - self.kernel) / self.stride + 1;
        let wo = (s[2] + 2 * self.pad - self.kernel) / self.stride + 1;
        let cols = if self.kernel == 1 && self.stride == 1 && self.pad == 0 {
            x.reshape([s[0] * s[1] * s[2], s[3]])?
        } else {
            x.im2col(self.kernel, self.stride, self.pad)?
        };
        cols.matmul(bind(x, ps, self.weight))?
            .add_bcast(bind(x, ps, self.bias))?
            .reshape([s[0], ho, wo, self.out_ch])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::gradcheck::{grad_check, loss_fn, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn config_validation() {
        let mut cfg = TransformerConfig {
            depth: 2,
            dim: 64,
            heads: 4,
            mlp_ratio: 4.0,
            patch_size: 16,
        };
        assert!(cfg.validate().is_ok());
        cfg.heads = 5;
        assert!(cfg.validate().is_err());
        cfg.heads = 4;
        cfg.depth = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fmri_patch_embedding_geometry_and_linearity() {
        let mut ps = ParamStore::new();
        let pe = PatchEmbed1d::new(&mut ps, "pe", 1024, 16, 8, &mut rng(1)).unwrap();
        assert_eq!(pe.num_tokens(), 64);
        let g = Graph::new();
        let zeros = g.constant(&Tensor::zeros([1, 1024]));
        let out = pe.forward(&ps, zeros).unwrap();
        assert_eq!(out.shape(), vec![1, 64, 8]);
        assert_eq!(out.to_vec(), ps.get(pe.pos).data());

        let v = Tensor::randn([2, 1024], 1.0, &mut rng(2));
        let doubled = Tensor::from_fn([2, 1024], |i| 2.0 * v.data()[i]);
        let a = pe.tokens(&ps, g.constant(&v)).unwrap().to_vec();
        let b = pe.tokens(&ps, g.constant(&doubled)).unwrap().to_vec();
        for (x, y) in a.iter().zip(&b) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
        let empty = g.constant(&Tensor::zeros([1, 0]));
        assert!(matches!(pe.forward(&ps, empty), Err(Error::Contract(_))));
    }

    #[test]
    fn fmri_patch_embedding_pads() {
        let mut ps = ParamStore::new();
        let pe = PatchEmbed1d::new(&mut ps, "pe", 40, 16, 4, &mut rng(3)).unwrap();
        assert_eq!(pe.num_tokens(), 3);
        assert_eq!(pe.padding(), 8);
        let g = Graph::new();
        let out = pe.forward(&ps, g.constant(&Tensor::ones([2, 40]))).unwrap();
        assert_eq!(out.shape(), vec![2, 3, 4]);
    }

    #[test]
    fn image_patchify_round_trip() {
        let x = Tensor::randn([2, 8, 8, 3], 1.0, &mut rng(4));
        let g = Graph::new();
        let p = patchify_image(g.constant(&x), 4).unwrap();
        assert_eq!(p.shape(), vec![2, 4, 48]);
        // first patch, second row of pixels starts at image row 1
        assert_eq!(p.to_vec()[12], x.data()[8 * 3]);
        let back = unpatchify_image(p, 4, 8, 8).unwrap();
        assert_eq!(back.to_vec(), x.data());
    }

    fn scalar_cross_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], d_k: usize) -> Vec<Vec<f64>> {
        q.iter()
            .map(|qi| {
                let logits: Vec<f64> = k
                    .iter()
                    .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (d_k as f64).sqrt())
                    .collect();
                let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                (0..v[0].len())
                    .map(|c| e.iter().zip(v).map(|(w, vj)| w / z * vj[c]).sum())
                    .collect()
            })
            .collect()
    }

    fn project(x: &Tensor, ps: &ParamStore, l: &Linear) -> Vec<Vec<f64>> {
        let w = ps.get(l.weight);
        let b = ps.get(l.bias);
        let rows = x.numel() / l.in_dim;
        (0..rows)
            .map(|r| {
                (0..l.out_dim)
                    .map(|o| {
                        b.data()[o]
                            + (0..l.in_dim)
                                .map(|i| x.data()[r * l.in_dim + i] * w.data()[i * l.out_dim + o])
                                .sum::<f64>()
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn cross_attention_matches_scalar_oracle() {
        let mut ps = ParamStore::new();
        let mut r = rng(5);
        let ca = CrossAttentionParams::new(&mut ps, "ca", 5, 6, 4, 3, 0.5, &mut r).unwrap();
        for id in ca.ids() {
            let n = ps.get(id).numel();
            ps.get_mut(id).data_mut().copy_from_slice(Tensor::randn([n], 0.5, &mut r).data());
        }
        let qx = Tensor::randn([1, 3, 5], 1.0, &mut r);
        let kx = Tensor::randn([1, 4, 6], 1.0, &mut r);
        let g = Graph::new();
        let out = ca.forward(&ps, g.constant(&qx), g.constant(&kx)).unwrap();
        assert_eq!(out.shape(), vec![1, 3, 3]);
        let expect = scalar_cross_attention(
            &project(&qx, &ps, &ca.w_q),
            &project(&kx, &ps, &ca.w_k),
            &project(&kx, &ps, &ca.w_v),
            4,
        );
        let got = out.to_vec();
        for i in 0..3 {
            for c in 0..3 {
                assert!((got[i * 3 + c] - expect[i][c]).abs() < 1e-10);
            }
        }
        let w = ca.weights(&ps, g.constant(&qx), g.constant(&kx)).unwrap().to_vec();
        for row in w.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cross_attention_degenerate_cases() {
        let mut ps = ParamStore::new();
        let mut r = rng(6);
        let ca = CrossAttentionParams::new(&mut ps, "ca", 3, 3, 3, 3, 0.5, &mut r).unwrap();
        let g = Graph::new();
        let q = g.constant(&Tensor::randn([1, 4, 3], 1.0, &mut r));
        let single = Tensor::randn([1, 1, 3], 1.0, &mut r);
        let out = ca.forward(&ps, q, g.constant(&single)).unwrap().to_vec();
        let v = ca.w_v.forward(&ps, g.constant(&single)).unwrap().to_vec();
        for row in out.chunks(3) {
            assert_eq!(row, v.as_slice());
        }
        // identical keys: uniform weights, output is the mean of value rows
        let same = Tensor::from_fn([1, 3, 3], |i| [0.3, -1.0, 2.0][i % 3]);
        let w = ca.weights(&ps, q, g.constant(&same)).unwrap().to_vec();
        assert!(w.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-12));
        let empty = g.constant(&Tensor::zeros([1, 0, 3]));
        assert!(matches!(ca.forward(&ps, q, empty), Err(Error::Contract(_))));
    }

    #[test]
    fn transformer_block_shape_and_equivariance() {
        let cfg = TransformerConfig {
            depth: 1,
            dim: 8,
            heads: 2,
            mlp_ratio: 2.0,
            patch_size: 1,
        };
        let mut ps = ParamStore::new();
        let block = TransformerBlock::new(&mut ps, "b", &cfg, &mut rng(7)).unwrap();
        let x = Tensor::randn([1, 5, 8], 1.0, &mut rng(8));
        let perm = [3, 0, 4, 1, 2];
        let xp = Tensor::from_fn([1, 5, 8], |i| x.data()[perm[i / 8] * 8 + i % 8]);
        let g = Graph::new();
        let y = block.forward(&ps, g.constant(&x)).unwrap();
        assert_eq!(y.shape(), vec![1, 5, 8]);
        let yp = block.forward(&ps, g.constant(&xp)).unwrap().to_vec();
        let y = y.to_vec();
        for t in 0..5 {
            for c in 0..8 {
                assert!((yp[t * 8 + c] - y[perm[t] * 8 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_layer_stack_gradient_check() {
        let cfg = TransformerConfig {
            depth: 2,
            dim: 8,
            heads: 2,
            mlp_ratio: 2.0,
            patch_size: 1,
        };
        let mut ps = ParamStore::new();
        let mut r = rng(9);
        let stack = TransformerStack::new(&mut ps, "s", &cfg, &mut r).unwrap();
        let x = Tensor::randn([2, 3, 8], 1.0, &mut r);
        let w = Tensor::randn([2, 3, 8], 1.0, &mut r);
        let f = loss_fn(|g: &Graph, ps: &ParamStore| {
            stack.forward(ps, g.constant(&x))?.mul_const(&w)?.sum()
        });
        let ids: Vec<_> = ps.ids().collect();
        let report = grad_check(&f, &ps, &ids, &GradCheckOptions::default()).unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }

    #[test]
    fn time_embedding_properties() {
        let s = sinusoidal_embedding(0, 8);
        assert_eq!(s, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let embs: Vec<Vec<f64>> = (0..=1000).map(|t| sinusoidal_embedding(t, 64)).collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let d: f64 = embs[i].iter().zip(&embs[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 1e-6, "steps {i} and {j} collide");
            }
        }
        let mut ps = ParamStore::new();
        let te = TimeEmbedding::new(&mut ps, "t", 16, 8, 1000, &mut rng(10)).unwrap();
        let g = Graph::new();
        let a = te.forward(&ps, &g, &[5, 5]).unwrap().to_vec();
        assert_eq!(a[..8], a[8..]);
        assert!(te.forward(&ps, &g, &[1001]).is_err());
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut ps = ParamStore::new();
        let mut r = rng(11);
        let conv = Conv2d::new(&mut ps, "c", 2, 3, 3, 2, 1, &mut r).unwrap();
        let bias = Tensor::randn([3], 1.0, &mut r);
        ps.get_mut(conv.bias).data_mut().copy_from_slice(bias.data());
        let x = Tensor::randn([1, 5, 5, 2], 1.0, &mut r);
        let g = Graph::new();
        let y = conv.forward(&ps, g.constant(&x)).unwrap();
        assert_eq!(y.shape(), vec![1, 3, 3, 3]);
        let w = ps.get(conv.weight).data();
        let yv = y.to_vec();
        for oy in 0..3 {
            for ox in 0..3 {
                for o in 0..3 {
                    let mut acc = bias.data()[o];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if !(0..5).contains(&iy) || !(0..5).contains(&ix) {
                                continue;
                            }
                            for c in 0..2 {
                                let xi = (iy as usize * 5 + ix as usize) * 2 + c;
                                let wi = ((ky * 3 + kx) * 2 + c) * 3 + o;
                                acc += x.data()[xi] * w[wi];
                            }
                        }
                    }
                    assert!((yv[(oy * 3 + ox) * 3 + o] - acc).abs() < 1e-12);
                }
            }
        }
    }
}
