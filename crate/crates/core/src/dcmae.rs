//! Phase 1: the fMRI masked auto-encoder trained with the double
//! contrastive objective.
//!
//! Every sample is masked twice. Both masked copies go through the same
//! encoder and decoder, and the two full-length decodings feed a
//! cross-contrastive loss (decoding against decoding) and a self-contrastive
//! loss (decoding against the input).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::mask::{draw_mask, random_sparsify, MaskPlan};
use crate::nn::{Linear, PatchEmbed1d, TransformerConfig, TransformerStack};
use crate::optim::AdamW;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DcMaeConfig {
    pub n_voxels: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth_enc: usize,
    pub depth_dec: usize,
    pub dec_dim: usize,
    pub mlp_ratio: f64,
    pub mask_ratio: f64,
    pub tau: f64,
    pub gamma_c: f64,
    pub gamma_s: f64,
    /// Fraction of voxels zeroed as augmentation before masking.
    pub sparsify: f64,
    /// L2-normalize vectors before the contrastive dot products.
    pub normalize: bool,
}

impl Default for DcMaeConfig {
    fn default() -> Self {
        Self {
            n_voxels: 1024,
            patch: 16,
            dim: 64,
            heads: 4,
            depth_enc: 4,
            depth_dec: 2,
            dec_dim: 48,
            mlp_ratio: 2.0,
            mask_ratio: 0.75,
            tau: 0.1,
            gamma_c: 1.0,
            gamma_s: 1.0,
            sparsify: 0.2,
            normalize: false,
        }
    }
}

impl DcMaeConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        self.decoder().validate()?;
        if self.depth_dec >= self.depth_enc {
            return Err(Error::config(format!(
                "decoder depth {} must be below encoder depth {}",
                self.depth_dec, self.depth_enc
            )));
        }
        if self.tau <= 0.0 || !self.tau.is_finite() {
            return Err(Error::config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.gamma_c < 0.0 || self.gamma_s < 0.0 {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) || !(0.0..1.0).contains(&self.sparsify) {
            return Err(Error::config("mask ratio and sparsify fraction must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn encoder(&self) -> TransformerConfig {
        TransformerConfig {
            depth: self.depth_enc,
            dim: self.dim,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            patch_size: self.patch,
        }
    }

    pub fn decoder(&self) -> TransformerConfig {
        TransformerConfig {
            depth: self.depth_dec,
            dim: self.dec_dim,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            patch_size: self.patch,
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.n_voxels.div_ceil(self.patch)
    }
}

/// Parameter-name prefix of the fMRI encoder, the part exported to the
/// diffusion stage.
pub const ENCODER_PREFIX: &str = "fmri.enc.";
pub const DECODER_PREFIX: &str = "fmri.dec.";

/// Encoder `E_F` and decoder `D_F`.
#[derive(Clone, Debug)]
pub struct FmriAutoencoder {
    pub config: DcMaeConfig,
    pub embed: PatchEmbed1d,
    pub encoder: TransformerStack,
    pub mask_token: ParamId,
    pub dec_embed: Linear,
    pub dec_pos: ParamId,
    pub decoder: TransformerStack,
    pub head: Linear,
}

impl FmriAutoencoder {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, config: &DcMaeConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let embed = PatchEmbed1d::new(ps, "fmri.enc.embed", config.n_voxels, config.patch, config.dim, rng)?;
        let encoder = TransformerStack::new(ps, "fmri.enc", &config.encoder(), rng)?;
        let mask_token = ps.add("fmri.dec.mask_token", Tensor::randn([config.dim], 0.02, rng))?;
        let dec_embed = Linear::new(ps, "fmri.dec.embed", config.dim, config.dec_dim, rng)?;
        let dec_pos = ps.add(
            "fmri.dec.pos",
            Tensor::randn([config.num_tokens(), config.dec_dim], 0.02, rng),
        )?;
        let decoder = TransformerStack::new(ps, "fmri.dec", &config.decoder(), rng)?;
        let head = Linear::new(ps, "fmri.dec.head", config.dec_dim, config.patch, rng)?;
        Ok(Self {
            config: config.clone(),
            embed,
            encoder,
            mask_token,
            dec_embed,
            dec_pos,
            decoder,
            head,
        })
    }

    /// Encoder outputs for the visible tokens only: `[B, N] -> [B, K, dim]`.
    pub fn encode<'g>(&self, ps: &ParamStore, voxels: Var<'g>, plans: &[MaskPlan]) -> Result<Var<'g>> {
        let tokens = self.embed.forward(ps, voxels)?;
        let index: Vec<Vec<usize>> = plans.iter().map(|p| p.visible.clone()).collect();
        self.encoder.forward(ps, tokens.gather_tokens(&index)?)
    }

    /// Full-length latent sequence with the mask token at hidden positions:
    /// `[B, K, dim] -> [B, T, dim]`.
    pub fn expand<'g>(&self, ps: &ParamStore, latent: Var<'g>, plans: &[MaskPlan]) -> Result<Var<'g>> {
        let index: Vec<Vec<usize>> = plans.iter().map(|p| p.visible.clone()).collect();
        let fill = latent.graph().param(ps, self.mask_token);
        latent.scatter_tokens(fill, &index, self.config.num_tokens())
    }

    /// Decodes a full-length latent sequence to voxels: `[B, T, dim] -> [B, N]`.
    pub fn decode<'g>(&self, ps: &ParamStore, full: Var<'g>) -> Result<Var<'g>> {
        let g = full.graph();
        let b = full.shape()[0];
        let x = self.dec_embed.forward(ps, full)?.add_bcast(g.param(ps, self.dec_pos))?;
        let x = self.head.forward(ps, self.decoder.forward(ps, x)?)?;
        let flat = x.reshape([b, self.config.num_tokens() * self.config.patch])?;
        if self.embed.padding() == 0 {
            Ok(flat)
        } else {
            flat.slice_last(0, self.config.n_voxels)
        }
    }

    /// Masked reconstruction of every sample in `voxels`.
    pub fn reconstruct<'g>(&self, ps: &ParamStore, voxels: Var<'g>, plans: &[MaskPlan]) -> Result<Var<'g>> {
        let latent = self.encode(ps, voxels, plans)?;
        self.decode(ps, self.expand(ps, latent, plans)?)
    }

    /// Decodes two independently masked copies of the batch.
    pub fn forward_twice<'g>(
        &self,
        ps: &ParamStore,
        voxels: Var<'g>,
        masks: &MaskPair,
    ) -> Result<(Var<'g>, Var<'g>)> {
        if voxels.shape()[0] == 0 {
            return Err(Error::contract("empty fMRI batch"));
        }
        Ok((
            self.reconstruct(ps, voxels, &masks.first)?,
            self.reconstruct(ps, voxels, &masks.second)?,
        ))
    }

    /// Full-length encoder features without masking, as consumed downstream:
    /// `[B, N] -> [B, T, dim]`.
    pub fn features<'g>(&self, ps: &ParamStore, voxels: Var<'g>) -> Result<Var<'g>> {
        let b = voxels.shape()[0];
        let plans = vec![MaskPlan::full(self.config.num_tokens()); b];
        self.encode(ps, voxels, &plans)
    }
}

/// The two independent mask draws applied to every batch item.
#[derive(Clone, Debug)]
pub struct MaskPair {
    pub first: Vec<MaskPlan>,
    pub second: Vec<MaskPlan>,
}

impl MaskPair {
    pub fn draw<R: Rng + ?Sized>(batch: usize, tokens: usize, ratio: f64, rng: &mut R) -> Result<Self> {
        let mut draw = || (0..batch).map(|_| draw_mask(tokens, ratio, rng)).collect::<Result<Vec<_>>>();
        Ok(Self {
            first: draw()?,
            second: draw()?,
        })
    }
}

fn maybe_normalize(x: Var<'_>, normalize: bool) -> Result<Var<'_>> {
    if normalize {
        x.l2_normalize()
    } else {
        Ok(x)
    }
}

/// Contrastive loss whose logits for anchor `i` are `anchor_i·positive_i`
/// for the positive and `anchor_i·anchor_j` (`j ≠ i`) for the negatives,
/// averaged over the batch. Both inputs are `[n, D]`.
pub fn contrastive_loss<'g>(anchor: Var<'g>, positive: Var<'g>, tau: f64, normalize: bool) -> Result<Var<'g>> {
    if anchor.shape() != positive.shape() || anchor.shape().len() != 2 {
        return Err(Error::Shape {
            op: "contrastive_loss",
            lhs: anchor.shape(),
            rhs: positive.shape(),
        });
    }
    let a = maybe_normalize(anchor, normalize)?;
    let p = maybe_normalize(positive, normalize)?;
    let sims = a.matmul_t(a)?.scale(1.0 / tau)?;
    let pos = a.mul(p)?.sum_last()?.scale(1.0 / tau)?;
    sims.set_diag(pos)?.log_softmax()?.diag()?.mean()?.neg()
}

/// Cross-contrastive loss between the two decodings of a batch.
pub fn loss_cross_contrastive<'g>(d1: Var<'g>, d2: Var<'g>, tau: f64, normalize: bool) -> Result<Var<'g>> {
    contrastive_loss(d1, d2, tau, normalize)
}

/// Self-contrastive loss between decodings and the original inputs.
pub fn loss_self_contrastive<'g>(decoded: Var<'g>, originals: Var<'g>, tau: f64, normalize: bool) -> Result<Var<'g>> {
    contrastive_loss(decoded, originals, tau, normalize)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Phase1Losses {
    pub l_c: f64,
    pub l_s: f64,
    pub total: f64,
}

/// Builds `γ_C·L_C + γ_S·L_S` for a fixed (already augmented) batch and
/// fixed masks. Returns `(L_C, L_S, L)`.
pub fn phase1_loss<'g>(
    model: &FmriAutoencoder,
    ps: &ParamStore,
    g: &'g Graph,
    batch: &Tensor,
    masks: &MaskPair,
) -> Result<(Var<'g>, Var<'g>, Var<'g>)> {
    let cfg = &model.config;
    let v = g.constant(batch);
    let (d1, d2) = model.forward_twice(ps, v, masks)?;
    let l_c = loss_cross_contrastive(d1, d2, cfg.tau, cfg.normalize)?;
    let l_s = loss_self_contrastive(d1, v, cfg.tau, cfg.normalize)?
        .add(loss_self_contrastive(d2, v, cfg.tau, cfg.normalize)?)?
        .scale(0.5)?;
    let total = l_c.scale(cfg.gamma_c)?.add(l_s.scale(cfg.gamma_s)?)?;
    Ok((l_c, l_s, total))
}

/// Random sparsification of every row of a `[B, N]` batch.
pub fn augment<R: Rng + ?Sized>(batch: &Tensor, fraction: f64, rng: &mut R) -> Result<Tensor> {
    let n = batch.shape()[1];
    let mut data = Vec::with_capacity(batch.numel());
    for i in 0..batch.shape()[0] {
        data.extend(random_sparsify(&batch.data()[i * n..(i + 1) * n], fraction, rng)?);
    }
    Tensor::new(batch.shape().to_vec(), data)
}

pub(crate) fn ensure_finite(what: &str, parts: &[(&str, f64)]) -> Result<()> {
    if parts.iter().all(|(_, v)| v.is_finite()) {
        return Ok(());
    }
    let detail: Vec<String> = parts.iter().map(|(k, v)| format!("{k}={v}")).collect();
    Err(Error::NonFinite {
        op: format!("{what} ({})", detail.join(", ")),
    })
}

/// One optimizer step on `batch`: augment, mask twice, backpropagate the
/// composite loss and apply AdamW. The parameters are untouched when the
/// loss is not finite.
pub fn phase1_step<R: Rng + ?Sized>(
    model: &FmriAutoencoder,
    ps: &mut ParamStore,
    opt: &mut AdamW,
    batch: &Tensor,
    lr: f64,
    rng: &mut R,
) -> Result<Phase1Losses> {
    let cfg = &model.config;
    let augmented = augment(batch, cfg.sparsify, rng)?;
    let masks = MaskPair::draw(batch.shape()[0], cfg.num_tokens(), cfg.mask_ratio, rng)?;
    let g = Graph::new();
    let (l_c, l_s, total) = phase1_loss(model, ps, &g, &augmented, &masks)?;
    let losses = Phase1Losses {
        l_c: l_c.item()?,
        l_s: l_s.item()?,
        total: total.item()?,
    };
    ensure_finite(
        "phase-1 loss",
        &[("L_C", losses.l_c), ("L_S", losses.l_s), ("L", losses.total)],
    )?;
    ps.zero_grad();
    g.backward_into(total, ps)?;
    opt.step(ps, lr)?;
    ps.zero_grad();
    Ok(losses)
}

/// Named loss-weight and mask-ratio settings.
pub fn preset(name: &str) -> Option<DcMaeConfig> {
    let base = DcMaeConfig::default();
    match name {
        "god-s145" => Some(DcMaeConfig {
            gamma_c: 1.0,
            gamma_s: 1.0,
            mask_ratio: 0.5,
            ..base
        }),
        "god-s23" => Some(DcMaeConfig {
            gamma_c: 0.5,
            gamma_s: 1.0,
            mask_ratio: 0.75,
            ..base
        }),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, loss_fn, GradCheckOptions};
    use crate::optim::AdamWConfig;
    use crate::seeded_rng;

    fn toy_config() -> DcMaeConfig {
        DcMaeConfig {
            n_voxels: 24,
            patch: 4,
            dim: 8,
            heads: 2,
            depth_enc: 2,
            depth_dec: 1,
            dec_dim: 8,
            mlp_ratio: 2.0,
            mask_ratio: 0.5,
            tau: 0.5,
            ..DcMaeConfig::default()
        }
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Termwise evaluation of the contrastive formula.
    fn oracle(anchor: &[Vec<f64>], positive: &[Vec<f64>], tau: f64) -> f64 {
        let n = anchor.len();
        let mut total = 0.0;
        for i in 0..n {
            let pos = (dot(&anchor[i], &positive[i]) / tau).exp();
            let neg: f64 = (0..n)
                .filter(|&j| j != i)
                .map(|j| (dot(&anchor[i], &anchor[j]) / tau).exp())
                .sum();
            total += -(pos / (pos + neg)).ln();
        }
        total / n as f64
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
    }

    #[test]
    fn contrastive_matches_oracle() {
        let mut rng = seeded_rng(1, 0);
        for n in 1..=4 {
            for dim in [1, 3, 8] {
                for tau in [0.1, 0.5, 1.0] {
                    let a = Tensor::randn([n, dim], 0.7, &mut rng);
                    let p = Tensor::randn([n, dim], 0.7, &mut rng);
                    let g = Graph::new();
                    let got = contrastive_loss(g.constant(&a), g.constant(&p), tau, false)
                        .unwrap()
                        .item()
                        .unwrap();
                    let expect = oracle(&rows(&a), &rows(&p), tau);
                    assert!((got - expect).abs() < 1e-10, "n={n} dim={dim} tau={tau}");
                    if n == 1 {
                        assert_eq!(got, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn symmetric_pair_gives_log_two() {
        let a = Tensor::new([2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let g = Graph::new();
        let l = contrastive_loss(g.constant(&a), g.constant(&a), 0.3, false).unwrap();
        assert!((l.item().unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn self_contrastive_vanishes_at_low_temperature() {
        // perfect reconstructions of orthogonal items
        let v = Tensor::from_fn([3, 3], |i| if i / 3 == i % 3 { 0.5 } else { 0.0 });
        let mut last = f64::INFINITY;
        for tau in [1.0, 0.1, 0.01] {
            let g = Graph::new();
            let l = loss_self_contrastive(g.constant(&v), g.constant(&v), tau, false)
                .unwrap()
                .item()
                .unwrap();
            assert!((l - oracle(&rows(&v), &rows(&v), tau)).abs() < 1e-10);
            assert!(l < last);
            last = l;
        }
        assert!(last < 1e-9);
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let mut rng = seeded_rng(2, 0);
        let a = Tensor::randn([4, 5], 1.0, &mut rng);
        let p = Tensor::randn([4, 5], 1.0, &mut rng);
        let perm = [2, 0, 3, 1];
        let permute = |t: &Tensor| Tensor::from_fn([4, 5], |i| t.data()[perm[i / 5] * 5 + i % 5]);
        let g = Graph::new();
        let l1 = contrastive_loss(g.constant(&a), g.constant(&p), 0.5, false).unwrap().item().unwrap();
        let l2 = contrastive_loss(g.constant(&permute(&a)), g.constant(&permute(&p)), 0.5, false)
            .unwrap()
            .item()
            .unwrap();
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn normalized_variant_uses_unit_vectors() {
        let mut rng = seeded_rng(3, 0);
        let a = Tensor::randn([3, 4], 1.0, &mut rng);
        let p = Tensor::randn([3, 4], 1.0, &mut rng);
        let unit = |t: &Tensor| {
            rows(t)
                .into_iter()
                .map(|r| {
                    let n = dot(&r, &r).sqrt();
                    r.into_iter().map(|x| x / n).collect()
                })
                .collect::<Vec<Vec<f64>>>()
        };
        let g = Graph::new();
        let got = contrastive_loss(g.constant(&a), g.constant(&p), 0.5, true).unwrap().item().unwrap();
        assert!((got - oracle(&unit(&a), &unit(&p), 0.5)).abs() < 1e-10);
    }

    #[test]
    fn forward_twice_shapes_and_determinism() {
        let cfg = DcMaeConfig {
            mask_ratio: 0.0,
            ..toy_config()
        };
        let mut ps = ParamStore::new();
        let model = FmriAutoencoder::new(&mut ps, &cfg, &mut seeded_rng(4, 0)).unwrap();
        let batch = Tensor::randn([3, 24], 1.0, &mut seeded_rng(5, 0));
        let masks = MaskPair::draw(3, cfg.num_tokens(), 0.0, &mut seeded_rng(6, 0)).unwrap();
        let g = Graph::inference();
        let (d1, d2) = model.forward_twice(&ps, g.constant(&batch), &masks).unwrap();
        assert_eq!(d1.shape(), vec![3, 24]);
        assert_eq!(d1.to_vec(), d2.to_vec());

        let masks = MaskPair::draw(3, cfg.num_tokens(), 0.5, &mut seeded_rng(6, 0)).unwrap();
        let again = MaskPair::draw(3, cfg.num_tokens(), 0.5, &mut seeded_rng(6, 0)).unwrap();
        let a = model.forward_twice(&ps, g.constant(&batch), &masks).unwrap().0.to_vec();
        let b = model.forward_twice(&ps, g.constant(&batch), &again).unwrap().0.to_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn padded_voxel_count_decodes_to_input_length() {
        let cfg = DcMaeConfig {
            n_voxels: 22,
            ..toy_config()
        };
        let mut ps = ParamStore::new();
        let model = FmriAutoencoder::new(&mut ps, &cfg, &mut seeded_rng(7, 0)).unwrap();
        let g = Graph::inference();
        let masks = MaskPair::draw(2, cfg.num_tokens(), 0.5, &mut seeded_rng(8, 0)).unwrap();
        let (d1, _) = model
            .forward_twice(&ps, g.constant(&Tensor::ones([2, 22])), &masks)
            .unwrap();
        assert_eq!(d1.shape(), vec![2, 22]);
    }

    #[test]
    fn composite_loss_gradient_check() {
        let cfg = toy_config();
        let mut ps = ParamStore::new();
        let model = FmriAutoencoder::new(&mut ps, &cfg, &mut seeded_rng(9, 0)).unwrap();
        let batch = Tensor::randn([3, 24], 0.3, &mut seeded_rng(10, 0));
        let masks = MaskPair::draw(3, cfg.num_tokens(), cfg.mask_ratio, &mut seeded_rng(11, 0)).unwrap();
        let f = loss_fn(|g, ps| Ok(phase1_loss(&model, ps, g, &batch, &masks)?.2));
        let ids: Vec<_> = ps.ids().collect();
        let opts = GradCheckOptions {
            max_coords: 6,
            ..GradCheckOptions::default()
        };
        let report = grad_check(&f, &ps, &ids, &opts).unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }

    #[test]
    fn zero_cross_weight_leaves_self_gradient() {
        let cfg = DcMaeConfig {
            gamma_c: 0.0,
            gamma_s: 0.7,
            ..toy_config()
        };
        let mut ps = ParamStore::new();
        let model = FmriAutoencoder::new(&mut ps, &cfg, &mut seeded_rng(12, 0)).unwrap();
        let batch = Tensor::randn([3, 24], 0.3, &mut seeded_rng(13, 0));
        let masks = MaskPair::draw(3, cfg.num_tokens(), 0.5, &mut seeded_rng(14, 0)).unwrap();
        let ids: Vec<_> = ps.ids().collect();
        let composite = loss_fn(|g, ps| Ok(phase1_loss(&model, ps, g, &batch, &masks)?.2));
        let self_only = loss_fn(|g, ps| phase1_loss(&model, ps, g, &batch, &masks)?.1.scale(0.7));
        let a = crate::gradcheck::analytic_gradients(&composite, &ps, &ids).unwrap();
        let b = crate::gradcheck::analytic_gradients(&self_only, &ps, &ids).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn step_reduces_loss_and_rejects_non_finite() {
        let cfg = toy_config();
        let mut ps = ParamStore::new();
        let model = FmriAutoencoder::new(&mut ps, &cfg, &mut seeded_rng(15, 0)).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), ps.ids().collect());
        let batch = Tensor::randn([4, 24], 1.0, &mut seeded_rng(16, 0));
        let mut rng = seeded_rng(17, 0);
        let first = phase1_step(&model, &mut ps, &mut opt, &batch, 3e-3, &mut rng).unwrap();
        let mut last = first;
        for _ in 0..60 {
            last = phase1_step(&model, &mut ps, &mut opt, &batch, 3e-3, &mut rng).unwrap();
        }
        assert!(last.total < first.total, "{first:?} -> {last:?}");

        let mut bad = batch.clone();
        bad.data_mut()[..24].fill(f64::NAN);
        let before = ps.clone();
        let err = phase1_step(&model, &mut ps, &mut opt, &bad, 3e-3, &mut rng);
        assert!(matches!(err, Err(Error::NonFinite { .. })));
        for id in ps.ids() {
            assert_eq!(ps.get(id).data(), before.get(id).data());
        }
    }

    #[test]
    fn presets_follow_published_settings() {
        let a = preset("god-s145").unwrap();
        assert_eq!((a.gamma_c, a.gamma_s, a.mask_ratio), (1.0, 1.0, 0.5));
        let b = preset("god-s23").unwrap();
        assert_eq!((b.gamma_c, b.gamma_s, b.mask_ratio), (0.5, 1.0, 0.75));
        assert!(preset("nope").is_none());
        let bad = DcMaeConfig {
            depth_dec: 4,
            ..DcMaeConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
