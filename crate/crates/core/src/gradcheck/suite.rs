//! Finite-difference checks of every differentiable operation and of the
//! composite training objectives, on small fixed instances.

use rand::Rng;
use serde::Serialize;

use super::{grad_check, GradCheckOptions, GradCheckReport};
use crate::autograd::{Graph, Var};
use crate::dcmae::{loss_cross_contrastive, loss_self_contrastive, phase1_loss, DcMaeConfig, FmriAutoencoder, MaskPair};
use crate::diffusion::{CondDenoiser, DenoiseBatch, DenoiserConfig, FinetuneContext, NoiseSchedule};
use crate::error::Result;
use crate::nn::{Conv2d, CrossAttentionParams, SelfAttention};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::xmodal::{ImageMaeConfig, PairMasks, XModalConfig, XModalModel};
use crate::seeded_rng;

/// Tolerance for operations that are linear (or bilinear) in their inputs.
pub const LINEAR_TOL: f64 = 1e-6;
/// Tolerance for everything else.
pub const NONLINEAR_TOL: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub linear: bool,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

/// Fixed, non-constant weights used to reduce an output to a scalar.
fn weights(shape: Vec<usize>) -> Tensor {
    Tensor::from_fn(shape, |i| (1.3 * i as f64 + 0.7).sin())
}

fn reduce(out: Var<'_>) -> Result<Var<'_>> {
    out.mul_const(&weights(out.shape()))?.sum()
}

struct Suite {
    entries: Vec<SuiteEntry>,
    seed: u64,
}

impl Suite {
    fn check<F>(&mut self, name: &'static str, linear: bool, ps: &ParamStore, f: F) -> Result<()>
    where
        F: for<'g> Fn(&'g Graph, &ParamStore) -> Result<Var<'g>>,
    {
        let opts = GradCheckOptions {
            tol: if linear { LINEAR_TOL } else { NONLINEAR_TOL },
            seed: self.seed,
            ..GradCheckOptions::default()
        };
        let ids: Vec<_> = ps.ids().collect();
        let report = grad_check(&f, ps, &ids, &opts)?;
        self.entries.push(SuiteEntry { name, linear, report });
        Ok(())
    }
}

/// A store holding random inputs `x0, x1, ..` of the given shapes.
fn inputs<R: Rng + ?Sized>(shapes: &[&[usize]], rng: &mut R) -> ParamStore {
    let mut ps = ParamStore::new();
    for (i, s) in shapes.iter().enumerate() {
        ps.add(format!("x{i}"), Tensor::randn(s.to_vec(), 1.0, rng))
            .expect("distinct names");
    }
    ps
}

fn x<'g>(g: &'g Graph, ps: &ParamStore, i: usize) -> Var<'g> {
    g.param(ps, ps.id(&format!("x{i}")).expect("input exists"))
}

macro_rules! op {
    ($suite:expr, $rng:expr, $name:literal, $linear:expr, [$($shape:expr),*], |$g:ident, $ps:ident| $body:expr) => {{
        let store = inputs(&[$(&$shape[..]),*], $rng);
        $suite.check($name, $linear, &store, |$g: &Graph, $ps: &ParamStore| reduce($body?))?;
    }};
}

/// Runs every check; the result lists one entry per operation or objective.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut s = Suite {
        entries: Vec::new(),
        seed,
    };
    let r = &mut seeded_rng(seed, 0);

    op!(s, r, "matmul", true, [[3, 4], [4, 5]], |g, ps| x(g, ps, 0).matmul(x(g, ps, 1)));
    op!(s, r, "matmul_t", true, [[3, 4], [5, 4]], |g, ps| x(g, ps, 0).matmul_t(x(g, ps, 1)));
    op!(s, r, "bmm", true, [[2, 3, 4], [2, 4, 5]], |g, ps| x(g, ps, 0).bmm(x(g, ps, 1), false));
    op!(s, r, "bmm_transposed", true, [[2, 3, 4], [2, 5, 4]], |g, ps| x(g, ps, 0).bmm(x(g, ps, 1), true));
    op!(s, r, "add", true, [[3, 4], [3, 4]], |g, ps| x(g, ps, 0).add(x(g, ps, 1)));
    op!(s, r, "sub", true, [[3, 4], [3, 4]], |g, ps| x(g, ps, 0).sub(x(g, ps, 1)));
    op!(s, r, "mul", true, [[3, 4], [3, 4]], |g, ps| x(g, ps, 0).mul(x(g, ps, 1)));
    op!(s, r, "add_bcast", true, [[2, 3, 4], [4]], |g, ps| x(g, ps, 0).add_bcast(x(g, ps, 1)));
    op!(s, r, "mul_bcast", true, [[2, 3, 4], [4]], |g, ps| x(g, ps, 0).mul_bcast(x(g, ps, 1)));
    op!(s, r, "add_per_batch", true, [[2, 3, 3, 4], [2, 4]], |g, ps| x(g, ps, 0)
        .add_per_batch(x(g, ps, 1)));
    op!(s, r, "scale", true, [[3, 4]], |g, ps| x(g, ps, 0).scale(-0.7));
    op!(s, r, "add_scalar", true, [[3, 4]], |g, ps| x(g, ps, 0).add_scalar(2.5));
    op!(s, r, "mul_const", true, [[3, 4]], |g, ps| x(g, ps, 0).mul_const(&Tensor::from_fn([3, 4], |i| 0.3 * i as f64 - 1.0)));
    op!(s, r, "neg", true, [[3, 4]], |g, ps| x(g, ps, 0).neg());
    op!(s, r, "sum", true, [[3, 4]], |g, ps| x(g, ps, 0).sum());
    op!(s, r, "mean", true, [[3, 4]], |g, ps| x(g, ps, 0).mean());
    op!(s, r, "sum_last", true, [[2, 3, 4]], |g, ps| x(g, ps, 0).sum_last());
    op!(s, r, "mean_axis1", true, [[2, 3, 4]], |g, ps| x(g, ps, 0).mean_axis1());
    op!(s, r, "reshape", true, [[2, 3, 4]], |g, ps| x(g, ps, 0).reshape([6, 4]));
    op!(s, r, "permute", true, [[2, 3, 4]], |g, ps| x(g, ps, 0).permute(&[2, 0, 1]));
    op!(s, r, "concat_last", true, [[2, 3], [2, 2]], |g, ps| x(g, ps, 0).concat_last(x(g, ps, 1)));
    op!(s, r, "diag", true, [[4, 4]], |g, ps| x(g, ps, 0).diag());
    op!(s, r, "set_diag", true, [[4, 4], [4]], |g, ps| x(g, ps, 0).set_diag(x(g, ps, 1)));
    op!(s, r, "slice_last", true, [[2, 3, 6]], |g, ps| x(g, ps, 0).slice_last(1, 3));
    op!(s, r, "im2col", true, [[1, 4, 4, 2]], |g, ps| x(g, ps, 0).im2col(3, 2, 1));
    op!(s, r, "upsample2x", true, [[1, 2, 3, 2]], |g, ps| x(g, ps, 0).upsample2x());
    op!(s, r, "gather_tokens", true, [[2, 5, 3]], |g, ps| x(g, ps, 0)
        .gather_tokens(&[vec![4, 0], vec![1, 3]]));
    op!(s, r, "scatter_tokens", true, [[2, 2, 3], [3]], |g, ps| x(g, ps, 0)
        .scatter_tokens(x(g, ps, 1), &[vec![4, 0], vec![1, 3]], 5));

    op!(s, r, "square", false, [[3, 4]], |g, ps| x(g, ps, 0).square());
    op!(s, r, "softmax", false, [[3, 5]], |g, ps| x(g, ps, 0).softmax());
    op!(s, r, "log_softmax", false, [[3, 5]], |g, ps| x(g, ps, 0).log_softmax());
    op!(s, r, "layer_norm", false, [[2, 3, 5], [5], [5]], |g, ps| x(g, ps, 0)
        .layer_norm(x(g, ps, 1), x(g, ps, 2), 1e-5));
    op!(s, r, "gelu", false, [[3, 4]], |g, ps| x(g, ps, 0).gelu());
    op!(s, r, "silu", false, [[3, 4]], |g, ps| x(g, ps, 0).silu());
    op!(s, r, "tanh", false, [[3, 4]], |g, ps| x(g, ps, 0).tanh());
    op!(s, r, "l2_normalize", false, [[3, 4]], |g, ps| x(g, ps, 0).l2_normalize());

    // layers with their own parameters
    {
        let mut ps = inputs(&[&[2, 3, 4], &[2, 4, 6]], r);
        let ca = CrossAttentionParams::new(&mut ps, "ca", 4, 6, 5, 3, 0.5, r)?;
        s.check("cross_attention", false, &ps, |g, ps| {
            reduce(ca.forward(ps, x(g, ps, 0), x(g, ps, 1))?)
        })?;
    }
    {
        let mut ps = inputs(&[&[2, 4, 6]], r);
        let attn = SelfAttention::new(&mut ps, "attn", 6, 2, r)?;
        s.check("self_attention", false, &ps, |g, ps| reduce(attn.forward(ps, x(g, ps, 0))?))?;
    }
    {
        let mut ps = inputs(&[&[1, 4, 4, 2]], r);
        let conv = Conv2d::new(&mut ps, "conv", 2, 3, 3, 2, 1, r)?;
        s.check("conv2d", true, &ps, |g, ps| reduce(conv.forward(ps, x(g, ps, 0))?))?;
    }

    // training objectives
    for (name, tau) in [("cross_contrastive", 0.5), ("self_contrastive", 1.0)] {
        let ps = inputs(&[&[3, 5], &[3, 5]], r);
        let cross = name == "cross_contrastive";
        s.check(name, false, &ps, move |g, ps| {
            if cross {
                loss_cross_contrastive(x(g, ps, 0), x(g, ps, 1), tau, false)
            } else {
                loss_self_contrastive(x(g, ps, 0), x(g, ps, 1), tau, false)
            }
        })?;
    }
    let fmri_cfg = DcMaeConfig {
        n_voxels: 16,
        patch: 4,
        dim: 6,
        heads: 2,
        depth_enc: 2,
        depth_dec: 1,
        dec_dim: 6,
        tau: 0.5,
        ..DcMaeConfig::default()
    };
    {
        let mut ps = ParamStore::new();
        let model = FmriAutoencoder::new(&mut ps, &fmri_cfg, r)?;
        let batch = Tensor::randn([3, 16], 1.0, r);
        let masks = MaskPair::draw(3, fmri_cfg.num_tokens(), 0.5, r)?;
        s.check("phase1_objective", false, &ps, |g, ps| Ok(phase1_loss(&model, ps, g, &batch, &masks)?.2))?;
    }
    {
        let mut ps = ParamStore::new();
        let image_cfg = ImageMaeConfig {
            image_size: 4,
            patch: 2,
            dim: 6,
            heads: 2,
            depth_enc: 2,
            depth_dec: 1,
            dec_dim: 6,
            ..ImageMaeConfig::default()
        };
        let xcfg = XModalConfig {
            ca_init_std: 0.3,
            ..XModalConfig::default()
        };
        let model = XModalModel::new(&mut ps, &xcfg, &fmri_cfg, &image_cfg, r)?;
        let v = Tensor::randn([2, 16], 1.0, r);
        let u = Tensor::randn([2, 4, 4, 3], 1.0, r);
        let masks = PairMasks::draw(&model, 2, r)?;
        s.check("phase2_objective", false, &ps, |g, ps| Ok(model.loss(ps, g, &v, &u, &masks)?.2))?;
    }
    {
        let mut ps = ParamStore::new();
        let fmri = FmriAutoencoder::new(&mut ps, &fmri_cfg, r)?;
        let dcfg = DenoiserConfig {
            latent_size: 2,
            latent_channels: 2,
            base_channels: 2,
            time_dim: 4,
            freq_dim: 4,
            cond_dim: 6,
            n_classes: 2,
            diffusion_steps: 50,
        };
        let denoiser = CondDenoiser::new(&mut ps, &dcfg, r)?;
        // give the zero-initialized output layer a signal to differentiate
        let out = ps.id("ldm.conv_out.weight").expect("output layer exists");
        let w = Tensor::randn(ps.get(out).shape().to_vec(), 0.3, r);
        ps.get_mut(out).data_mut().copy_from_slice(w.data());
        let schedule = NoiseSchedule::linear(50, 1e-3, 0.05)?;
        let ctx = FinetuneContext {
            fmri: &fmri,
            denoiser: &denoiser,
            schedule: &schedule,
        };
        let v = Tensor::randn([2, 16], 1.0, r);
        let batch = DenoiseBatch::draw(Tensor::randn([2, 2, 2, 2], 1.0, r), &schedule, r);
        s.check("finetune_objective", false, &ps, |g, ps| ctx.loss(ps, g, &v, &batch))?;
    }
    Ok(s.entries)
}
