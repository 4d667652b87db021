//! Two-phase fMRI representation learning (double-contrastive masked
//! auto-encoding, then cross-modal tuning against an image auto-encoder)
//! driving an fMRI-conditioned latent diffusion model, plus the synthetic
//! brain/image generator and the n-way top-k semantic evaluation used to
//! score reconstructions.
//!
//! Everything runs on a small reverse-mode autodiff engine over `f64`
//! tensors ([`autograd`]), sized so the whole pipeline trains on a CPU.

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod error;
pub mod eval;
pub mod dcmae;
pub mod diffusion;
pub mod gradcheck;
pub mod mask;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod xmodal;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

/// Deterministic random stream `stream` derived from a run seed. Every
/// consumer of randomness owns its own stream so adding draws in one place
/// never perturbs another.
pub fn seeded_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Identifier recorded in every artifact manifest.
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), "-", env!("CARGO_PKG_VERSION"));
