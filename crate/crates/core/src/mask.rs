//! Patchification, random masking and reassembly of token sequences.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of positions selected by `ratio` out of `total`, rounded half up.
pub fn masked_count(total: usize, ratio: f64) -> usize {
    (ratio * total as f64 + 0.5).floor() as usize
}

fn check_ratio(ratio: f64, what: &str) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::contract(format!("{what} must be in [0, 1), got {ratio}")));
    }
    Ok(())
}

/// Which positions of a sequence stay visible and which are hidden.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    /// Sorted visible positions.
    pub visible: Vec<usize>,
    /// Sorted masked positions.
    pub masked: Vec<usize>,
}

impl MaskPlan {
    pub fn total(&self) -> usize {
        self.visible.len() + self.masked.len()
    }

    /// No position masked.
    pub fn full(total: usize) -> Self {
        Self {
            visible: (0..total).collect(),
            masked: Vec::new(),
        }
    }

    /// Boolean indicator over positions, `true` where masked.
    pub fn indicator(&self) -> Vec<bool> {
        let mut out = vec![false; self.total()];
        for &i in &self.masked {
            out[i] = true;
        }
        out
    }
}

/// Draws a uniformly random set of exactly `round(ratio·total)` masked positions.
pub fn draw_mask<R: Rng + ?Sized>(total: usize, ratio: f64, rng: &mut R) -> Result<MaskPlan> {
    check_ratio(ratio, "mask ratio")?;
    let n_masked = masked_count(total, ratio);
    let mut masked = sample(rng, total, n_masked).into_vec();
    masked.sort_unstable();
    let mut is_masked = vec![false; total];
    for &i in &masked {
        is_masked[i] = true;
    }
    let visible = (0..total).filter(|&i| !is_masked[i]).collect();
    Ok(MaskPlan { visible, masked })
}

/// A token sequence with some positions removed.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSequence {
    /// `[visible, width]`, in increasing position order.
    pub visible_tokens: Tensor,
    pub visible_indices: Vec<usize>,
    pub mask_indices: Vec<usize>,
    pub total_patches: usize,
    pub mask_ratio: f64,
}

/// Masks rows of a `[patches, width]` token array.
pub fn random_mask<R: Rng + ?Sized>(tokens: &Tensor, ratio: f64, rng: &mut R) -> Result<MaskedSequence> {
    if tokens.rank() != 2 {
        return Err(Error::Shape {
            op: "random_mask",
            lhs: tokens.shape().to_vec(),
            rhs: vec![],
        });
    }
    let total = tokens.shape()[0];
    let plan = draw_mask(total, ratio, rng)?;
    let width = tokens.shape()[1];
    let data = plan
        .visible
        .iter()
        .flat_map(|&i| tokens.row(i).iter().copied())
        .collect();
    Ok(MaskedSequence {
        visible_tokens: Tensor::new([plan.visible.len(), width], data)?,
        visible_indices: plan.visible,
        mask_indices: plan.masked,
        total_patches: total,
        mask_ratio: ratio,
    })
}

/// Places decoded tokens back at their original positions.
///
/// `decoded` holds one row per position in the order the decoder saw them:
/// first the visible positions, then the masked ones.
pub fn reassemble(masked: &MaskedSequence, decoded: &Tensor) -> Result<Tensor> {
    if decoded.rank() != 2 || decoded.shape()[0] != masked.total_patches {
        return Err(Error::contract(format!(
            "decoded {:?} tokens for a {}-patch sequence",
            decoded.shape(),
            masked.total_patches
        )));
    }
    let width = decoded.shape()[1];
    let mut out = vec![0.0; masked.total_patches * width];
    let order = masked.visible_indices.iter().chain(&masked.mask_indices);
    for (row, &pos) in order.enumerate() {
        out[pos * width..(pos + 1) * width].copy_from_slice(decoded.row(row));
    }
    Tensor::new([masked.total_patches, width], out)
}

/// Splits a voxel vector into `patch`-wide rows, zero-padding the tail.
pub fn patchify_1d(v: &[f64], patch: usize) -> Result<Tensor> {
    if v.is_empty() || patch == 0 {
        return Err(Error::contract("cannot patchify an empty vector"));
    }
    let tokens = v.len().div_ceil(patch);
    let mut data = v.to_vec();
    data.resize(tokens * patch, 0.0);
    Tensor::new([tokens, patch], data)
}

/// Inverse of [`patchify_1d`], dropping the padding.
pub fn unpatchify_1d(tokens: &Tensor, n_voxels: usize) -> Result<Vec<f64>> {
    if tokens.numel() < n_voxels {
        return Err(Error::contract(format!(
            "{} values cannot cover {n_voxels} voxels",
            tokens.numel()
        )));
    }
    Ok(tokens.data()[..n_voxels].to_vec())
}

/// Zeroes exactly `round(fraction·len)` uniformly chosen entries; every other
/// entry is returned unchanged.
pub fn random_sparsify<R: Rng + ?Sized>(v: &[f64], fraction: f64, rng: &mut R) -> Result<Vec<f64>> {
    check_ratio(fraction, "sparsification fraction")?;
    let mut out = v.to_vec();
    for i in sample(rng, v.len(), masked_count(v.len(), fraction)) {
        out[i] = 0.0;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tokens(p: usize, w: usize) -> Tensor {
        Tensor::from_fn([p, w], |i| i as f64)
    }

    #[test]
    fn counts_are_exact() {
        for (ratio, expect) in [(0.0, 0), (0.5, 32), (0.75, 48)] {
            let m = random_mask(&tokens(64, 2), ratio, &mut rng(1)).unwrap();
            assert_eq!(m.mask_indices.len(), expect);
            assert_eq!(m.visible_indices.len() + m.mask_indices.len(), 64);
            assert!(m.mask_indices.windows(2).all(|w| w[0] < w[1]));
            assert!(m.mask_indices.iter().all(|&i| i < 64));
        }
        assert_eq!(masked_count(10, 0.25), 3);
        assert!(random_mask(&tokens(4, 1), 1.0, &mut rng(0)).is_err());
        assert!(random_mask(&tokens(4, 1), -0.1, &mut rng(0)).is_err());
    }

    #[test]
    fn draws_are_reproducible() {
        let a = draw_mask(64, 0.75, &mut rng(7)).unwrap();
        let b = draw_mask(64, 0.75, &mut rng(7)).unwrap();
        let c = draw_mask(64, 0.75, &mut rng(8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn masks_cover_positions_roughly_uniformly() {
        let mut hits = [0usize; 16];
        let mut r = rng(3);
        for _ in 0..4000 {
            for i in draw_mask(16, 0.25, &mut r).unwrap().masked {
                hits[i] += 1;
            }
        }
        // each position is masked with probability 1/4: 1000 ± ~27
        assert!(hits.iter().all(|&h| (850..1150).contains(&h)), "{hits:?}");
    }

    #[test]
    fn unmasked_round_trip_is_exact() {
        let v: Vec<f64> = (0..40).map(|i| (i as f64).sin()).collect();
        let t = patchify_1d(&v, 16).unwrap();
        assert_eq!(t.shape(), &[3, 16]);
        let m = random_mask(&t, 0.0, &mut rng(0)).unwrap();
        let back = reassemble(&m, &m.visible_tokens).unwrap();
        assert_eq!(unpatchify_1d(&back, 40).unwrap(), v);
    }

    #[test]
    fn reassemble_matches_index_oracle() {
        let t = tokens(12, 3);
        let m = random_mask(&t, 0.5, &mut rng(5)).unwrap();
        // decoder stand-in: visible rows pass through, masked rows are tagged
        let order: Vec<usize> = m.visible_indices.iter().chain(&m.mask_indices).copied().collect();
        let decoded = Tensor::from_fn([12, 3], |i| {
            let pos = order[i / 3];
            if m.mask_indices.contains(&pos) {
                -1.0 - pos as f64
            } else {
                t.data()[pos * 3 + i % 3]
            }
        });
        let out = reassemble(&m, &decoded).unwrap();
        for pos in 0..12 {
            for c in 0..3 {
                let expect = if m.mask_indices.contains(&pos) {
                    -1.0 - pos as f64
                } else {
                    t.data()[pos * 3 + c]
                };
                assert_eq!(out.data()[pos * 3 + c], expect);
            }
        }
        assert!(reassemble(&m, &tokens(11, 3)).is_err());
    }

    #[test]
    fn sparsify_zeroes_exact_count() {
        let v = vec![1.5; 1000];
        let s = random_sparsify(&v, 0.2, &mut rng(9)).unwrap();
        assert_eq!(s.iter().filter(|&&x| x == 0.0).count(), 200);
        assert!(s.iter().all(|&x| x == 0.0 || x == 1.5));
        assert_eq!(random_sparsify(&v, 0.0, &mut rng(9)).unwrap(), v);
    }

    #[test]
    fn repeated_sparsify_zeroes_at_least_one_draw() {
        let v: Vec<f64> = (1..=1000).map(f64::from).collect();
        let mut r = rng(10);
        for _ in 0..20 {
            let twice = random_sparsify(&random_sparsify(&v, 0.2, &mut r).unwrap(), 0.2, &mut r).unwrap();
            let zeros: HashSet<usize> = (0..1000).filter(|&i| twice[i] == 0.0).collect();
            assert!(zeros.len() >= 200 && zeros.len() <= 400);
        }
    }
}
