//! Finite-difference verification of autodiff gradients.

pub mod suite;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Denominator floor: coordinates whose gradients are both below this
    /// magnitude are compared in absolute terms.
    pub abs_floor: f64,
    /// Coordinates checked per tensor; larger tensors are sampled.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-4,
            max_coords: 24,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Pins a closure to the higher-ranked loss-builder signature.
pub fn loss_fn<F>(f: F) -> F
where
    F: for<'g> Fn(&'g Graph, &ParamStore) -> Result<Var<'g>>,
{
    f
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &ParamStore) -> Result<Var<'g>>,
{
    let g = Graph::inference();
    f(&g, store)?.item()
}

/// Autodiff gradients of the scalar produced by `f` for each id in `ids`.
pub fn analytic_gradients<F>(f: &F, store: &ParamStore, ids: &[ParamId]) -> Result<Vec<Vec<f64>>>
where
    F: for<'g> Fn(&'g Graph, &ParamStore) -> Result<Var<'g>>,
{
    let mut work = store.clone();
    work.zero_grad();
    let g = Graph::new();
    let loss = f(&g, &work)?;
    g.backward_into(loss, &mut work)?;
    Ok(ids
        .iter()
        .map(|&id| {
            work.get(id)
                .grad()
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; work.get(id).numel()])
        })
        .collect())
}

/// Compares `analytic` gradients against centered differences of `f`.
pub fn check_against<F>(
    f: &F,
    store: &ParamStore,
    ids: &[ParamId],
    analytic: &[Vec<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &ParamStore) -> Result<Var<'g>>,
{
    let base = evaluate(f, store)?;
    let again = evaluate(f, store)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::contract(format!(
            "gradient check aborted: loss is not deterministic ({base} then {again})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut params = Vec::with_capacity(ids.len());
    for (&id, grad) in ids.iter().zip(analytic) {
        let n = work.get(id).numel();
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut worst = 0.0f64;
        for &i in &coords {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + opts.h;
            let plus = evaluate(f, &work)?;
            work.get_mut(id).data_mut()[i] = orig - opts.h;
            let minus = evaluate(f, &work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.h);
            worst = worst.max(relative_error(grad[i], numeric, opts.abs_floor));
        }
        params.push(ParamCheck {
            name: store.name(id).to_string(),
            coords: coords.len(),
            max_rel_err: worst,
        });
    }
    let max_rel_err = params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params,
        max_rel_err,
        tol: opts.tol,
    })
}

/// Checks every parameter in `ids` of the loss built by `f`.
pub fn grad_check<F>(
    f: &F,
    store: &ParamStore,
    ids: &[ParamId],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &ParamStore) -> Result<Var<'g>>,
{
    let analytic = analytic_gradients(f, store, ids)?;
    check_against(f, store, ids, &analytic, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use std::cell::Cell;

    fn quadratic_store() -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let w = s
            .add("w", Tensor::new([4], vec![0.3, -1.2, 2.0, 0.7]).unwrap())
            .unwrap();
        (s, w)
    }

    fn quadratic<'g>(g: &'g Graph, s: &ParamStore) -> Result<Var<'g>> {
        let w = g.param(s, s.id("w").unwrap());
        let c = g.constant(&Tensor::new([4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        w.sub(c)?.square()?.scale(1.5)?.sum()
    }

    #[test]
    fn quadratic_is_near_exact() {
        let (s, w) = quadratic_store();
        let r = grad_check(&quadratic, &s, &[w], &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_err < 1e-9, "{}", r.max_rel_err);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let (s, w) = quadratic_store();
        let mut analytic = analytic_gradients(&quadratic, &s, &[w]).unwrap();
        analytic[0].iter_mut().for_each(|g| *g *= 1.01);
        let r = check_against(&quadratic, &s, &[w], &analytic, &GradCheckOptions::default()).unwrap();
        assert!(!r.passed());
        assert!(r.max_rel_err > 5e-3);
    }

    #[test]
    fn nondeterministic_loss_aborts() {
        let (s, w) = quadratic_store();
        let calls = Cell::new(0u32);
        let f = loss_fn(|g, s| {
            calls.set(calls.get() + 1);
            let jitter = calls.get() as f64 * 1e-3;
            quadratic(g, s)?.add_scalar(jitter)
        });
        let analytic = vec![vec![0.0; 4]];
        let err = check_against(&f, &s, &[w], &analytic, &GradCheckOptions::default());
        assert!(matches!(err, Err(Error::Contract(_))));
    }
}
