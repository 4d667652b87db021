//! AdamW with decoupled weight decay, and the warmup + cosine learning-rate
//! schedule used by every trainer.

use std::collections::HashMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One AdamW update of `param` in place.
///
/// `step` is the 1-based index of this update (used for bias correction).
/// Decay is applied to the parameter, never folded into the moments.
pub fn adamw_update(
    param: &mut [f64],
    grad: &[f64],
    moments: &mut Moments,
    step: u64,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if param.len() != grad.len() || moments.m.len() != param.len() || moments.v.len() != param.len() {
        return Err(Error::Shape {
            op: "adamw_update",
            lhs: vec![param.len()],
            rhs: vec![grad.len(), moments.m.len(), moments.v.len()],
        });
    }
    if step == 0 {
        return Err(Error::contract("adamw step index is 1-based"));
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        param[i] -= lr * cfg.weight_decay * param[i];
        moments.m[i] = cfg.beta1 * moments.m[i] + (1.0 - cfg.beta1) * g;
        moments.v[i] = cfg.beta2 * moments.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = moments.m[i] / bc1;
        let v_hat = moments.v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Optimizer state over a fixed set of trainable parameters.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    trainable: Vec<ParamId>,
    state: HashMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, trainable: Vec<ParamId>) -> Self {
        Self {
            config,
            step: 0,
            trainable,
            state: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn trainable(&self) -> &[ParamId] {
        &self.trainable
    }

    pub fn moments(&self, id: ParamId) -> Option<&Moments> {
        self.state.get(&id)
    }

    /// Applies one update at learning rate `lr` to every trainable parameter
    /// that has an accumulated gradient, then increments the step counter.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        self.step += 1;
        for &id in &self.trainable {
            let t = store.get_mut(id);
            let Some(grad) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let n = t.numel();
            let moments = self.state.entry(id).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            adamw_update(t.data_mut(), &grad, moments, self.step, lr, &self.config)?;
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then cosine decay to `min_lr` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmupCosine {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl WarmupCosine {
    pub fn new(base_lr: f64, total_steps: u64, warmup_frac: f64) -> Self {
        Self {
            base_lr,
            min_lr: 0.0,
            warmup_steps: (total_steps as f64 * warmup_frac).round() as u64,
            total_steps,
        }
    }

    /// Learning rate for the 0-based step `step`.
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_grad_zero_decay_leaves_params() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = vec![1.0, -2.0, 3.0];
        let mut m = Moments {
            m: vec![0.0; 3],
            v: vec![0.0; 3],
        };
        adamw_update(&mut p, &[0.0; 3], &mut m, 1, 0.1, &cfg).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_is_normalized_gradient() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let grads = [0.3, -2.0, 1e-3, 0.0];
        let start = [0.5, 0.5, 0.5, 0.5];
        let mut p = start.to_vec();
        let mut m = Moments {
            m: vec![0.0; 4],
            v: vec![0.0; 4],
        };
        let lr = 0.01;
        adamw_update(&mut p, &grads, &mut m, 1, lr, &cfg).unwrap();
        for i in 0..4 {
            // bias-corrected moments after one step are g and g²
            let g: f64 = grads[i];
            let expected = start[i] - lr * g / (g.abs() + cfg.eps);
            assert!((p[i] - expected).abs() < 1e-15, "{} vs {}", p[i], expected);
        }
    }

    #[test]
    fn decoupled_decay() {
        let cfg = AdamWConfig {
            weight_decay: 0.05,
            ..Default::default()
        };
        let mut p = vec![2.0, -4.0];
        let mut m = Moments {
            m: vec![0.0; 2],
            v: vec![0.0; 2],
        };
        adamw_update(&mut p, &[0.0, 0.0], &mut m, 1, 1.0, &cfg).unwrap();
        assert_eq!(p, vec![2.0 * 0.95, -4.0 * 0.95]);
        assert_eq!(m.m, vec![0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut m = Moments {
            m: vec![0.0; 2],
            v: vec![0.0; 2],
        };
        let mut p = vec![0.0; 2];
        assert!(adamw_update(&mut p, &[0.0; 3], &mut m, 1, 0.1, &AdamWConfig::default()).is_err());
    }

    #[test]
    fn optimizer_skips_untracked_params() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::ones([2])).unwrap();
        let b = store.add("b", Tensor::ones([2])).unwrap();
        store.get_mut(a).accumulate_grad(&[1.0, 1.0]).unwrap();
        store.get_mut(b).accumulate_grad(&[1.0, 1.0]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), vec![a]);
        opt.step(&mut store, 0.1).unwrap();
        assert_ne!(store.get(a).data(), &[1.0, 1.0]);
        assert_eq!(store.get(b).data(), &[1.0, 1.0]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn schedule_shape() {
        let s = WarmupCosine::new(1.0, 100, 0.05);
        assert_eq!(s.warmup_steps, 5);
        assert!((s.lr(0) - 0.2).abs() < 1e-12);
        assert!((s.lr(4) - 1.0).abs() < 1e-12);
        assert!((s.lr(5) - 1.0).abs() < 1e-12);
        assert!(s.lr(99) < 0.01);
        assert!((0..100).skip(5).all(|t| s.lr(t) >= s.lr(t + 1)));
    }
}
