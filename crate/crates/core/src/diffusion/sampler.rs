//! Ancestral (DDPM) and pseudo-linear multistep (PLMS) samplers.

use rand::Rng;

use super::NoiseSchedule;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Anything that predicts the noise in `z` at step `t` (the same step for
/// every batch row).
pub trait NoisePredictor {
    fn predict_noise(&self, z: &Tensor, t: usize) -> Result<Tensor>;
}

/// `steps` evenly spaced step indices from `T−1` down to `T/steps − 1`.
pub fn timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::contract(format!(
            "sampler steps must be in [1, {total}], got {steps}"
        )));
    }
    Ok((0..steps).rev().map(|i| (i + 1) * total / steps - 1).collect())
}

fn axpby(a: f64, x: &Tensor, b: f64, y: &Tensor) -> Tensor {
    Tensor::from_fn(x.shape().to_vec(), |i| a * x.data()[i] + b * y.data()[i])
}

/// Predicted clean sample from `z_t` and a noise estimate.
fn predict_x0(z: &Tensor, eps: &Tensor, alpha_bar: f64) -> Tensor {
    axpby(1.0 / alpha_bar.sqrt(), z, -(1.0 - alpha_bar).sqrt() / alpha_bar.sqrt(), eps)
}

/// Ancestral sampling over a (possibly respaced) step sequence, starting
/// from the given `z_T`. Uses the posterior variance of each respaced step.
pub fn ddpm_from<M: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    z_t: Tensor,
    steps: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let ts = timesteps(schedule.len(), steps)?;
    let mut z = z_t;
    for (i, &t) in ts.iter().enumerate() {
        let prev = ts.get(i + 1).copied();
        let ab = schedule.alpha_bar(Some(t));
        let ab_prev = schedule.alpha_bar(prev);
        let beta = 1.0 - ab / ab_prev;
        let eps = model.predict_noise(&z, t)?;
        let x0 = predict_x0(&z, &eps, ab);
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let mean = axpby(c0, &x0, ct, &z);
        z = match prev {
            None => mean,
            Some(_) => {
                let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
                let noise = Tensor::randn(mean.shape().to_vec(), 1.0, rng);
                axpby(1.0, &mean, sigma, &noise)
            }
        };
    }
    Ok(z)
}

/// [`ddpm_from`] starting from fresh standard normal noise.
pub fn ddpm_sample<M: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    shape: &[usize],
    steps: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let z = Tensor::randn(shape.to_vec(), 1.0, rng);
    ddpm_from(model, schedule, z, steps, rng)
}

/// Deterministic update from `t` to `prev` given a noise estimate.
fn ddim_step(z: &Tensor, eps: &Tensor, ab: f64, ab_prev: f64) -> Tensor {
    let x0 = predict_x0(z, eps, ab);
    axpby(ab_prev.sqrt(), &x0, (1.0 - ab_prev).sqrt(), eps)
}

/// Pseudo-linear multistep sampling from the given `z_T`.
///
/// The first step uses a pseudo improved Euler (Heun) update; later steps
/// combine up to four noise estimates with Adams–Bashforth weights. A single
/// step is one deterministic update.
pub fn plms_from<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    z_t: Tensor,
    steps: usize,
) -> Result<Tensor> {
    let ts = timesteps(schedule.len(), steps)?;
    let mut z = z_t;
    let mut history: Vec<Tensor> = Vec::with_capacity(4);
    for (i, &t) in ts.iter().enumerate() {
        let prev = ts.get(i + 1).copied();
        let ab = schedule.alpha_bar(Some(t));
        let ab_prev = schedule.alpha_bar(prev);
        let e_t = model.predict_noise(&z, t)?;
        let e = |k: usize| &history[history.len() - k];
        let eps = match (history.len(), prev) {
            (0, None) => e_t.clone(),
            (0, Some(p)) => {
                let z_next = ddim_step(&z, &e_t, ab, ab_prev);
                let e_next = model.predict_noise(&z_next, p)?;
                axpby(0.5, &e_t, 0.5, &e_next)
            }
            (1, _) => axpby(1.5, &e_t, -0.5, e(1)),
            (2, _) => Tensor::from_fn(e_t.shape().to_vec(), |j| {
                (23.0 * e_t.data()[j] - 16.0 * e(1).data()[j] + 5.0 * e(2).data()[j]) / 12.0
            }),
            _ => Tensor::from_fn(e_t.shape().to_vec(), |j| {
                (55.0 * e_t.data()[j] - 59.0 * e(1).data()[j] + 37.0 * e(2).data()[j] - 9.0 * e(3).data()[j])
                    / 24.0
            }),
        };
        z = ddim_step(&z, &eps, ab, ab_prev);
        history.push(e_t);
        if history.len() > 3 {
            history.remove(0);
        }
    }
    Ok(z)
}

/// [`plms_from`] starting from fresh standard normal noise.
pub fn plms_sample<M: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    shape: &[usize],
    steps: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let z = Tensor::randn(shape.to_vec(), 1.0, rng);
    plms_from(model, schedule, z, steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use std::cell::RefCell;

    /// Knows the clean sample and returns the exact noise it implies.
    struct Oracle {
        z0: Tensor,
        schedule: NoiseSchedule,
    }

    impl NoisePredictor for Oracle {
        fn predict_noise(&self, z: &Tensor, t: usize) -> Result<Tensor> {
            let ab = self.schedule.alpha_bars[t];
            Ok(axpby(
                1.0 / (1.0 - ab).sqrt(),
                z,
                -ab.sqrt() / (1.0 - ab).sqrt(),
                &self.z0,
            ))
        }
    }

    #[test]
    fn timestep_spacing() {
        assert_eq!(timesteps(1000, 1).unwrap(), vec![999]);
        assert_eq!(timesteps(1000, 4).unwrap(), vec![999, 749, 499, 249]);
        assert_eq!(timesteps(10, 10).unwrap(), (0..10).rev().collect::<Vec<_>>());
        assert_eq!(timesteps(1000, 250).unwrap().len(), 250);
        assert!(timesteps(1000, 1001).is_err());
        assert!(timesteps(1000, 0).is_err());
    }

    #[test]
    fn one_step_ddpm_inverts_q_sample() {
        let schedule = NoiseSchedule::linear(1, 0.3, 0.3).unwrap();
        let mut rng = seeded_rng(1, 0);
        let z0 = Tensor::randn([2, 4], 1.0, &mut rng);
        let eps = Tensor::randn([2, 4], 1.0, &mut rng);
        let z1 = schedule.q_sample(&z0, &[0, 0], &eps).unwrap();
        let oracle = Oracle {
            z0: z0.clone(),
            schedule: schedule.clone(),
        };
        let out = ddpm_from(&oracle, &schedule, z1.clone(), 1, &mut rng).unwrap();
        assert!(out.max_abs_diff(&z0) < 1e-12);
        let out = plms_from(&oracle, &schedule, z1, 1).unwrap();
        assert!(out.max_abs_diff(&z0) < 1e-12);
    }

    #[test]
    fn oracle_recovers_clean_sample_over_many_steps() {
        let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let mut rng = seeded_rng(2, 0);
        let z0 = Tensor::randn([1, 6], 1.0, &mut rng);
        let oracle = Oracle {
            z0: z0.clone(),
            schedule: schedule.clone(),
        };
        let out = plms_sample(&oracle, &schedule, &[1, 6], 50, &mut rng).unwrap();
        assert!(out.max_abs_diff(&z0) < 1e-8);
        let out = ddpm_sample(&oracle, &schedule, &[1, 6], 100, &mut rng).unwrap();
        assert!(out.max_abs_diff(&z0) < 1e-8);
    }

    struct Recorder {
        calls: RefCell<Vec<usize>>,
    }

    impl NoisePredictor for Recorder {
        fn predict_noise(&self, z: &Tensor, t: usize) -> Result<Tensor> {
            self.calls.borrow_mut().push(t);
            Ok(Tensor::full(z.shape().to_vec(), 0.1))
        }
    }

    #[test]
    fn plms_call_pattern() {
        let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let rec = Recorder {
            calls: RefCell::new(Vec::new()),
        };
        plms_from(&rec, &schedule, Tensor::zeros([1, 2]), 4).unwrap();
        // one extra evaluation for the improved Euler start
        assert_eq!(*rec.calls.borrow(), vec![999, 749, 749, 499, 249]);
        rec.calls.borrow_mut().clear();
        plms_from(&rec, &schedule, Tensor::zeros([1, 2]), 1).unwrap();
        assert_eq!(*rec.calls.borrow(), vec![999]);
    }

    #[test]
    fn ddpm_is_seed_deterministic() {
        let schedule = NoiseSchedule::linear(100, 1e-3, 0.05).unwrap();
        let rec = Recorder {
            calls: RefCell::new(Vec::new()),
        };
        let a = ddpm_sample(&rec, &schedule, &[2, 3], 100, &mut seeded_rng(3, 0)).unwrap();
        let b = ddpm_sample(&rec, &schedule, &[2, 3], 100, &mut seeded_rng(3, 0)).unwrap();
        assert_eq!(a, b);
    }
}
