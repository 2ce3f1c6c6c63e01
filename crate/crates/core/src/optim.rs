//! ADAM with bias correction and a two-phase learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{config_err, usage_err, Result};
use crate::model::CubicRnn;
use crate::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config_err("ADAM betas must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(config_err("ADAM epsilon must be positive"));
        }
        Ok(())
    }
}

/// First and second moments of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> AdamSlot<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }
}

/// One ADAM update. Moment arithmetic runs in `f64` and is stored back as
/// `T`.
pub fn adam_step<T: Real>(param: &mut [T], grad: &[T], slot: &mut AdamSlot<T>, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if param.len() != grad.len() || slot.m.len() != param.len() || slot.v.len() != param.len() {
        return Err(usage_err(format!(
            "ADAM shapes differ: param {}, grad {}, slot {}",
            param.len(),
            grad.len(),
            slot.m.len()
        )));
    }
    slot.step += 1;
    let t = slot.step as f64;
    let c1 = 1.0 - cfg.beta1.powf(t);
    let c2 = 1.0 - cfg.beta2.powf(t);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(&mut slot.m).zip(&mut slot.v) {
        let g = g.as_f64();
        let m_new = cfg.beta1 * m.as_f64() + (1.0 - cfg.beta1) * g;
        let v_new = cfg.beta2 * v.as_f64() + (1.0 - cfg.beta2) * g * g;
        *m = T::from_f64(m_new);
        *v = T::from_f64(v_new);
        let update = lr * (m_new / c1) / ((v_new / c2).sqrt() + cfg.epsilon);
        *p = T::from_f64(p.as_f64() - update);
    }
    Ok(())
}

/// `lr` until iteration `switch_at`, `after` from then on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr: f64,
    pub switch_at: u64,
    pub after: f64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            lr,
            switch_at: u64::MAX,
            after: lr,
        }
    }

    /// Learning rate applied by the update at `iteration` (0-based).
    pub fn at(&self, iteration: u64) -> f64 {
        if iteration < self.switch_at {
            self.lr
        } else {
            self.after
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.after > 0.0 && self.lr.is_finite() && self.after.is_finite()) {
            return Err(config_err("learning rates must be positive and finite"));
        }
        Ok(())
    }
}

/// ADAM state for every kernel of a model, keyed by `name.weights` and
/// `name.bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub slots: BTreeMap<String, AdamSlot<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(model: &CubicRnn<T>, config: AdamConfig) -> Self {
        let mut slots = BTreeMap::new();
        for (name, k) in model.named_kernels() {
            slots.insert(format!("{name}.weights"), AdamSlot::new(k.weights().len()));
            slots.insert(format!("{name}.bias"), AdamSlot::new(k.bias().len()));
        }
        Self { config, slots }
    }

    pub fn step(&mut self, model: &mut CubicRnn<T>, grads: &CubicRnn<T>, lr: f64) -> Result<()> {
        let g = grads.named_kernels();
        for ((name, k), (gname, gk)) in model.named_kernels_mut().into_iter().zip(g) {
            debug_assert_eq!(name, gname);
            let (w, b) = k.params_mut();
            for (suffix, param, grad) in [("weights", w, gk.weights()), ("bias", b, gk.bias())] {
                let key = format!("{name}.{suffix}");
                let slot = self
                    .slots
                    .get_mut(&key)
                    .ok_or_else(|| usage_err(format!("optimizer has no slot for {key}")))?;
                adam_step(param, grad, slot, lr, &self.config)?;
            }
        }
        Ok(())
    }
}

/// Scale `grads` so that their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut CubicRnn<T>, max_norm: f64) -> f64 {
    let norm = grads
        .named_kernels()
        .iter()
        .flat_map(|(_, k)| k.weights().iter().chain(k.bias()))
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::from_f64(max_norm / norm);
        for (_, k) in grads.named_kernels_mut() {
            k.scale(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_gradient_leaves_param() {
        let mut p = vec![0.3f64, -1.2];
        let mut s = AdamSlot::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 0.01, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![0.3, -1.2]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = vec![0.0f64];
        let mut s = AdamSlot::new(1);
        adam_step(&mut p, &[0.5], &mut s, 0.001, &AdamConfig::default()).unwrap();
        let expected = -0.001 * 0.5 / (0.5 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_scalar_oracle() {
        let cfg = AdamConfig::default();
        let (g1, g2, lr) = (0.3f64, -0.7f64, 0.01);
        let mut p = vec![1.0f64];
        let mut s = AdamSlot::new(1);
        adam_step(&mut p, &[g1], &mut s, lr, &cfg).unwrap();
        adam_step(&mut p, &[g2], &mut s, lr, &cfg).unwrap();

        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let m1 = (1.0 - b1) * g1;
        let v1 = (1.0 - b2) * g1 * g1;
        let x1 = 1.0 - lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        let m2 = b1 * m1 + (1.0 - b1) * g2;
        let v2 = b2 * v1 + (1.0 - b2) * g2 * g2;
        let x2 = x1 - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
        assert!((p[0] - x2).abs() < 1e-12);
        assert!((s.m[0] - m2).abs() < 1e-12 && (s.v[0] - v2).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_usage_error() {
        let mut s = AdamSlot::<f64>::new(2);
        assert!(adam_step(&mut [0.0], &[0.0], &mut s, 0.1, &AdamConfig::default()).is_err());
    }

    #[test]
    fn schedule_switches() {
        let s = LrSchedule {
            lr: 1e-3,
            switch_at: 10,
            after: 1e-4,
        };
        assert_eq!((s.at(9), s.at(10)), (1e-3, 1e-4));
        assert_eq!(LrSchedule::constant(0.5).at(u64::MAX - 1), 0.5);
    }

    #[test]
    fn config_bounds() {
        assert!(AdamConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(AdamConfig { epsilon: 0.0, ..Default::default() }.validate().is_err());
        assert!(AdamConfig::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn first_step_moves_against_gradient(g in proptest::collection::vec(-10.0f64..10.0, 1..8)) {
            let mut p = vec![0.0; g.len()];
            let mut s = AdamSlot::new(g.len());
            adam_step(&mut p, &g, &mut s, 1e-3, &AdamConfig::default()).unwrap();
            for (pi, gi) in p.iter().zip(&g) {
                if *gi != 0.0 {
                    prop_assert_eq!(pi.signum(), -gi.signum());
                }
            }
            prop_assert!(s.v.iter().all(|&v| v >= 0.0));
        }
    }
}
