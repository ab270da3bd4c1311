//! Rectified Adam wrapped in LookAhead (the "Ranger" combination), and the
//! flat + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled: parameters shrink by `lr * weight_decay` each step.
    pub weight_decay: f64,
    pub lookahead_k: usize,
    pub lookahead_alpha: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.95,
            beta2: 0.99,
            eps: 1e-6,
            weight_decay: 0.01,
            lookahead_k: 6,
            lookahead_alpha: 0.5,
        }
    }
}

/// Step size multiplier of rectified Adam at step `t` (1-based), or `None`
/// while the approximated SMA length is at most 4 and the update falls back
/// to bias-corrected momentum.
pub fn rectification(beta2: f64, t: u64) -> Option<f64> {
    let r_inf = 2.0 / (1.0 - beta2) - 1.0;
    let b2t = beta2.powi(t as i32);
    let r = r_inf - 2.0 * t as f64 * b2t / (1.0 - b2t);
    (r > 4.0).then(|| ((r - 4.0) * (r - 2.0) * r_inf / ((r_inf - 4.0) * (r_inf - 2.0) * r)).sqrt())
}

#[derive(Clone, Debug)]
struct Slot<T> {
    m: Vec<T>,
    v: Vec<T>,
    slow: Vec<T>,
}

/// Optimizer state for a list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Ranger<T> {
    cfg: OptimizerConfig,
    step: u64,
    slots: Vec<Slot<T>>,
}

impl<T: Real> Ranger<T> {
    /// Zero moments; slow weights start equal to `params`.
    pub fn new(cfg: OptimizerConfig, params: &[Vec<T>]) -> Self {
        let slots = params
            .iter()
            .map(|p| Slot {
                m: vec![T::zero(); p.len()],
                v: vec![T::zero(); p.len()],
                slow: p.clone(),
            })
            .collect();
        Ranger { cfg, step: 0, slots }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn slow_weights(&self) -> impl Iterator<Item = &[T]> {
        self.slots.iter().map(|s| s.slow.as_slice())
    }

    /// One update with a learning rate per parameter tensor.
    pub fn step(&mut self, params: &mut [Vec<T>], grads: &[Vec<T>], lrs: &[f64]) -> Result<()> {
        assert_eq!(params.len(), self.slots.len());
        assert_eq!(grads.len(), self.slots.len());
        assert_eq!(lrs.len(), self.slots.len());
        if let Some(i) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteGradient(format!("parameter tensor {i}")));
        }
        self.step += 1;
        let t = self.step;
        let OptimizerConfig {
            beta1: b1,
            beta2: b2,
            eps,
            weight_decay: wd,
            ..
        } = self.cfg;
        let debias1 = 1.0 - b1.powi(t as i32);
        let debias2 = 1.0 - b2.powi(t as i32);
        let rect = rectification(b2, t);
        for ((p, g), (slot, &lr)) in params.iter_mut().zip(grads).zip(self.slots.iter_mut().zip(lrs)) {
            let decay = 1.0 - lr * wd;
            for i in 0..p.len() {
                let gi = g[i].to_f64().unwrap();
                let m = b1 * slot.m[i].to_f64().unwrap() + (1.0 - b1) * gi;
                let v = b2 * slot.v[i].to_f64().unwrap() + (1.0 - b2) * gi * gi;
                slot.m[i] = T::from_f64(m).unwrap();
                slot.v[i] = T::from_f64(v).unwrap();
                let mut x = p[i].to_f64().unwrap() * decay;
                x -= match rect {
                    Some(r) => lr * r / debias1 * m / ((v / debias2).sqrt() + eps),
                    None => lr / debias1 * m,
                };
                p[i] = T::from_f64(x).unwrap();
            }
        }
        if t % self.cfg.lookahead_k as u64 == 0 {
            let a = self.cfg.lookahead_alpha;
            for (p, slot) in params.iter_mut().zip(&mut self.slots) {
                for (w, s) in p.iter_mut().zip(&mut slot.slow) {
                    *s = *s + T::from_f64(a).unwrap() * (*w - *s);
                    *w = *s;
                }
            }
        }
        Ok(())
    }
}

/// Flat at `lr` until `flat_fraction` of the run, then cosine-annealed to 0
/// at the final step (`total_steps - 1`).
pub fn lr_at(step: usize, total_steps: usize, lr: f64, flat_fraction: f64) -> f64 {
    let flat = (flat_fraction * total_steps as f64).ceil() as usize;
    if step < flat {
        return lr;
    }
    let last = total_steps.saturating_sub(1);
    let t = if last <= flat {
        1.0
    } else {
        ((step - flat) as f64 / (last - flat) as f64).min(1.0)
    };
    lr * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_without_decay_leave_parameters() {
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = vec![vec![1.5f32, -2.0], vec![0.25]];
        let before = p.clone();
        let mut opt = Ranger::new(cfg, &p);
        let g = vec![vec![0.0; 2], vec![0.0]];
        for _ in 0..20 {
            opt.step(&mut p, &g, &[1e-3, 1e-3]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = vec![vec![0.0f32]];
        let mut opt = Ranger::new(OptimizerConfig::default(), &p);
        assert!(matches!(
            opt.step(&mut p, &[vec![f32::NAN]], &[1e-3]),
            Err(Error::NonFiniteGradient(_))
        ));
    }

    #[test]
    fn rectification_turns_on_after_a_few_steps() {
        assert!(rectification(0.99, 1).is_none());
        let first = (1..100).find(|&t| rectification(0.99, t).is_some()).unwrap();
        assert!(first > 2 && first < 10, "{first}");
    }

    #[test]
    fn schedule_shape() {
        assert_eq!(lr_at(0, 100, 1e-3, 0.75), 1e-3);
        assert_eq!(lr_at(50, 100, 1e-3, 0.75), 1e-3);
        assert_eq!(lr_at(75, 100, 1e-3, 0.75), 1e-3);
        assert!(lr_at(99, 100, 1e-3, 0.75) < 1e-9);
        assert!(lr_at(87, 100, 1e-3, 0.75) < 1e-3);
    }
}
