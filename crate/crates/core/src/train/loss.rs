//! Generalized Dice + focal loss on logits, with its analytic gradient.
//!
//! The Dice part uses two classes (foreground `p`, background `1 - p`) weighted
//! by `1 / (Σ target_c)²`; a class absent from the target would get an infinite
//! weight and instead takes the largest finite one. The focal part is computed
//! in logit space as `sigmoid(-x·(2t-1))^γ · BCE(x, t)`, which is
//! `-(1-p_t)^γ log p_t` for binary targets and stays defined for soft ones.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Real;

pub const SMOOTH: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_focal: f64,
    pub gamma: f64,
    /// Multiplies the whole loss (and hence every gradient).
    pub scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_focal: 0.2,
            gamma: 2.0,
            scale: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub dice: f64,
    pub focal: f64,
    pub total: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn class_weights(sum_t: [f64; 2]) -> [f64; 2] {
    let raw = sum_t.map(|s| 1.0 / (s * s));
    let max_finite = raw.iter().copied().filter(|w| w.is_finite()).fold(0.0, f64::max);
    raw.map(|w| if w.is_finite() { w } else { max_finite })
}

fn check<T>(logits: &[T], target: &[T], samples: usize) -> Result<()> {
    if logits.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "logits hold {} values, target {}",
            logits.len(),
            target.len()
        )));
    }
    if samples == 0 || logits.is_empty() || logits.len() % samples != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} voxels do not split into {samples} samples",
            logits.len()
        )));
    }
    Ok(())
}

/// Dice loss of one sample, with per-voxel derivative w.r.t. p when `dp` is given.
fn gdl_sample<T: Real>(p: &[f64], t: &[T], dp: Option<&mut [f64]>) -> f64 {
    let mut sum_t = [0.0; 2];
    let mut inter = [0.0; 2];
    let mut denom = [0.0; 2];
    for (&pv, &tv) in p.iter().zip(t) {
        let tv = tv.to_f64().unwrap();
        sum_t[1] += tv;
        sum_t[0] += 1.0 - tv;
        inter[1] += pv * tv;
        inter[0] += (1.0 - pv) * (1.0 - tv);
        denom[1] += pv + tv;
        denom[0] += (1.0 - pv) + (1.0 - tv);
    }
    let w = class_weights(sum_t);
    let i = w[0] * inter[0] + w[1] * inter[1];
    let d = w[0] * denom[0] + w[1] * denom[1];
    let num = 2.0 * i + SMOOTH;
    let den = d + SMOOTH;
    if let Some(dp) = dp {
        // dI/dp = w1 t - w0 (1 - t), dD/dp = w1 - w0
        let dd = w[1] - w[0];
        for (g, &tv) in dp.iter_mut().zip(t) {
            let tv = tv.to_f64().unwrap();
            let di = w[1] * tv - w[0] * (1.0 - tv);
            *g = -(2.0 * di * den - num * dd) / (den * den);
        }
    }
    1.0 - num / den
}

/// Mean generalized Dice loss over `samples` equal contiguous chunks.
pub fn generalized_dice<T: Real>(logits: &[T], target: &[T], samples: usize) -> Result<f64> {
    check(logits, target, samples)?;
    let n = logits.len() / samples;
    let mut total = 0.0;
    for (l, t) in logits.chunks(n).zip(target.chunks(n)) {
        let p: Vec<f64> = l.iter().map(|&x| sigmoid(x.to_f64().unwrap())).collect();
        total += gdl_sample(&p, t, None);
    }
    Ok(total / samples as f64)
}

/// Mean focal loss over all voxels.
pub fn focal<T: Real>(logits: &[T], target: &[T], gamma: f64) -> Result<f64> {
    check(logits, target, 1)?;
    let sum: f64 = logits
        .iter()
        .zip(target)
        .map(|(&x, &t)| focal_voxel(x.to_f64().unwrap(), t.to_f64().unwrap(), gamma).0)
        .sum();
    Ok(sum / logits.len() as f64)
}

/// (focal value, derivative w.r.t. the logit).
fn focal_voxel(x: f64, t: f64, gamma: f64) -> (f64, f64) {
    let s = 2.0 * t - 1.0;
    let bce = softplus(x) - x * t;
    let m = sigmoid(-x * s);
    let mg = if gamma == 0.0 { 1.0 } else { m.powf(gamma) };
    let value = mg * bce;
    let dm = -s * m * (1.0 - m);
    let dmg = if gamma == 0.0 {
        0.0
    } else {
        gamma * m.powf(gamma - 1.0) * dm
    };
    (value, dmg * bce + mg * (sigmoid(x) - t))
}

pub fn generalized_dice_focal_loss<T: Real>(logits: &[T], target: &[T], cfg: &LossConfig) -> Result<LossValue> {
    loss_and_grad(logits, target, 1, cfg, false).map(|(v, _)| v)
}

/// Loss over `samples` stacked samples (Dice per sample, averaged) and, when
/// `want_grad`, its derivative w.r.t. every logit.
pub fn loss_and_grad<T: Real>(
    logits: &[T],
    target: &[T],
    samples: usize,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(LossValue, Vec<T>)> {
    check(logits, target, samples)?;
    let n = logits.len() / samples;
    let total_n = logits.len() as f64;
    let mut grad = if want_grad { vec![T::zero(); logits.len()] } else { Vec::new() };
    let mut dice = 0.0;
    let mut focal_sum = 0.0;
    let mut dp = vec![0.0; n];
    for (k, (l, t)) in logits.chunks(n).zip(target.chunks(n)).enumerate() {
        let p: Vec<f64> = l.iter().map(|&x| sigmoid(x.to_f64().unwrap())).collect();
        dice += gdl_sample(&p, t, want_grad.then_some(&mut dp[..]));
        for (j, (&x, &tv)) in l.iter().zip(t).enumerate() {
            let (f, df) = focal_voxel(x.to_f64().unwrap(), tv.to_f64().unwrap(), cfg.gamma);
            focal_sum += f;
            if want_grad {
                let d_dice = dp[j] * p[j] * (1.0 - p[j]) / samples as f64;
                let d_focal = cfg.lambda_focal * df / total_n;
                grad[k * n + j] = T::from_f64(cfg.scale * (d_dice + d_focal)).unwrap();
            }
        }
    }
    let dice = dice / samples as f64;
    let focal = focal_sum / total_n;
    let total = cfg.scale * (dice + cfg.lambda_focal * focal);
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok((LossValue { dice, focal, total }, grad))
}
