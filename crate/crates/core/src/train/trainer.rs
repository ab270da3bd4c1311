//! The training loop: shuffled passes over a dataset, per-group learning
//! rates on the flat + cosine schedule, global-norm clipping, Ranger updates.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::LossConfig;
use super::optim::{lr_at, OptimizerConfig, Ranger};
use crate::error::{Error, Result};
use crate::nn::{Network, NetworkWeights, ParamGroup, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lambda_focal: f64,
    pub focal_gamma: f64,
    /// Volumes per step for 3D nets, slices per step for 2D nets.
    pub batch_size: usize,
    /// One epoch is one shuffled pass over the subjects.
    pub epochs: usize,
    pub flat_fraction: f64,
    /// Learning-rate factors for the (encoder, decoder, head) groups.
    pub lr_multipliers: [f64; 3],
    pub seed: u64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub lookahead_k: usize,
    pub lookahead_alpha: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let o = OptimizerConfig::default();
        TrainConfig {
            lr: 0.001,
            lambda_focal: 0.2,
            focal_gamma: 2.0,
            batch_size: 1,
            epochs: 1,
            flat_fraction: 0.75,
            lr_multipliers: [1.0; 3],
            seed: 0,
            clip_norm: 1.0,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            lookahead_k: o.lookahead_k,
            lookahead_alpha: o.lookahead_alpha,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.lambda_focal >= 0.0) || !(self.focal_gamma >= 0.0) {
            return bad("lambda_focal and focal_gamma must be non-negative");
        }
        if !(self.flat_fraction > 0.0 && self.flat_fraction < 1.0) {
            return bad("flat_fraction must lie in (0, 1)");
        }
        if self.lr_multipliers.iter().any(|m| !(*m >= 0.0)) {
            return bad("lr_multipliers must be non-negative");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.lookahead_k == 0 {
            return bad("batch_size, epochs and lookahead_k must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be non-negative");
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda_focal: self.lambda_focal,
            gamma: self.focal_gamma,
            scale: 1.0,
        }
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            lookahead_k: self.lookahead_k,
            lookahead_alpha: self.lookahead_alpha,
        }
    }

    fn multiplier(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Encoder => self.lr_multipliers[0],
            ParamGroup::Decoder => self.lr_multipliers[1],
            ParamGroup::Head => self.lr_multipliers[2],
        }
    }
}

/// One network input with its target. For 2D nets the z extent stacks
/// independent slices.
pub struct Sample {
    pub x: Tensor<f32>,
    pub target: Tensor<f32>,
}

pub trait Dataset {
    /// Number of subjects; an epoch visits each once.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Subjects consumed per optimizer step.
    fn items_per_step(&self, batch_size: usize) -> usize;

    /// Training samples for the given subjects. Gradients are averaged over
    /// the returned samples.
    fn batch(&self, items: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Sample>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Steps whose gradient norm exceeded `clip_norm`.
    pub clipped_steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
}

impl TrainLog {
    /// `step,epoch,lr,loss` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,epoch,lr,loss\n");
        for r in &self.steps {
            s.push_str(&format!("{},{},{:e},{}\n", r.step, r.epoch, r.lr, r.loss));
        }
        s
    }
}

pub fn steps_per_epoch(len: usize, items_per_step: usize) -> usize {
    len.div_ceil(items_per_step.max(1))
}

/// Trains `init` on `data`. `on_epoch` sees the weights after every epoch
/// (checkpointing) and may abort by returning an error.
pub fn train<D: Dataset + ?Sized>(
    init: &NetworkWeights,
    data: &D,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochSummary, &NetworkWeights) -> Result<()>,
) -> Result<(NetworkWeights, TrainLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut net = Network::<f32>::from_weights(init)?;
    let groups: Vec<f64> = net.program().params().iter().map(|p| cfg.multiplier(p.group)).collect();
    let mut opt = Ranger::new(cfg.optimizer(), net.params());
    let loss_cfg = cfg.loss();
    let per_step = data.items_per_step(cfg.batch_size);
    let epoch_steps = steps_per_epoch(data.len(), per_step);
    let total = epoch_steps * cfg.epochs;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sum = 0.0;
        let mut clipped = 0;
        for chunk in order.chunks(per_step) {
            // every step draws from its own stream, so a step's samples do
            // not depend on how much randomness earlier steps consumed
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(step as u64 + 1);
            let samples = data.batch(chunk, cfg.batch_size, &mut rng)?;
            if samples.is_empty() {
                return Err(Error::EmptyDataset);
            }
            let mut grads: Option<Vec<Vec<f32>>> = None;
            let mut loss = 0.0;
            for s in samples.iter() {
                let (value, g) = super::gradients(&net, s.x.clone(), &s.target, &loss_cfg)?;
                loss += value.total;
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let n = samples.len() as f32;
            let mut grads = grads.expect("non-empty batch");
            loss /= n as f64;
            let mut norm2 = 0.0f64;
            for g in grads.iter_mut() {
                for v in g.iter_mut() {
                    *v /= n;
                    norm2 += (*v as f64) * (*v as f64);
                }
            }
            let norm = norm2.sqrt();
            if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
                clipped += 1;
                let k = (cfg.clip_norm / norm) as f32;
                grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= k));
            }
            let lr = lr_at(step, total, cfg.lr, cfg.flat_fraction);
            let lrs: Vec<f64> = groups.iter().map(|m| m * lr).collect();
            opt.step(net.params_mut(), &grads, &lrs)?;
            log.steps.push(StepRecord { step, epoch, lr, loss });
            sum += loss;
            step += 1;
        }
        let summary = EpochSummary {
            epoch,
            mean_loss: sum / epoch_steps as f64,
            clipped_steps: clipped,
        };
        log.epochs.push(summary);
        on_epoch(&summary, &net.to_weights())?;
    }
    Ok((net.to_weights(), log))
}
