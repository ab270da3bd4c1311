//! Loss, optimizer, schedule and the training loop.

pub mod data;
pub mod loss;
pub mod optim;
pub mod trainer;
pub mod workflow;

pub use loss::{generalized_dice_focal_loss, LossConfig, LossValue};
pub use optim::{lr_at, OptimizerConfig, Ranger};
pub use trainer::{train, Dataset, EpochSummary, Sample, StepRecord, TrainConfig, TrainLog};
pub use workflow::{train_models, train_roles};

use crate::error::{Error, Result};
use crate::nn::{Network, Real, Tensor};

/// Loss and per-parameter gradients for one input/target pair.
///
/// `target` must match the logits' shape. For 2D networks the slices stacked
/// along z are separate samples: Dice is evaluated per slice and averaged.
pub fn gradients<T: Real>(
    net: &Network<T>,
    x: Tensor<T>,
    target: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<(LossValue, Vec<Vec<T>>)> {
    let tape = net.forward_tape(x)?;
    let logits = tape.logits();
    if !logits.same_shape(target) {
        return Err(Error::ShapeMismatch(format!(
            "target {:?}x{} does not match logits {:?}x{}",
            target.dims(),
            target.channels(),
            logits.dims(),
            logits.channels()
        )));
    }
    let samples = match net.program().config().rank {
        crate::nn::Rank::Three => 1,
        crate::nn::Rank::Two => logits.dims()[2],
    };
    let (value, d) = loss::loss_and_grad(logits.data(), target.data(), samples, cfg, true)?;
    let d = Tensor::from_vec(logits.channels(), logits.dims(), d);
    let grads = net.backward(&tape, d);
    for (spec, g) in net.program().params().iter().zip(&grads) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(spec.name.clone()));
        }
    }
    Ok((value, grads))
}
