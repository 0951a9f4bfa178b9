//! Pose network, pose perception loss and the scheduled total objective.

mod posenet;
mod train;

pub use posenet::{count_modes, decode_heatmaps, heatmap_targets, PoseNet, PoseNetConfig, PoseNetOutput};
pub use train::{evaluate_pck, nearest_figure, train_posenet, PoseTrainConfig, PoseTrainReport};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numcore::{ParamStore, Real, Tape, Var};

pub const POSENET_PREFIX: &str = "posenet";
pub const POSENET_EVAL_PREFIX: &str = "posenet_eval";

/// `(1 / (h w)) sum_ij |phi(gen)_ij - phi(ref)_ij|^2` over the encoder feature
/// map of `net`. `net` should be frozen in `store`, so only `gen` (and
/// whatever produced it) receives gradients.
pub fn pose_perception_loss<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    net: &PoseNet,
    gen: Var,
    reference: Var,
) -> Result<Var> {
    ensure!(
        tape.dims(gen) == tape.dims(reference),
        "pose perception loss: image dims {:?} vs {:?}",
        tape.dims(gen),
        tape.dims(reference)
    );
    let fg = net.features(tape, store, gen)?;
    let fr = net.features(tape, store, reference)?;
    feature_distance(tape, fg, fr)
}

/// Squared feature distance summed over channels and averaged over positions.
pub fn feature_distance<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let (h, w, _) = tape.value(a).grid_dims()?;
    let d = tape.sub(a, b)?;
    let s = tape.sum_squares(d);
    Ok(tape.scale(s, T::from_f64(1.0 / (h * w) as f64)))
}

/// Weighting and schedule of the two loss terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f32,
    /// First zero-based epoch in which the pose term is applied.
    pub activation_epoch: usize,
}

impl LossConfig {
    /// Pose term active in the last `last` of `epochs` epochs.
    pub fn last_epochs(alpha: f32, epochs: usize, last: usize) -> Result<Self> {
        ensure!(alpha >= 0.0 && alpha.is_finite(), "alpha must be finite and nonnegative, got {alpha}");
        ensure!(last <= epochs, "pose loss epochs {last} exceed total epochs {epochs}");
        Ok(Self {
            alpha,
            activation_epoch: epochs - last,
        })
    }

    pub fn active(&self, epoch: usize) -> bool {
        self.alpha > 0.0 && epoch >= self.activation_epoch
    }
}

/// `l_d` before the activation epoch, `l_d + alpha l_p` from it on.
pub fn total_loss(l_d: f32, l_p: f32, cfg: &LossConfig, epoch: usize) -> f32 {
    if epoch < cfg.activation_epoch {
        l_d
    } else {
        l_d + cfg.alpha * l_p
    }
}

#[cfg(test)]
mod tests;
