//! Noise schedule, the noise-prediction objective and deterministic DDIM sampling.

mod sampler;
mod schedule;

pub use sampler::{ddim_sample, ddim_step, ddim_timesteps, guide, initial_noise, EpsModel, SamplerConfig};
pub use schedule::NoiseSchedule;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::numcore::{Tape, Tensor, Var};

/// `z_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn add_noise(schedule: &NoiseSchedule, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    let abar = schedule.alpha_bar(t)?;
    let (a, b) = (abar.sqrt() as f32, (1.0 - abar).sqrt() as f32);
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Mean squared error between predicted and true noise.
pub fn diffusion_loss(pred_eps: &Tensor, true_eps: &Tensor) -> Result<f32> {
    let mut tape = Tape::new();
    let p = tape.constant(pred_eps.clone());
    let t = tape.constant(true_eps.clone());
    let l = tape.mse(p, t)?;
    Ok(tape.value(l).item())
}

/// [`diffusion_loss`] recorded on a tape.
pub fn diffusion_loss_var(tape: &mut Tape, pred_eps: Var, true_eps: Var) -> Result<Var> {
    tape.mse(pred_eps, true_eps)
}

/// One-step clean-image estimate `(z_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`,
/// differentiable in `eps`.
pub fn predict_x0(tape: &mut Tape, schedule: &NoiseSchedule, z_t: Var, eps: Var, t: usize) -> Result<Var> {
    let abar = schedule.alpha_bar(t)?;
    let scaled_z = tape.scale(z_t, (1.0 / abar.sqrt()) as f32);
    let scaled_eps = tape.scale(eps, ((1.0 - abar).sqrt() / abar.sqrt()) as f32);
    tape.sub(scaled_z, scaled_eps)
}

/// Standard normal tensor.
pub fn gaussian(dims: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(dims, |_| rng.sample(StandardNormal))
}

/// Clamps every value to `[-1, 1]`.
pub fn clamp_unit(x: &Tensor) -> Tensor {
    x.map(|v| v.clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests;
