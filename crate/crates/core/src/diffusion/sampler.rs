use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{clamp_unit, gaussian, NoiseSchedule};
use crate::error::{ensure, Error, Result};
use crate::numcore::Tensor;

/// Anything that predicts the noise in `z_t` at timestep `t`.
pub trait EpsModel {
    fn eps(&self, z: &Tensor, t: usize) -> Result<Tensor>;
}

impl<F> EpsModel for F
where
    F: Fn(&Tensor, usize) -> Result<Tensor>,
{
    fn eps(&self, z: &Tensor, t: usize) -> Result<Tensor> {
        self(z, t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub eta: f64,
    pub seed: u64,
    pub guidance: f32,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            eta: 0.0,
            seed: 0,
            guidance: 3.0,
        }
    }
}

/// Uniformly spaced timesteps, descending from `T - 1`.
pub fn ddim_timesteps(train_steps: usize, steps: usize) -> Result<Vec<usize>> {
    ensure!(
        steps >= 1 && steps <= train_steps,
        "DDIM steps must be in 1..={train_steps}, got {steps}"
    );
    let stride = train_steps / steps;
    Ok((0..steps).map(|i| train_steps - 1 - i * stride).collect())
}

/// Deterministic DDIM update from cumulative signal level `abar_t` to
/// `abar_prev`. The clean estimate is clipped to `[-1, 1]` and the noise
/// direction recomputed from the clipped estimate.
pub fn ddim_step(z: &Tensor, eps: &Tensor, abar_t: f64, abar_prev: f64) -> Result<Tensor> {
    let (sa, sb) = (abar_t.sqrt() as f32, (1.0 - abar_t).sqrt() as f32);
    let (a, b) = (abar_prev.sqrt() as f32, (1.0 - abar_prev).sqrt() as f32);
    z.zip_map(eps, |zv, ev| {
        let x0 = ((zv - sb * ev) / sa).clamp(-1.0, 1.0);
        let e = if sb > 0.0 { (zv - sa * x0) / sb } else { ev };
        a * x0 + b * e
    })
}

/// Classifier-free guidance `eps_u + s (eps_c - eps_u)`.
pub fn guide(eps_uncond: &Tensor, eps_cond: &Tensor, scale: f32) -> Result<Tensor> {
    eps_uncond.zip_map(eps_cond, |u, c| u + scale * (c - u))
}

/// `z_T` for sample `index`; the stream depends only on `(seed, index)`.
pub fn initial_noise(dims: &[usize], seed: u64, index: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    gaussian(dims, &mut rng)
}

/// Deterministic DDIM trajectory from seeded Gaussian noise.
pub fn ddim_sample(
    model: &impl EpsModel,
    schedule: &NoiseSchedule,
    dims: &[usize],
    cfg: &SamplerConfig,
    index: u64,
) -> Result<Tensor> {
    ensure!(cfg.eta == 0.0, "only deterministic sampling (eta = 0) is supported, got {}", cfg.eta);
    let ts = ddim_timesteps(schedule.len(), cfg.steps)?;
    let mut z = initial_noise(dims, cfg.seed, index);
    for (i, &t) in ts.iter().enumerate() {
        let eps = model.eps(&z, t)?;
        ensure!(
            eps.dims() == z.dims(),
            "model returned dims {:?} for input {:?}",
            eps.dims(),
            z.dims()
        );
        if !eps.is_finite() {
            return Err(Error::NonFinite(format!(
                "model output at DDIM step {i} (t = {t})"
            )));
        }
        let abar_prev = match ts.get(i + 1) {
            Some(&tp) => schedule.alpha_bar(tp)?,
            None => 1.0,
        };
        z = ddim_step(&z, &eps, schedule.alpha_bar(t)?, abar_prev)?;
    }
    Ok(clamp_unit(&z))
}
