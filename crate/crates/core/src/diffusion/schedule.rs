use crate::error::{ensure, Result};

/// Linear variance schedule and its cumulative products, indexed from `t = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        ensure!(steps >= 1, "schedule needs at least one step");
        ensure!(
            0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0,
            "betas must satisfy 0 < start <= end < 1, got {beta_start} and {beta_end}"
        );
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                let u = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                beta_start + u * (beta_end - beta_start)
            })
            .collect();
        let mut acc = 1.0;
        let alphas_cumprod = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alphas_cumprod })
    }

    /// Number of training timesteps.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.betas[t])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alphas_cumprod[t])
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    fn check(&self, t: usize) -> Result<()> {
        ensure!(
            t < self.betas.len(),
            "timestep {t} out of range for a {}-step schedule",
            self.betas.len()
        );
        Ok(())
    }
}
