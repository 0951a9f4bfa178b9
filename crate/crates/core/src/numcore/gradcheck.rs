//! Central finite-difference checks of tape gradients, run in f64.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Result};
use crate::numcore::params::ParamStore;
use crate::numcore::tape::{Tape, Var};

/// Coordinates with both gradients below this magnitude are compared on an
/// absolute scale: `|a - n| / max(|a|, |n|, ABS_FLOOR)`.
pub const ABS_FLOOR: f64 = 1e-3;

/// Upper bound on fragment size.
pub const MAX_PARAMS: usize = 100_000;

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Fraction of each tensor's coordinates to probe.
    pub fraction: f64,
    /// Lower bound on probes per tensor (capped by its size).
    pub min_coords: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-4,
            fraction: 0.01,
            min_coords: 4,
            seed: 0,
        }
    }
}

/// What a fragment evaluation produced: the scalar loss plus a fingerprint of
/// any discrete structure (such as KNN neighbour lists) the forward pass chose.
/// A probe whose `+step` and `-step` evaluations disagree on the fingerprint
/// straddles a discontinuity and is skipped.
#[derive(Clone, Copy, Debug)]
pub struct Probe {
    pub loss: Var,
    pub structure: u64,
}

impl From<Var> for Probe {
    fn from(loss: Var) -> Self {
        Probe { loss, structure: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct TensorReport {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorReport>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_err <= self.tolerance) && self.checked() > 0
    }

    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for t in &self.tensors {
            s.push_str(&format!(
                "{:<48} checked {:>4} skipped {:>2} max_rel_err {:.3e} {}\n",
                t.name,
                t.checked,
                t.skipped,
                t.max_rel_err,
                if t.max_rel_err <= self.tolerance { "ok" } else { "FAIL" }
            ));
        }
        s
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compares tape gradients of every trainable entry in `store` with central
/// differences on a random coordinate sample. Differences at `step` and
/// `step / 2` are Richardson-combined, which cancels the `step^2` error term.
pub fn gradcheck<F, P>(store: &ParamStore<f64>, fragment: F, cfg: &GradcheckConfig) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<P>,
    P: Into<Probe>,
{
    let trainable: usize = store.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.tensor.len()).sum();
    ensure!(trainable > 0, "gradcheck fragment has no trainable parameters");
    ensure!(
        trainable < MAX_PARAMS,
        "gradcheck fragment has {trainable} parameters, limit is {MAX_PARAMS}"
    );

    let eval = |s: &ParamStore<f64>| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let probe: Probe = fragment(&mut tape, s)?.into();
        Ok((tape.value(probe.loss).item(), probe.structure))
    };

    let mut tape = Tape::new();
    let probe: Probe = fragment(&mut tape, store)?.into();
    let grads = tape.backward(probe.loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reports = Vec::new();
    let mut scratch = store.clone();
    for (name, p) in store.iter().filter(|(_, p)| p.trainable) {
        let len = p.tensor.len();
        let want = ((len as f64 * cfg.fraction).ceil() as usize).max(cfg.min_coords).min(len);
        let mut idx = sample(&mut rng, len, want).into_vec();
        idx.sort_unstable();
        let analytic = grads.param(name);
        let mut report = TensorReport {
            name: name.to_string(),
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            worst: None,
        };
        for i in idx {
            let orig = p.tensor.data()[i];
            let mut central = |h: f64| -> Result<Option<f64>> {
                scratch.get_mut(name)?.data_mut()[i] = orig + h;
                let (plus, s_plus) = eval(&scratch)?;
                scratch.get_mut(name)?.data_mut()[i] = orig - h;
                let (minus, s_minus) = eval(&scratch)?;
                scratch.get_mut(name)?.data_mut()[i] = orig;
                let same = s_plus == s_minus && s_plus == probe.structure;
                Ok(same.then(|| (plus - minus) / (2.0 * h)))
            };
            let (Some(wide), Some(narrow)) = (central(cfg.step)?, central(cfg.step / 2.0)?) else {
                report.skipped += 1;
                continue;
            };
            let numeric = (4.0 * narrow - wide) / 3.0;
            let a = analytic.map_or(0.0, |g| g.data()[i]);
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e >= report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((i, a, numeric));
            }
        }
        reports.push(report);
    }
    Ok(GradcheckReport {
        tensors: reports,
        tolerance: cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::tensor::Tensor;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::from_fn(&[5], |i| i as f64 + 0.5), true).unwrap();
        s
    }

    #[test]
    fn passes_a_correct_gradient() {
        let report = gradcheck(
            &store(),
            |tape, st| {
                let p = tape.param(st, "p")?;
                let sq = tape.mul(p, p)?;
                Ok(tape.sum(sq))
            },
            &GradcheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{}", report.render());
    }

    #[test]
    fn detects_a_missing_dependency() {
        // The loss reads p through a detached constant, so the tape gradient
        // misses half of d/dp sum(p * p).
        let report = gradcheck(
            &store(),
            |tape, st| {
                let p = tape.param(st, "p")?;
                let detached = tape.constant(tape.value(p).clone());
                let sq = tape.mul(p, detached)?;
                Ok(tape.sum(sq))
            },
            &GradcheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passed());
        assert!((report.max_rel_err() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn skips_probes_that_change_structure() {
        let report = gradcheck(
            &store(),
            |tape, st| {
                let p = tape.param(st, "p")?;
                let v = tape.value(p).data()[0];
                let loss = tape.sum(p);
                Ok(Probe {
                    loss,
                    structure: v.to_bits(),
                })
            },
            &GradcheckConfig {
                min_coords: 5,
                ..GradcheckConfig::default()
            },
        )
        .unwrap();
        assert_eq!(report.checked(), 4);
        assert_eq!(report.tensors[0].skipped, 1);
    }

    #[test]
    fn rel_err_uses_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1e-7, 2e-7) - 1e-4).abs() < 1e-12);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-12);
    }
}
