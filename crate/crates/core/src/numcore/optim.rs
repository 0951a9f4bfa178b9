use std::collections::BTreeMap;

use crate::error::{ensure, Result};
use crate::numcore::params::ParamStore;
use crate::numcore::tensor::Tensor;

/// Adam with bias correction. State is keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u32,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// Applies one update to every trainable entry that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            ensure!(
                store.is_trainable(name),
                "gradient supplied for frozen or unknown parameter {name}"
            );
            let p = store.get_mut(name)?;
            ensure!(
                p.dims() == g.dims(),
                "gradient dims {:?} do not match parameter {name} {:?}",
                g.dims(),
                p.dims()
            );
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Mean loss and mean gradients over per-sample results, reduced in index
/// order so the sum does not depend on how the samples were scheduled.
pub fn average(per_sample: Vec<(f32, BTreeMap<String, Tensor<f32>>)>) -> Result<(f32, BTreeMap<String, Tensor<f32>>)> {
    ensure!(!per_sample.is_empty(), "cannot average an empty batch");
    let n = per_sample.len() as f32;
    let mut loss = 0.0;
    let mut sum: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for (l, grads) in per_sample {
        loss += l;
        for (name, g) in grads {
            match sum.get_mut(&name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    sum.insert(name, g);
                }
            }
        }
    }
    for g in sum.values_mut() {
        *g = g.scale(1.0 / n);
    }
    Ok((loss / n, sum))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_leaves_weights_untouched() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_fn(&[3], |i| i as f32 - 0.5), true).unwrap();
        let before = s.clone();
        let mut opt = Adam::new(0.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::full(&[3], 0.7));
        opt.step(&mut s, &grads).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2]), true).unwrap();
        let mut opt = Adam::new(0.1);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::new(vec![2], vec![3.0, -0.5]).unwrap());
        opt.step(&mut s, &grads).unwrap();
        let w = s.get("w").unwrap().data();
        assert!((w[0] + 0.1).abs() < 1e-6 && (w[1] - 0.1).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn average_reduces_in_order() {
        let g = |v: f32| BTreeMap::from([("w".to_string(), Tensor::full(&[2], v))]);
        let (l, grads) = average(vec![(1.0, g(1.0)), (3.0, g(2.0)), (2.0, BTreeMap::new())]).unwrap();
        assert_eq!(l, 2.0);
        assert_eq!(grads["w"].data(), &[1.0, 1.0]);
        assert!(average(Vec::new()).is_err());
    }

    #[test]
    fn refuses_frozen_parameters() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[1]), false).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::zeros(&[1]));
        assert!(Adam::new(0.1).step(&mut s, &grads).is_err());
    }
}
