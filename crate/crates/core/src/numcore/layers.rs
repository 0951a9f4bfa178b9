use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{ensure, Result};
use crate::numcore::kernels::Activation;
use crate::numcore::params::ParamStore;
use crate::numcore::real::Real;
use crate::numcore::tape::{Tape, Var};
use crate::numcore::tensor::Tensor;

/// Convolution + bias + activation. Parameters live in a [`ParamStore`] under
/// `{prefix}/w` (`k x k x cin x cout`) and `{prefix}/b` (`cout`).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub prefix: String,
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub act: Activation,
}

impl ConvBlock {
    pub fn new(prefix: impl Into<String>, k: usize, cin: usize, cout: usize, stride: usize, act: Activation) -> Self {
        Self {
            prefix: prefix.into(),
            k,
            cin,
            cout,
            stride,
            act,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}/w", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}/b", self.prefix)
    }

    /// He-uniform kernel, zero bias.
    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng, trainable: bool) -> Result<()> {
        ensure!(self.k % 2 == 1, "conv kernel size must be odd, got {}", self.k);
        ensure!(self.stride >= 1, "conv stride must be positive");
        let fan_in = (self.k * self.k * self.cin) as f64;
        let kernel = uniform(&[self.k, self.k, self.cin, self.cout], (6.0 / fan_in).sqrt(), rng);
        store.insert(self.weight_name(), kernel, trainable)?;
        store.insert(self.bias_name(), Tensor::zeros(&[self.cout]), trainable)
    }

    /// Zero kernel and bias.
    pub fn init_zero<T: Real>(&self, store: &mut ParamStore<T>, trainable: bool) -> Result<()> {
        store.insert(
            self.weight_name(),
            Tensor::zeros(&[self.k, self.k, self.cin, self.cout]),
            trainable,
        )?;
        store.insert(self.bias_name(), Tensor::zeros(&[self.cout]), trainable)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let pre = self.forward_linear(tape, store, x)?;
        Ok(tape.act(pre, self.act))
    }

    /// The block without its activation.
    pub fn forward_linear<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let cin = tape.value(x).channels();
        ensure!(
            cin == self.cin,
            "{}: input has {cin} channels, block expects {}",
            self.prefix,
            self.cin
        );
        let w = tape.param(store, &self.weight_name())?;
        let b = tape.param(store, &self.bias_name())?;
        tape.conv2d(x, w, b, self.stride)
    }

    /// Convenience evaluation outside any training graph.
    pub fn apply<T: Real>(&self, store: &ParamStore<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let y = self.forward(&mut tape, store, x)?;
        Ok(tape.value(y).clone())
    }
}

/// Dense layer on a vector: `y = act(x W + b)`, `W` is `din x dout`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub prefix: String,
    pub din: usize,
    pub dout: usize,
    pub act: Activation,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, din: usize, dout: usize, act: Activation) -> Self {
        Self {
            prefix: prefix.into(),
            din,
            dout,
            act,
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng, trainable: bool) -> Result<()> {
        let w = uniform(&[self.din, self.dout], (6.0 / self.din as f64).sqrt(), rng);
        store.insert(format!("{}/w", self.prefix), w, trainable)?;
        store.insert(format!("{}/b", self.prefix), Tensor::zeros(&[self.dout]), trainable)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        ensure!(
            tape.dims(x) == [self.din],
            "{}: expected a vector of {} values, got {:?}",
            self.prefix,
            self.din,
            tape.dims(x)
        );
        let w = tape.param(store, &format!("{}/w", self.prefix))?;
        let b = tape.param(store, &format!("{}/b", self.prefix))?;
        let row = tape.reshape(x, &[1, self.din])?;
        let y = tape.matmul(row, w)?;
        let y = tape.reshape(y, &[self.dout])?;
        let y = tape.add(y, b)?;
        Ok(tape.act(y, self.act))
    }
}

/// Tensor with entries drawn uniformly from `[-limit, limit]`.
pub fn uniform<T: Real>(dims: &[usize], limit: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
    Tensor::from_fn(dims, |_| T::from_f64(dist.sample(rng)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct six-loop convolution with zero padding, computed in f64.
    fn naive_conv(x: &Tensor<f32>, k: &Tensor<f32>, bias: &[f32], stride: usize) -> Vec<f64> {
        let (h, w, cin) = (x.dims()[0], x.dims()[1], x.dims()[2]);
        let (ks, cout) = (k.dims()[0], k.dims()[3]);
        let pad = (ks / 2) as isize;
        let ho = (h + 2 * (ks / 2) - ks) / stride + 1;
        let wo = (w + 2 * (ks / 2) - ks) / stride + 1;
        let mut out = vec![0.0f64; ho * wo * cout];
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    let mut acc = bias[co] as f64;
                    for ky in 0..ks {
                        for kx in 0..ks {
                            for ci in 0..cin {
                                let iy = (oy * stride + ky) as isize - pad;
                                let ix = (ox * stride + kx) as isize - pad;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x.at(&[iy as usize, ix as usize, ci]) as f64
                                    * k.at(&[ky, kx, ci, co]) as f64;
                            }
                        }
                    }
                    out[(oy * wo + ox) * cout + co] = acc;
                }
            }
        }
        out
    }

    fn block_store(block: &ConvBlock, seed: u64) -> ParamStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        block.init(&mut s, &mut rng, true).unwrap();
        s
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        for act in [Activation::Identity, Activation::Relu, Activation::Gelu, Activation::Silu] {
            let block = ConvBlock::new("c", 3, 4, 5, 1, act);
            let s = block_store(&block, 1);
            let y = block.apply(&s, &Tensor::zeros(&[6, 6, 4])).unwrap();
            assert!(y.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let block = ConvBlock::new("c", 1, 3, 3, 1, Activation::Identity);
        let mut s = ParamStore::new();
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        for c in 0..3 {
            k.data_mut()[c * 3 + c] = 1.0;
        }
        s.insert("c/w", k, true).unwrap();
        s.insert("c/b", Tensor::zeros(&[3]), true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Tensor<f32> = uniform(&[4, 5, 3], 1.0, &mut rng);
        assert_eq!(block.apply(&s, &x).unwrap(), x);
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for stride in [1, 2] {
            let x: Tensor<f32> = uniform(&[5, 5, 3], 1.0, &mut rng);
            let k: Tensor<f32> = uniform(&[3, 3, 3, 2], 1.0, &mut rng);
            let b: Tensor<f32> = uniform(&[2], 1.0, &mut rng);
            let mut s = ParamStore::new();
            s.insert("c/w", k.clone(), true).unwrap();
            s.insert("c/b", b.clone(), true).unwrap();
            let block = ConvBlock::new("c", 3, 3, 2, stride, Activation::Identity);
            let y = block.apply(&s, &x).unwrap();
            let oracle = naive_conv(&x, &k, b.data(), stride);
            assert_eq!(y.len(), oracle.len());
            for (a, o) in y.data().iter().zip(&oracle) {
                assert!((*a as f64 - o).abs() < 1e-5, "{a} vs {o}");
            }
        }
    }

    #[test]
    fn channel_mismatch_is_contract_violation() {
        let block = ConvBlock::new("c", 3, 4, 2, 1, Activation::Relu);
        let s = block_store(&block, 2);
        let err = block.apply(&s, &Tensor::zeros(&[4, 4, 3])).unwrap_err();
        assert!(matches!(err, crate::Error::Contract(_)));
    }

    #[test]
    fn linear_in_input_without_bias() {
        let block = ConvBlock::new("c", 3, 2, 3, 1, Activation::Identity);
        let s = block_store(&block, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Tensor<f32> = uniform(&[6, 6, 2], 1.0, &mut rng);
        let a = 2.75f32;
        let y = block.apply(&s, &x).unwrap();
        let ya = block.apply(&s, &x.scale(a)).unwrap();
        for (p, q) in y.data().iter().zip(ya.data()) {
            let expect = a * p;
            assert!((q - expect).abs() <= 1e-6 * expect.abs().max(1.0), "{q} vs {expect}");
        }
    }

    #[test]
    fn stride_halves_spatial_dims() {
        let block = ConvBlock::new("c", 3, 3, 4, 2, Activation::Silu);
        let s = block_store(&block, 4);
        let y = block.apply(&s, &Tensor::zeros(&[8, 6, 3])).unwrap();
        assert_eq!(y.dims(), &[4, 3, 4]);
    }
}
