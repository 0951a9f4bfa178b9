//! Loop kernels behind the tape operations. Layouts are row-major with the
//! channel axis innermost, so every inner loop runs over a contiguous slice.

use crate::numcore::real::{lit, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
    /// Tanh approximation of GELU.
    Gelu,
    Silu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(T::zero()),
            Activation::Gelu => {
                let inner = lit::<T>(GELU_C) * (x + lit::<T>(GELU_A) * x * x * x);
                lit::<T>(0.5) * x * (T::one() + inner.tanh())
            }
            Activation::Silu => x / (T::one() + (-x).exp()),
        }
    }

    /// Derivative with respect to the pre-activation value.
    #[inline]
    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let c = lit::<T>(GELU_C);
                let a = lit::<T>(GELU_A);
                let th = (c * (x + a * x * x * x)).tanh();
                let half = lit::<T>(0.5);
                half * (T::one() + th)
                    + half * x * (T::one() - th * th) * c * (T::one() + lit::<T>(3.0) * a * x * x)
            }
            Activation::Silu => {
                let s = T::one() / (T::one() + (-x).exp());
                s * (T::one() + x * (T::one() - s))
            }
        }
    }
}

/// Geometry of a same-padded 2D convolution over an `H x W x Cin` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.k / 2
    }
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad() - self.k) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad() - self.k) / self.stride + 1
    }

    /// Input coordinate read by output `o` at kernel tap `t`, if inside the grid.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + t) as isize - self.pad() as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }
}

/// `kernel` is `k x k x cin x cout`, `bias` is `cout`.
pub fn conv2d<T: Real>(x: &[T], g: &ConvGeom, kernel: &[T], bias: &[T]) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut out = Vec::with_capacity(ho * wo * g.cout);
    for _ in 0..ho * wo {
        out.extend_from_slice(bias);
    }
    for oy in 0..ho {
        for ox in 0..wo {
            let o = (oy * wo + ox) * g.cout;
            let acc = &mut out[o..o + g.cout];
            for ky in 0..g.k {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.k {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let xi = (iy * g.w + ix) * g.cin;
                    let wi = (ky * g.k + kx) * g.cin * g.cout;
                    for ci in 0..g.cin {
                        let v = x[xi + ci];
                        let wrow = &kernel[wi + ci * g.cout..wi + (ci + 1) * g.cout];
                        for (a, &w) in acc.iter_mut().zip(wrow) {
                            *a = *a + v * w;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of `conv2d` with respect to its input.
pub fn conv2d_grad_input<T: Real>(grad: &[T], g: &ConvGeom, kernel: &[T]) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut dx = vec![T::zero(); g.h * g.w * g.cin];
    for oy in 0..ho {
        for ox in 0..wo {
            let o = (oy * wo + ox) * g.cout;
            let gr = &grad[o..o + g.cout];
            for ky in 0..g.k {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.k {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let xi = (iy * g.w + ix) * g.cin;
                    let wi = (ky * g.k + kx) * g.cin * g.cout;
                    for ci in 0..g.cin {
                        let wrow = &kernel[wi + ci * g.cout..wi + (ci + 1) * g.cout];
                        dx[xi + ci] = dx[xi + ci] + dot(gr, wrow);
                    }
                }
            }
        }
    }
    dx
}

/// Gradients of `conv2d` with respect to kernel and bias, accumulated into the
/// provided buffers.
pub fn conv2d_grad_params<T: Real>(
    x: &[T],
    grad: &[T],
    g: &ConvGeom,
    dkernel: &mut [T],
    dbias: &mut [T],
) {
    let (ho, wo) = (g.out_h(), g.out_w());
    for oy in 0..ho {
        for ox in 0..wo {
            let o = (oy * wo + ox) * g.cout;
            let gr = &grad[o..o + g.cout];
            axpy(T::one(), gr, dbias);
            for ky in 0..g.k {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.k {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let xi = (iy * g.w + ix) * g.cin;
                    let wi = (ky * g.k + kx) * g.cin * g.cout;
                    for ci in 0..g.cin {
                        let v = x[xi + ci];
                        axpy(v, gr, &mut dkernel[wi + ci * g.cout..wi + (ci + 1) * g.cout]);
                    }
                }
            }
        }
    }
}

/// `a (n x k) * b (k x m)`.
pub fn matmul<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            axpy(a[i * k + p], &b[p * m..(p + 1) * m], row);
        }
    }
    out
}

/// `g (n x m) * b^T` for `b (k x m)`.
pub fn matmul_grad_a<T: Real>(g: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * k];
    for i in 0..n {
        for p in 0..k {
            out[i * k + p] = dot(&g[i * m..(i + 1) * m], &b[p * m..(p + 1) * m]);
        }
    }
    out
}

/// `a^T * g` for `a (n x k)`, `g (n x m)`.
pub fn matmul_grad_b<T: Real>(a: &[T], g: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * m];
    for i in 0..n {
        let gr = &g[i * m..(i + 1) * m];
        for p in 0..k {
            axpy(a[i * k + p], gr, &mut out[p * m..(p + 1) * m]);
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling of an `H x W x C` grid.
pub fn upsample2<T: Real>(x: &[T], h: usize, w: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); 4 * h * w * c];
    for y in 0..2 * h {
        for xx in 0..2 * w {
            let s = ((y / 2) * w + xx / 2) * c;
            let d = (y * 2 * w + xx) * c;
            out[d..d + c].copy_from_slice(&x[s..s + c]);
        }
    }
    out
}

pub fn upsample2_grad<T: Real>(g: &[T], h: usize, w: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); h * w * c];
    for y in 0..2 * h {
        for xx in 0..2 * w {
            let s = (y * 2 * w + xx) * c;
            let d = ((y / 2) * w + xx / 2) * c;
            axpy(T::one(), &g[s..s + c], &mut out[d..d + c]);
        }
    }
    out
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activations_vanish_at_zero() {
        for act in [
            Activation::Identity,
            Activation::Relu,
            Activation::Gelu,
            Activation::Silu,
        ] {
            assert_eq!(act.apply(0.0f64), 0.0);
        }
    }

    #[test]
    fn activation_derivatives_match_differences() {
        for act in [Activation::Gelu, Activation::Silu, Activation::Identity] {
            for &x in &[-2.5f64, -0.3, 0.0, 0.7, 3.1] {
                let h = 1e-5;
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                assert!((fd - act.derivative(x)).abs() < 1e-8, "{act:?} at {x}");
            }
        }
    }

    #[test]
    fn strided_geometry_halves() {
        let g = ConvGeom {
            h: 32,
            w: 32,
            cin: 3,
            cout: 8,
            k: 3,
            stride: 2,
        };
        assert_eq!((g.out_h(), g.out_w()), (16, 16));
    }
}
