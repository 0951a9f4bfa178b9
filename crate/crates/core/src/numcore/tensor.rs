use crate::error::{ensure, Result};
use crate::numcore::real::Real;

/// Dense row-major tensor.
///
/// Feature grids are rank-3 tensors laid out `[height, width, channels]`, so a
/// grid with `N = H * W` cells can be reinterpreted as an `N x C` node matrix
/// without moving data.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        ensure!(
            dims.iter().all(|&d| d > 0),
            "tensor dims must be positive, got {dims:?}"
        );
        let n: usize = dims.iter().product();
        ensure!(
            n == data.len(),
            "tensor dims {dims:?} need {n} values, got {}",
            data.len()
        );
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], v: T) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            dims: vec![1],
            data: vec![v],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Builds a tensor from data whose length is known to match `dims`.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Last dimension: the channel count of a grid or the column count of a matrix.
    pub fn channels(&self) -> usize {
        *self.dims.last().expect("tensor rank is at least one")
    }

    /// `(height, width, channels)` of a rank-3 grid.
    pub fn grid_dims(&self) -> Result<(usize, usize, usize)> {
        ensure!(
            self.dims.len() == 3,
            "expected an H x W x C grid, got dims {:?}",
            self.dims
        );
        Ok((self.dims[0], self.dims[1], self.dims[2]))
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        ensure!(
            n == self.data.len(),
            "cannot reshape {:?} into {dims:?}",
            self.dims
        );
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        ensure!(
            self.dims == other.dims,
            "elementwise dims mismatch: {:?} vs {:?}",
            self.dims,
            other.dims
        );
        Ok(Self {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// Accumulates in `f64`, so `f32` reductions stay accurate over large tensors.
    pub fn sum(&self) -> T {
        T::from_f64(self.data.iter().map(|v| v.as_f64()).sum())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Value at a multi-dimensional index.
    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.dims.len());
        index
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }
}

impl Tensor<f32> {
    /// Bit-level equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
