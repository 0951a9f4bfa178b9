use crate::numcore::kernels::axpy;
use crate::numcore::real::Real;

/// Compressed sparse row matrix with a fixed sparsity pattern.
///
/// Column indices within each row are strictly increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct Csr<T: Real = f32> {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<T>,
}

impl<T: Real> Csr<T> {
    /// Builds an `n x n` matrix from per-row `(col, value)` lists.
    pub fn from_rows(rows: Vec<Vec<(usize, T)>>) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            debug_assert!(row.windows(2).all(|w| w[0].0 < w[1].0));
            for (c, v) in row {
                debug_assert!(c < n);
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Self {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.cols[s..e].iter().copied().zip(self.vals[s..e].iter().copied())
    }

    /// Entry `(i, j)`, zero when not stored.
    pub fn get(&self, i: usize, j: usize) -> T {
        let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
        match self.cols[s..e].binary_search(&j) {
            Ok(p) => self.vals[s + p],
            Err(_) => T::zero(),
        }
    }

    pub fn to_dense(&self) -> Vec<T> {
        let mut d = vec![T::zero(); self.n * self.n];
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                d[i * self.n + j] = v;
            }
        }
        d
    }

    pub fn cast<U: Real>(&self) -> Csr<U> {
        Csr {
            n: self.n,
            row_ptr: self.row_ptr.clone(),
            cols: self.cols.clone(),
            vals: self.vals.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// `self * x` for a row-major `n x c` matrix `x`.
    pub fn matmul(&self, x: &[T], c: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.n * c];
        for i in 0..self.n {
            let dst = &mut out[i * c..(i + 1) * c];
            for (j, v) in self.row(i) {
                axpy(v, &x[j * c..(j + 1) * c], dst);
            }
        }
        out
    }

    /// `self^T * g` for a row-major `n x c` matrix `g`.
    pub fn matmul_transposed(&self, g: &[T], c: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.n * c];
        for i in 0..self.n {
            let src = &g[i * c..(i + 1) * c];
            for (j, v) in self.row(i) {
                axpy(v, src, &mut out[j * c..(j + 1) * c]);
            }
        }
        out
    }
}
