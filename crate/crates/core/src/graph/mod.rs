//! Spatial graphs over feature grids and the gated graph convolution that
//! runs on them.
//!
//! Every cell of an `H x W x C` grid becomes a node. Node `i` links to the `K`
//! nodes nearest to it in L2 distance over its position-encoded features.
//! Graph convolution then mixes each node with its neighbours:
//!
//! ```text
//! F_agg(i) = sum_{j in K(i)} A_hat[i, j] * X[j]
//! X'       = phi(theta * X + (1 - theta) * F_agg)
//! X_hat    = phi(A_hat X' W) + X
//! A_hat    = D^-1/2 (A + I) D^-1/2,  D = degree matrix of A + I
//! ```
//!
//! where `A` is the symmetrised KNN adjacency.

mod posenc;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use rand::Rng;

use crate::error::{ensure, Result};
use crate::exec;
use crate::numcore::layers::uniform;
use crate::numcore::{Activation, Csr, ParamStore, Real, Tape, Tensor, Var};

pub use posenc::positional_encoding;

/// Default neighbour count.
pub const DEFAULT_K: usize = 9;

/// A KNN graph over the cells of a feature grid. Immutable once built.
#[derive(Clone, Debug)]
pub struct SpatialGraph<T: Real = f32> {
    height: usize,
    width: usize,
    k: usize,
    node_features: Tensor<T>,
    neighbors: Vec<Vec<usize>>,
    adjacency: Arc<Csr<T>>,
    aggregation: Arc<Csr<T>>,
}

impl<T: Real> SpatialGraph<T> {
    /// Assembles a graph from explicit directed neighbour lists. The lists may
    /// have any length (including zero); self-loops are rejected.
    pub fn from_neighbors(
        height: usize,
        width: usize,
        node_features: Tensor<T>,
        neighbors: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let n = height * width;
        ensure!(n >= 1, "graph needs at least one node");
        ensure!(
            neighbors.len() == n,
            "expected {n} neighbour lists, got {}",
            neighbors.len()
        );
        ensure!(
            node_features.rank() == 2 && node_features.dims()[0] == n,
            "node features must be {n} x C, got {:?}",
            node_features.dims()
        );
        for (i, list) in neighbors.iter().enumerate() {
            ensure!(!list.contains(&i), "node {i} lists itself as a neighbour");
            ensure!(list.iter().all(|&j| j < n), "node {i} has an out-of-range neighbour");
        }
        let adjacency = normalized_adjacency::<T>(&symmetrize(&neighbors));
        let aggregation = Csr::from_rows(
            neighbors
                .iter()
                .enumerate()
                .map(|(i, list)| list.iter().map(|&j| (j, adjacency.get(i, j))).collect())
                .collect(),
        );
        let k = neighbors.iter().map(Vec::len).max().unwrap_or(0);
        Ok(Self {
            height,
            width,
            k,
            node_features,
            neighbors,
            adjacency: Arc::new(adjacency),
            aggregation: Arc::new(aggregation),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.height * self.width
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Grid features plus positional encoding, `N x C`.
    pub fn node_features(&self) -> &Tensor<T> {
        &self.node_features
    }

    /// `(row, col)` of node `i`; nodes are numbered row-major.
    pub fn position(&self, i: usize) -> (usize, usize) {
        (i / self.width, i % self.width)
    }

    pub fn positions(&self) -> Vec<(usize, usize)> {
        (0..self.num_nodes()).map(|i| self.position(i)).collect()
    }

    /// Directed KNN lists, nearest first.
    pub fn neighbors(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    /// Normalized adjacency with self-loops.
    pub fn adjacency(&self) -> &Csr<T> {
        &self.adjacency
    }

    /// Normalized adjacency restricted to each node's KNN list (no self-loop).
    pub fn aggregation(&self) -> &Csr<T> {
        &self.aggregation
    }

    /// Directed edges `(src, dst, weight)` with `dst` in `src`'s KNN list.
    pub fn edges(&self) -> Vec<(usize, usize, T)> {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, list)| list.iter().map(move |&j| (i, j, self.adjacency.get(i, j))))
            .collect()
    }

    /// Hash of the neighbour lists; changes whenever any KNN choice changes.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.neighbors.hash(&mut h);
        h.finish()
    }

    fn check_features(&self, dims: &[usize]) -> Result<()> {
        let c = *dims.last().unwrap_or(&0);
        let rows = if c == 0 { 0 } else { dims.iter().product::<usize>() / c };
        ensure!(
            rows == self.num_nodes(),
            "features {dims:?} do not match a graph of {} nodes",
            self.num_nodes()
        );
        Ok(())
    }
}

/// Builds the KNN graph of an `H x W x C` grid.
///
/// Distances are squared L2 over `grid + positional_encoding`; ties go to the
/// lower node id. Each node gets exactly `min(k, N - 1)` neighbours.
pub fn build_graph<T: Real>(grid: &Tensor<T>, k: usize) -> Result<SpatialGraph<T>> {
    let (h, w, c) = grid.grid_dims()?;
    ensure!(k >= 1, "neighbour count k must be at least 1, got {k}");
    ensure!(h * w >= 2, "graph needs at least two cells, got {h}x{w}");
    ensure!(grid.is_finite(), "grid features must be finite");
    let pe = positional_encoding::<T>(h, w, c);
    let encoded = grid.zip_map(&pe, |a, b| a + b)?.reshape(&[h * w, c])?;
    let neighbors = knn(&encoded, k);
    SpatialGraph::from_neighbors(h, w, encoded, neighbors)
}

/// `min(k, N - 1)` nearest rows of an `N x C` matrix for every row.
pub fn knn<T: Real>(features: &Tensor<T>, k: usize) -> Vec<Vec<usize>> {
    let c = features.channels();
    let n = features.len() / c;
    let kk = k.min(n.saturating_sub(1));
    let x = features.data();
    exec::map_indexed(n, |i| {
        let xi = &x[i * c..(i + 1) * c];
        let mut cand: Vec<(T, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let d = xi
                    .iter()
                    .zip(&x[j * c..(j + 1) * c])
                    .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
                (d, j)
            })
            .collect();
        let order = |a: &(T, usize), b: &(T, usize)| {
            a.0.partial_cmp(&b.0).expect("finite distances").then(a.1.cmp(&b.1))
        };
        if kk < cand.len() {
            cand.select_nth_unstable_by(kk, order);
            cand.truncate(kk);
        }
        cand.sort_unstable_by(order);
        cand.into_iter().map(|(_, j)| j).collect()
    })
}

/// Undirected neighbour sets: `j` is adjacent to `i` if either lists the other.
pub fn symmetrize(neighbors: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut sym: Vec<Vec<usize>> = neighbors.to_vec();
    for (i, list) in neighbors.iter().enumerate() {
        for &j in list {
            sym[j].push(i);
        }
    }
    for list in &mut sym {
        list.sort_unstable();
        list.dedup();
    }
    sym
}

/// `D^-1/2 (A + I) D^-1/2` for a symmetric adjacency given as neighbour sets.
pub fn normalized_adjacency<T: Real>(sym: &[Vec<usize>]) -> Csr<T> {
    let inv_sqrt: Vec<f64> = sym.iter().map(|l| 1.0 / ((l.len() + 1) as f64).sqrt()).collect();
    Csr::from_rows(
        sym.iter()
            .enumerate()
            .map(|(i, list)| {
                let mut row: Vec<(usize, T)> = list
                    .iter()
                    .map(|&j| (j, T::from_f64(inv_sqrt[i] * inv_sqrt[j])))
                    .collect();
                row.push((i, T::from_f64(inv_sqrt[i] * inv_sqrt[i])));
                row
            })
            .collect(),
    )
}

/// Dense form of [`normalized_adjacency`] for a binary `N x N` matrix.
pub fn normalize_adjacency<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    ensure!(
        a.rank() == 2 && a.dims()[0] == a.dims()[1],
        "adjacency must be square, got {:?}",
        a.dims()
    );
    let n = a.dims()[0];
    let mut sets = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            let v = a.at(&[i, j]);
            ensure!(
                v == T::zero() || v == T::one(),
                "adjacency must be binary, found {v} at ({i}, {j})"
            );
            ensure!(v == a.at(&[j, i]), "adjacency must be symmetric at ({i}, {j})");
            if v == T::one() {
                ensure!(i != j, "adjacency must have a zero diagonal (node {i})");
                sets[i].push(j);
            }
        }
    }
    let csr = normalized_adjacency::<T>(&sets);
    Tensor::new(vec![n, n], csr.to_dense())
}

/// Neighbour aggregation `F_agg(i) = sum_{j in K(i)} A_hat[i, j] X[j]`.
pub fn aggregate<T: Real>(tape: &mut Tape<T>, graph: &SpatialGraph<T>, x: Var) -> Result<Var> {
    graph.check_features(tape.dims(x))?;
    tape.spmm(graph.aggregation.clone(), x)
}

/// Gated update `phi(theta * x + (1 - theta) * f_agg)`, gate clamped to `[0, 1]`.
pub fn update<T: Real>(tape: &mut Tape<T>, x: Var, f_agg: Var, theta: Var, act: Activation) -> Result<Var> {
    let mixed = tape.gate_mix(x, f_agg, theta)?;
    Ok(tape.act(mixed, act))
}

/// One graph convolution layer: a square weight `W` (`C x C`, at `{prefix}/w`),
/// a per-channel gate `theta` (`C`, at `{prefix}/theta`), and an activation.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphConvLayer {
    pub prefix: String,
    pub channels: usize,
    pub act: Activation,
}

impl GraphConvLayer {
    pub fn new(prefix: impl Into<String>, channels: usize, act: Activation) -> Self {
        Self {
            prefix: prefix.into(),
            channels,
            act,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}/w", self.prefix)
    }

    pub fn gate_name(&self) -> String {
        format!("{}/theta", self.prefix)
    }

    /// Glorot-uniform weight, gate at 0.5.
    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng, trainable: bool) -> Result<()> {
        let c = self.channels;
        let limit = (6.0 / (2 * c) as f64).sqrt();
        store.insert(self.weight_name(), uniform(&[c, c], limit, rng), trainable)?;
        store.insert(self.gate_name(), Tensor::full(&[c], T::from_f64(0.5)), trainable)
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        graph: &SpatialGraph<T>,
        x: Var,
    ) -> Result<Var> {
        graph_conv(tape, store, graph, x, self)
    }
}

/// `X_hat = phi(A_hat * update(X, aggregate(X)) * W) + X`.
pub fn graph_conv<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    graph: &SpatialGraph<T>,
    x: Var,
    layer: &GraphConvLayer,
) -> Result<Var> {
    let c = tape.value(x).channels();
    ensure!(
        c == layer.channels,
        "{}: features have {c} channels, layer expects {}",
        layer.prefix,
        layer.channels
    );
    let f_agg = aggregate(tape, graph, x)?;
    let theta = tape.param(store, &layer.gate_name())?;
    let updated = update(tape, x, f_agg, theta, layer.act)?;
    let propagated = tape.spmm(graph.adjacency.clone(), updated)?;
    let w = tape.param(store, &layer.weight_name())?;
    let transformed = tape.matmul(propagated, w)?;
    let activated = tape.act(transformed, layer.act);
    tape.add(activated, x)
}
