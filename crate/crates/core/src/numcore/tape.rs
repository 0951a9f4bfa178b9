//! Reverse-mode gradients over a recorded computation tape.
//!
//! A forward pass appends one node per operation. [`Tape::backward`] walks the
//! nodes in reverse, pushing gradients to parents. Only nodes that depend on a
//! trainable parameter or a gradient-tracking input are visited, so frozen
//! sub-networks cost a forward pass and nothing more.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{ensure, Error, Result};
use crate::numcore::kernels::{self, Activation, ConvGeom};
use crate::numcore::params::ParamStore;
use crate::numcore::real::Real;
use crate::numcore::sparse::Csr;
use crate::numcore::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Param(String),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Act { x: Var, act: Activation },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddChannel { x: Var, v: Var },
    MatMul { a: Var, b: Var },
    SpMM { m: Arc<Csr<T>>, x: Var },
    GateMix { x: Var, f: Var, theta: Var },
    Concat(Var, Var),
    Upsample2(Var),
    Reshape(Var),
    Row { table: Var, row: usize },
    Sum(Var),
    SumSquares(Var),
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::Act { .. } => "activation",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddChannel { .. } => "add_channel",
            Op::MatMul { .. } => "matmul",
            Op::SpMM { .. } => "spmm",
            Op::GateMix { .. } => "gate_mix",
            Op::Concat(..) => "concat",
            Op::Upsample2(..) => "upsample2",
            Op::Reshape(..) => "reshape",
            Op::Row { .. } => "row",
            Op::Sum(..) => "sum",
            Op::SumSquares(..) => "sum_squares",
        }
    }
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T: Real = f32> {
    params: BTreeMap<String, Tensor<T>>,
    nodes: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradients keyed by trainable parameter name. Parameters the loss does
    /// not depend on are absent.
    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    /// Gradient reaching a node, if it tracks gradients and the loss depends on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Loads a named parameter. Frozen entries become constants.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let p = store
            .param(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?;
        Ok(if p.trainable {
            self.push(p.tensor.clone(), Op::Param(name.to_string()), true)
        } else {
            self.push(p.tensor.clone(), Op::Leaf, false)
        })
    }

    /// Same-padded convolution of an `H x W x Cin` grid with a
    /// `k x k x Cin x Cout` kernel plus bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (h, wd, cin) = self.value(x).grid_dims()?;
        let kd = self.dims(w).to_vec();
        ensure!(
            kd.len() == 4 && kd[0] == kd[1] && kd[0] % 2 == 1,
            "conv kernel must be k x k x Cin x Cout with odd k, got {kd:?}"
        );
        ensure!(
            kd[2] == cin,
            "conv input has {cin} channels but kernel expects {}",
            kd[2]
        );
        ensure!(
            self.dims(b) == [kd[3]],
            "conv bias dims {:?} do not match Cout {}",
            self.dims(b),
            kd[3]
        );
        ensure!(stride >= 1, "conv stride must be positive");
        let geom = ConvGeom {
            h,
            w: wd,
            cin,
            cout: kd[3],
            k: kd[0],
            stride,
        };
        let out = kernels::conv2d(
            self.value(x).data(),
            &geom,
            self.value(w).data(),
            self.value(b).data(),
        );
        let dims = vec![geom.out_h(), geom.out_w(), geom.cout];
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::from_parts(dims, out), Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn act(&mut self, x: Var, act: Activation) -> Var {
        if act == Activation::Identity {
            return x;
        }
        let out = self.value(x).map(|v| act.apply(v));
        let rg = self.rg(&[x]);
        self.push(out, Op::Act { x, act }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).scale(s);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// Adds a length-C vector to every position of a tensor whose last axis is C.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let c = self.value(x).channels();
        ensure!(
            self.dims(v) == [c],
            "channel vector dims {:?} do not match {c} channels",
            self.dims(v)
        );
        let vv = self.value(v).data().to_vec();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(c) {
            for (o, &b) in chunk.iter_mut().zip(&vv) {
                *o = *o + b;
            }
        }
        let rg = self.rg(&[x, v]);
        Ok(self.push(out, Op::AddChannel { x, v }, rg))
    }

    /// Matrix product. `a` is treated as `rows x K` where K is its last axis,
    /// `b` must be `K x M`; the result keeps `a`'s leading dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let k = self.value(a).channels();
        let bd = self.dims(b).to_vec();
        ensure!(
            bd.len() == 2 && bd[0] == k,
            "matmul inner dims mismatch: {:?} x {bd:?}",
            self.dims(a)
        );
        let n = self.value(a).len() / k;
        let m = bd[1];
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), n, k, m);
        let mut dims = self.dims(a).to_vec();
        *dims.last_mut().unwrap() = m;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(dims, out), Op::MatMul { a, b }, rg))
    }

    /// Product of a fixed sparse `N x N` matrix with node features whose
    /// leading dims flatten to N.
    pub fn spmm(&mut self, m: Arc<Csr<T>>, x: Var) -> Result<Var> {
        let c = self.value(x).channels();
        let n = self.value(x).len() / c;
        ensure!(
            n == m.n(),
            "sparse operator is {}x{} but features have {n} rows",
            m.n(),
            m.n()
        );
        let out = m.matmul(self.value(x).data(), c);
        let dims = self.dims(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(dims, out), Op::SpMM { m, x }, rg))
    }

    /// `clamp(theta) * x + (1 - clamp(theta)) * f`, with the per-channel gate
    /// clamped to `[0, 1]`.
    pub fn gate_mix(&mut self, x: Var, f: Var, theta: Var) -> Result<Var> {
        ensure!(
            self.dims(x) == self.dims(f),
            "gate inputs mismatch: {:?} vs {:?}",
            self.dims(x),
            self.dims(f)
        );
        let c = self.value(x).channels();
        ensure!(
            self.dims(theta) == [c],
            "gate dims {:?} do not match {c} channels",
            self.dims(theta)
        );
        let gate: Vec<T> = self
            .value(theta)
            .data()
            .iter()
            .map(|&g| g.max(T::zero()).min(T::one()))
            .collect();
        let xs = self.value(x).data();
        let fs = self.value(f).data();
        let out: Vec<T> = xs
            .iter()
            .zip(fs)
            .enumerate()
            .map(|(i, (&xv, &fv))| {
                let g = gate[i % c];
                g * xv + (T::one() - g) * fv
            })
            .collect();
        let dims = self.dims(x).to_vec();
        let rg = self.rg(&[x, f, theta]);
        Ok(self.push(Tensor::from_parts(dims, out), Op::GateMix { x, f, theta }, rg))
    }

    /// Concatenates two tensors along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        ensure!(
            da.len() == db.len() && da[..da.len() - 1] == db[..db.len() - 1],
            "concat leading dims mismatch: {da:?} vs {db:?}"
        );
        let (ca, cb) = (self.value(a).channels(), self.value(b).channels());
        let rows = self.value(a).len() / ca;
        let mut out = Vec::with_capacity(rows * (ca + cb));
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        for r in 0..rows {
            out.extend_from_slice(&xa[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&xb[r * cb..(r + 1) * cb]);
        }
        let mut dims = da.to_vec();
        *dims.last_mut().unwrap() = ca + cb;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(dims, out), Op::Concat(a, b), rg))
    }

    /// Nearest-neighbour 2x upsampling of an `H x W x C` grid.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = self.value(x).grid_dims()?;
        let out = kernels::upsample2(self.value(x).data(), h, w, c);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![2 * h, 2 * w, c], out),
            Op::Upsample2(x),
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(dims)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Row `row` of a rank-2 table, as a rank-1 vector.
    pub fn row(&mut self, table: Var, row: usize) -> Result<Var> {
        let d = self.dims(table).to_vec();
        ensure!(
            d.len() == 2 && row < d[0],
            "row {row} out of range for table {d:?}"
        );
        let data = self.value(table).data()[row * d[1]..(row + 1) * d[1]].to_vec();
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![d[1]], data),
            Op::Row { table, row },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = T::from_f64(self.value(x).data().iter().map(|&v| (v * v).as_f64()).sum());
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumSquares(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_f64(n as f64))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let n = self.value(d).len();
        let s = self.sum_squares(d);
        Ok(self.scale(s, T::one() / T::from_f64(n as f64)))
    }

    /// First node, in recording order, holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    /// Back-propagates from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        ensure!(lv.len() == 1, "loss must be a scalar, got dims {:?}", lv.dims());
        if !lv.is_finite() {
            let (idx, op) = self
                .first_non_finite()
                .expect("a non-finite loss implies a non-finite node");
            return Err(Error::NonFinite(format!(
                "loss is {}; first non-finite node is #{idx} ({op})",
                lv.item()
            )));
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut params: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        grads[loss.0] = Some(Tensor::from_parts(lv.dims().to_vec(), vec![T::one()]));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads, &mut params);
            grads[id] = Some(g);
        }

        Ok(Gradients {
            params,
            nodes: grads,
        })
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        params: &mut BTreeMap<String, Tensor<T>>,
    ) {
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Param(name) => match params.get_mut(name) {
                Some(e) => e.add_assign(g),
                None => {
                    params.insert(name.clone(), g.clone());
                }
            },
            Op::Conv2d { x, w, b, geom } => {
                if wants(*x) {
                    let dx = kernels::conv2d_grad_input(g.data(), geom, self.value(*w).data());
                    acc(*x, Tensor::from_parts(self.dims(*x).to_vec(), dx));
                }
                if wants(*w) || wants(*b) {
                    let mut dw = vec![T::zero(); self.value(*w).len()];
                    let mut db = vec![T::zero(); self.value(*b).len()];
                    kernels::conv2d_grad_params(
                        self.value(*x).data(),
                        g.data(),
                        geom,
                        &mut dw,
                        &mut db,
                    );
                    acc(*w, Tensor::from_parts(self.dims(*w).to_vec(), dw));
                    acc(*b, Tensor::from_parts(self.dims(*b).to_vec(), db));
                }
            }
            Op::Act { x, act } => {
                let pre = self.value(*x);
                let d = pre
                    .zip_map(g, |p, gv| act.derivative(p) * gv)
                    .expect("activation grad dims");
                acc(*x, d);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y).expect("mul dims"));
                }
                if wants(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y).expect("mul dims"));
                }
            }
            Op::Scale(x, s) => acc(*x, g.scale(*s)),
            Op::AddChannel { x, v } => {
                acc(*x, g.clone());
                if wants(*v) {
                    let c = g.channels();
                    let mut dv = vec![T::zero(); c];
                    for chunk in g.data().chunks(c) {
                        kernels::axpy(T::one(), chunk, &mut dv);
                    }
                    acc(*v, Tensor::from_parts(vec![c], dv));
                }
            }
            Op::MatMul { a, b } => {
                let k = self.value(*a).channels();
                let n = self.value(*a).len() / k;
                let m = self.dims(*b)[1];
                if wants(*a) {
                    let da = kernels::matmul_grad_a(g.data(), self.value(*b).data(), n, k, m);
                    acc(*a, Tensor::from_parts(self.dims(*a).to_vec(), da));
                }
                if wants(*b) {
                    let db = kernels::matmul_grad_b(self.value(*a).data(), g.data(), n, k, m);
                    acc(*b, Tensor::from_parts(self.dims(*b).to_vec(), db));
                }
            }
            Op::SpMM { m, x } => {
                let c = g.channels();
                let dx = m.matmul_transposed(g.data(), c);
                acc(*x, Tensor::from_parts(g.dims().to_vec(), dx));
            }
            Op::GateMix { x, f, theta } => {
                let c = g.channels();
                let raw = self.value(*theta).data();
                let gate: Vec<T> = raw.iter().map(|&t| t.max(T::zero()).min(T::one())).collect();
                let gd = g.data();
                if wants(*x) {
                    let dx = gd.iter().enumerate().map(|(i, &v)| gate[i % c] * v).collect();
                    acc(*x, Tensor::from_parts(g.dims().to_vec(), dx));
                }
                if wants(*f) {
                    let df = gd
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| (T::one() - gate[i % c]) * v)
                        .collect();
                    acc(*f, Tensor::from_parts(g.dims().to_vec(), df));
                }
                if wants(*theta) {
                    let (xs, fs) = (self.value(*x).data(), self.value(*f).data());
                    let mut dt = vec![T::zero(); c];
                    for (i, &v) in gd.iter().enumerate() {
                        dt[i % c] = dt[i % c] + v * (xs[i] - fs[i]);
                    }
                    // Clamped coordinates pass no gradient.
                    for (d, &t) in dt.iter_mut().zip(raw) {
                        if t < T::zero() || t > T::one() {
                            *d = T::zero();
                        }
                    }
                    acc(*theta, Tensor::from_parts(vec![c], dt));
                }
            }
            Op::Concat(a, b) => {
                let (ca, cb) = (self.value(*a).channels(), self.value(*b).channels());
                let rows = g.len() / (ca + cb);
                let (mut ga, mut gb) = (Vec::with_capacity(rows * ca), Vec::with_capacity(rows * cb));
                for r in g.data().chunks(ca + cb) {
                    ga.extend_from_slice(&r[..ca]);
                    gb.extend_from_slice(&r[ca..]);
                }
                acc(*a, Tensor::from_parts(self.dims(*a).to_vec(), ga));
                acc(*b, Tensor::from_parts(self.dims(*b).to_vec(), gb));
            }
            Op::Upsample2(x) => {
                let d = self.dims(*x);
                let dx = kernels::upsample2_grad(g.data(), d[0], d[1], d[2]);
                acc(*x, Tensor::from_parts(d.to_vec(), dx));
            }
            Op::Reshape(x) => {
                acc(*x, Tensor::from_parts(self.dims(*x).to_vec(), g.data().to_vec()));
            }
            Op::Row { table, row } => {
                let d = self.dims(*table).to_vec();
                let mut dt = vec![T::zero(); d[0] * d[1]];
                dt[row * d[1]..(row + 1) * d[1]].copy_from_slice(g.data());
                acc(*table, Tensor::from_parts(d, dt));
            }
            Op::Sum(x) => {
                acc(*x, Tensor::full(self.dims(*x), g.item()));
            }
            Op::SumSquares(x) => {
                let two_g = g.item() + g.item();
                acc(*x, self.value(*x).scale(two_g));
            }
        }
    }
}
