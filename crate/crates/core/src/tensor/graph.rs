//! Dynamic reverse-mode tape over dense row-major matrices.
//!
//! A [`Graph`] is rebuilt for every training step. Values are computed
//! eagerly as ops are recorded; [`Graph::backward`] walks the tape once in
//! reverse and returns gradients for every parameter that was read.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::dist;

/// Dense 2-D tensor. Vectors are `[1, n]` or `[n, 1]`, scalars `[1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: [usize; 2], values: Vec<f64>) -> Result<Self> {
        if values.len() != shape[0] * shape[1] {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: [values.len(), 1],
            });
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: [usize; 2]) -> Self {
        Self {
            shape,
            values: vec![0.0; shape[0] * shape[1]],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: [1, 1],
            values: vec![v],
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.shape[1] + c]
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a trainable tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }
}

/// Gradient buffers keyed by parameter.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub by_param: HashMap<ParamId, Vec<f64>>,
    /// Gradients of free variables created with [`Graph::variable`].
    pub by_var: HashMap<Var, Vec<f64>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.by_param.get(&id).map(Vec::as_slice)
    }

    pub fn var(&self, v: Var) -> Option<&[f64]> {
        self.by_var.get(&v).map(Vec::as_slice)
    }

    pub fn global_norm(&self) -> f64 {
        self.by_param
            .values()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale so the global L2 norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            let s = max_norm / norm;
            for g in self.by_param.values_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
        norm
    }

    /// Accumulate another set of parameter gradients into this one.
    pub fn accumulate(&mut self, other: Gradients) {
        for (id, g) in other.by_param {
            match self.by_param.get_mut(&id) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    self.by_param.insert(id, g);
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Abs(Var),
    Dropout(Var, Vec<f64>),
    Embed(Var, Vec<usize>),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Sum(Var),
    Mean(Var),
    NegBinomialNll { y: Vec<f64>, mu: Var, alpha: Var },
    LowRankGaussianNll { z: Vec<f64>, mu: Var, diag: Var, factor: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    training: bool,
    rng: ChaCha8Rng,
}

fn broadcast_ok(a: [usize; 2], b: [usize; 2]) -> bool {
    (b[0] == a[0] || b[0] == 1) && (b[1] == a[1] || b[1] == 1)
}

#[inline]
fn bidx(shape: [usize; 2], r: usize, c: usize) -> usize {
    let rr = if shape[0] == 1 { 0 } else { r };
    let cc = if shape[1] == 1 { 0 } else { c };
    rr * shape[1] + cc
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// `c = a · b` for row-major `a: m×k`, `b: k×n`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    // SAFETY: slices are sized m·k, k·n and m·n with row-major strides.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

impl Graph {
    /// New graph in training mode (dropout active) with a seeded mask RNG.
    pub fn new(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// New graph in evaluation mode: dropout is the identity.
    pub fn eval() -> Self {
        Self {
            training: false,
            ..Self::new(0)
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape
    }

    /// Scalar value of a `[1, 1]` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.values[0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Free input whose gradient is reported in [`Gradients::by_var`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Read a parameter. Repeated reads of the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(Error::Shape { op: "matmul", left: sa, right: sb });
        }
        let mut out = Tensor::zeros([sa[0], sb[1]]);
        gemm(sa[0], sa[1], sb[1], &self.value(a).values, &self.value(b).values, &mut out.values);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcast_ok(sa, sb) {
            return Err(Error::Shape { op: name, left: sa, right: sb });
        }
        let (va, vb) = (&self.value(a).values, &self.value(b).values);
        let mut out = Tensor::zeros(sa);
        for r in 0..sa[0] {
            for c in 0..sa[1] {
                let i = r * sa[1] + c;
                out.values[i] = f(va[i], vb[bidx(sb, r, c)]);
            }
        }
        Ok(out)
    }

    /// Elementwise `a + b`; `b` may broadcast along rows and/or columns.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.map(a, |x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor {
            shape: t.shape,
            values: t.values.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.map(a, softplus);
        let rg = self.rg(a);
        self.push(out, Op::Softplus(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::abs);
        let rg = self.rg(a);
        self.push(out, Op::Abs(a), rg)
    }

    /// Inverted dropout: in training, zero each entry with probability `p`
    /// and scale survivors by `1/(1-p)`. Identity in evaluation mode.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if !self.training || p <= 0.0 {
            return a;
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape,
            values: t.values.iter().zip(&mask).map(|(x, m)| x * m).collect(),
        };
        let rg = self.rg(a);
        self.push(out, Op::Dropout(a, mask), rg)
    }

    /// Rows of `table` selected by `indices`: output `[indices.len(), dim]`.
    pub fn embed(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if let Some(&bad) = indices.iter().find(|&&i| i >= st[0]) {
            return Err(Error::Shape { op: "embed", left: st, right: [bad, 0] });
        }
        let t = self.value(table);
        let mut values = Vec::with_capacity(indices.len() * st[1]);
        for &i in indices {
            values.extend_from_slice(&t.values[i * st[1]..(i + 1) * st[1]]);
        }
        let out = Tensor { shape: [indices.len(), st[1]], values };
        let rg = self.rg(table);
        Ok(self.push(out, Op::Embed(table, indices.to_vec()), rg))
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0])[0];
        for &p in parts {
            if self.shape(p)[0] != rows {
                return Err(Error::Shape { op: "concat", left: self.shape(parts[0]), right: self.shape(p) });
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Tensor::zeros([rows, cols]);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let t = self.value(p);
                let w = t.shape[1];
                out.values[r * cols + off..r * cols + off + w]
                    .copy_from_slice(&t.values[r * w..(r + 1) * w]);
                off += w;
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `from..to`.
    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Result<Var> {
        let s = self.shape(a);
        if from > to || to > s[1] {
            return Err(Error::Shape { op: "slice_cols", left: s, right: [from, to] });
        }
        let w = to - from;
        let t = self.value(a);
        let mut values = Vec::with_capacity(s[0] * w);
        for r in 0..s[0] {
            values.extend_from_slice(&t.values[r * s[1] + from..r * s[1] + to]);
        }
        let out = Tensor { shape: [s[0], w], values };
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols(a, from), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).values.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.values.iter().sum::<f64>() / t.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Elementwise negative NB log-likelihood of observed `y` (same shape as
    /// `mu` and `alpha`).
    pub fn neg_binomial_nll(&mut self, y: &[f64], mu: Var, alpha: Var) -> Result<Var> {
        let (sm, sa) = (self.shape(mu), self.shape(alpha));
        if sm != sa || y.len() != sm[0] * sm[1] {
            return Err(Error::Shape { op: "neg_binomial_nll", left: sm, right: sa });
        }
        let (m, a) = (&self.value(mu).values, &self.value(alpha).values);
        let mut values = Vec::with_capacity(y.len());
        for i in 0..y.len() {
            values.push(-dist::nb_logpdf_unchecked(y[i], m[i], a[i]));
        }
        let rg = self.rg(mu) || self.rg(alpha);
        Ok(self.push(
            Tensor { shape: sm, values },
            Op::NegBinomialNll { y: y.to_vec(), mu, alpha },
            rg,
        ))
    }

    /// Scalar negative log-density of `z` under `N(mu, diag(d) + V Vᵀ)` with
    /// `mu, d: [N, 1]` and `V: [N, r]`.
    pub fn lowrank_gaussian_nll(&mut self, z: &[f64], mu: Var, diag: Var, factor: Var) -> Result<Var> {
        let (sm, sd, sv) = (self.shape(mu), self.shape(diag), self.shape(factor));
        if sm[1] != 1 || sm != sd || sv[0] != sm[0] || z.len() != sm[0] {
            return Err(Error::Shape { op: "lowrank_gaussian_nll", left: sm, right: sv });
        }
        let lp = dist::lowrank_gaussian_logpdf(
            z,
            &self.value(mu).values,
            &self.value(diag).values,
            &self.value(factor).values,
            sv[1],
        )?;
        let rg = self.rg(mu) || self.rg(diag) || self.rg(factor);
        Ok(self.push(
            Tensor::scalar(-lp),
            Op::LowRankGaussianNll { z: z.to_vec(), mu, diag, factor },
            rg,
        ))
    }

    /// Propagate from a scalar `loss` back to every parameter and variable.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != [1, 1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let send = |v: Var, delta: Vec<f64>, grads: &mut Vec<Option<Vec<f64>>>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            };
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    out.by_var.insert(Var(i), g);
                }
                Op::Param(id) => {
                    out.by_param.insert(*id, g);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k, nn) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                    if nodes[a.0].requires_grad {
                        let mut da = vec![0.0; m * k];
                        // da = g · bᵀ
                        unsafe {
                            matrixmultiply::dgemm(
                                m, nn, k, 1.0,
                                g.as_ptr(), nn as isize, 1,
                                tb.values.as_ptr(), 1, nn as isize,
                                0.0,
                                da.as_mut_ptr(), k as isize, 1,
                            );
                        }
                        send(*a, da, &mut grads);
                    }
                    if nodes[b.0].requires_grad {
                        let mut db = vec![0.0; k * nn];
                        // db = aᵀ · g
                        unsafe {
                            matrixmultiply::dgemm(
                                k, m, nn, 1.0,
                                ta.values.as_ptr(), 1, k as isize,
                                g.as_ptr(), nn as isize, 1,
                                0.0,
                                db.as_mut_ptr(), nn as isize, 1,
                            );
                        }
                        send(*b, db, &mut grads);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let (sa, sb) = (val(*a).shape, val(*b).shape);
                    if nodes[b.0].requires_grad {
                        let mut db = vec![0.0; sb[0] * sb[1]];
                        for r in 0..sa[0] {
                            for c in 0..sa[1] {
                                db[bidx(sb, r, c)] += sign * g[r * sa[1] + c];
                            }
                        }
                        send(*b, db, &mut grads);
                    }
                    send(*a, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (sa, sb) = (ta.shape, tb.shape);
                    if nodes[b.0].requires_grad {
                        let mut db = vec![0.0; sb[0] * sb[1]];
                        for r in 0..sa[0] {
                            for c in 0..sa[1] {
                                let i = r * sa[1] + c;
                                db[bidx(sb, r, c)] += g[i] * ta.values[i];
                            }
                        }
                        send(*b, db, &mut grads);
                    }
                    if nodes[a.0].requires_grad {
                        let mut da = g;
                        for r in 0..sa[0] {
                            for c in 0..sa[1] {
                                da[r * sa[1] + c] *= tb.values[bidx(sb, r, c)];
                            }
                        }
                        send(*a, da, &mut grads);
                    }
                }
                Op::Scale(a, s) => {
                    send(*a, g.iter().map(|x| x * s).collect(), &mut grads);
                }
                Op::Relu(a) => {
                    let x = &val(*a).values;
                    send(*a, g.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect(), &mut grads);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value.values;
                    send(*a, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(), &mut grads);
                }
                Op::Tanh(a) => {
                    let y = &node.value.values;
                    send(*a, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(), &mut grads);
                }
                Op::Softplus(a) => {
                    let x = &val(*a).values;
                    send(*a, g.iter().zip(x).map(|(g, x)| g * sigmoid(*x)).collect(), &mut grads);
                }
                Op::Exp(a) => {
                    let y = &node.value.values;
                    send(*a, g.iter().zip(y).map(|(g, y)| g * y).collect(), &mut grads);
                }
                Op::Abs(a) => {
                    let x = &val(*a).values;
                    send(*a, g.iter().zip(x).map(|(g, x)| g * x.signum() * (*x != 0.0) as u8 as f64).collect(), &mut grads);
                }
                Op::Dropout(a, mask) => {
                    send(*a, g.iter().zip(mask).map(|(g, m)| g * m).collect(), &mut grads);
                }
                Op::Embed(table, idx) => {
                    let st = val(*table).shape;
                    let mut dt = vec![0.0; st[0] * st[1]];
                    for (row, &i) in idx.iter().enumerate() {
                        for c in 0..st[1] {
                            dt[i * st[1] + c] += g[row * st[1] + c];
                        }
                    }
                    send(*table, dt, &mut grads);
                }
                Op::Concat(parts) => {
                    let s = node.value.shape;
                    let mut off = 0;
                    for &p in parts {
                        let w = val(p).shape[1];
                        if nodes[p.0].requires_grad {
                            let mut dp = Vec::with_capacity(s[0] * w);
                            for r in 0..s[0] {
                                dp.extend_from_slice(&g[r * s[1] + off..r * s[1] + off + w]);
                            }
                            send(p, dp, &mut grads);
                        }
                        off += w;
                    }
                }
                Op::SliceCols(a, from) => {
                    let sa = val(*a).shape;
                    let w = node.value.shape[1];
                    let mut da = vec![0.0; sa[0] * sa[1]];
                    for r in 0..sa[0] {
                        da[r * sa[1] + from..r * sa[1] + from + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    send(*a, da, &mut grads);
                }
                Op::Sum(a) => {
                    send(*a, vec![g[0]; val(*a).len()], &mut grads);
                }
                Op::Mean(a) => {
                    let len = val(*a).len();
                    send(*a, vec![g[0] / len.max(1) as f64; len], &mut grads);
                }
                Op::NegBinomialNll { y, mu, alpha } => {
                    let (m, a) = (&val(*mu).values, &val(*alpha).values);
                    let mut dm = Vec::with_capacity(y.len());
                    let mut da = Vec::with_capacity(y.len());
                    for i in 0..y.len() {
                        let (gm, ga) = dist::nb_logpdf_grad(y[i], m[i], a[i]);
                        dm.push(-g[i] * gm);
                        da.push(-g[i] * ga);
                    }
                    send(*mu, dm, &mut grads);
                    send(*alpha, da, &mut grads);
                }
                Op::LowRankGaussianNll { z, mu, diag, factor } => {
                    let r = val(*factor).shape[1];
                    let lg = dist::lowrank_gaussian_logpdf_grad(
                        z,
                        &val(*mu).values,
                        &val(*diag).values,
                        &val(*factor).values,
                        r,
                    )?;
                    let s = -g[0];
                    send(*mu, lg.d_mu.iter().map(|x| x * s).collect(), &mut grads);
                    send(*diag, lg.d_diag.iter().map(|x| x * s).collect(), &mut grads);
                    send(*factor, lg.d_factor.iter().map(|x| x * s).collect(), &mut grads);
                }
            }
        }
        Ok(out)
    }
}
