//! Define-by-run reverse-mode autodiff over dense `f64` tensors.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes only reference
//! earlier nodes, so a single reverse sweep in insertion order is a valid
//! topological traversal. Parameters are borrowed from their
//! [`ParameterSet`] rather than copied; gradients come back in a detached
//! [`Gradients`] value that the owning set accumulates after the graph is
//! dropped.
//!
//! Tensors are rank 0, 1 or 2. Row-wise ops (affine, softmax, reductions over
//! the last axis) treat a rank-2 tensor as a batch of rows.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::params::{ParamId, ParameterSet, SetId};
use crate::numerics::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'p> {
    Owned(Vec<f64>),
    Borrowed(&'p [f64]),
}

impl Value<'_> {
    fn as_slice(&self) -> &[f64] {
        match self {
            Value::Owned(v) => v,
            Value::Borrowed(s) => s,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param { set: SetId, index: usize },
    Affine { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    SumLast(Var),
    Sum(Var),
    Mean(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Minimum(Var, Var),
    Reshape(Var),
}

struct Node<'p> {
    shape: Vec<usize>,
    value: Value<'p>,
    op: Op,
    requires_grad: bool,
}

/// Append-only operation record.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    params: HashMap<(SetId, usize), Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn rows_of(shape: &[usize]) -> usize {
    let n: usize = shape.iter().product();
    let d = last_dim(shape);
    if d == 0 {
        0
    } else {
        n / d
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

/// `c[rows×m] (+)= a[rows×n] · w[m×n]ᵀ`
fn matmul_nt(a: &[f64], w: &[f64], rows: usize, n: usize, m: usize, c: &mut [f64]) {
    if rows == 1 {
        for (j, cj) in c.iter_mut().enumerate() {
            let wr = &w[j * n..(j + 1) * n];
            *cj += wr.iter().zip(a).map(|(p, q)| p * q).sum::<f64>();
        }
        return;
    }
    // SAFETY: slice lengths are checked by the callers; strides describe
    // row-major a[rows×n], wᵀ[n×m] and c[rows×m].
    unsafe {
        matrixmultiply::dgemm(
            rows,
            n,
            m,
            1.0,
            a.as_ptr(),
            n as isize,
            1,
            w.as_ptr(),
            1,
            n as isize,
            1.0,
            c.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

/// `da[rows×n] += dc[rows×m] · w[m×n]`
fn matmul_nn(dc: &[f64], w: &[f64], rows: usize, m: usize, n: usize, da: &mut [f64]) {
    if rows == 1 {
        for (j, &g) in dc.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let wr = &w[j * n..(j + 1) * n];
            for (d, &wv) in da.iter_mut().zip(wr) {
                *d += g * wv;
            }
        }
        return;
    }
    // SAFETY: see `matmul_nt`.
    unsafe {
        matrixmultiply::dgemm(
            rows,
            m,
            n,
            1.0,
            dc.as_ptr(),
            m as isize,
            1,
            w.as_ptr(),
            n as isize,
            1,
            1.0,
            da.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `dw[m×n] += dc[rows×m]ᵀ · a[rows×n]`
fn matmul_tn(dc: &[f64], a: &[f64], rows: usize, m: usize, n: usize, dw: &mut [f64]) {
    if rows == 1 {
        for (j, &g) in dc.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let wr = &mut dw[j * n..(j + 1) * n];
            for (d, &av) in wr.iter_mut().zip(a) {
                *d += g * av;
            }
        }
        return;
    }
    // SAFETY: see `matmul_nt`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            rows,
            n,
            1.0,
            dc.as_ptr(),
            1,
            m as isize,
            a.as_ptr(),
            n as isize,
            1,
            1.0,
            dw.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            value: Value::Owned(data),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.as_slice()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape is consistent")
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_vec(&mut self, data: Vec<f64>) -> Var {
        let n = data.len();
        self.push(vec![n], data, Op::Leaf, false)
    }

    pub fn constant_rows(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(Error::dim("constant_rows", &[rows, cols], &[data.len()]));
        }
        Ok(self.push(vec![rows, cols], data, Op::Leaf, false))
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.push(vec![], vec![v], Op::Leaf, false)
    }

    /// Differentiable input that is not a registered parameter.
    pub fn variable(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.data().to_vec(), Op::Leaf, true)
    }

    /// Registers a parameter (once per graph) without copying its data.
    pub fn param(&mut self, set: &'p ParameterSet, id: ParamId) -> Var {
        let key = (set.id(), id.0);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let t = set.get(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Value::Borrowed(t.data()),
            op: Op::Param {
                set: set.id(),
                index: id.0,
            },
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(key, v);
        v
    }

    /// Value of `v` re-entered as a constant: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let shape = self.shape(v).to_vec();
        let data = self.value(v).to_vec();
        self.push(shape, data, Op::Leaf, false)
    }

    /// `x·Wᵀ + b` for `x` of shape `[n]` or `[rows, n]`, `W` of shape `[m, n]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || xs.len() > 2 || last_dim(&xs) != ws[1] {
            return Err(Error::dim("affine", &xs, &ws));
        }
        let (m, n) = (ws[0], ws[1]);
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != [m] {
                return Err(Error::dim("affine bias", bs, &[m]));
            }
        }
        let rows = rows_of(&xs);
        let mut out = vec![0.0; rows * m];
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_mut(m.max(1)) {
                row.copy_from_slice(bv);
            }
        }
        matmul_nt(self.value(x), self.value(w), rows, n, m, &mut out);
        let shape = if xs.len() == 1 { vec![m] } else { vec![rows, m] };
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(shape, out, Op::Affine { x, w, b }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, rec: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, rec, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, f64::min, Op::Minimum(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, rec: Op) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, rec, rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| k * x, Op::Scale(a, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x + k, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp { x: a, lo, hi })
    }

    fn rowwise(&mut self, a: Var, f: fn(&[f64], &mut [f64]), rec: Op) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = last_dim(&shape);
        if shape.is_empty() || shape.len() > 2 || d == 0 {
            return Err(Error::Domain(format!("softmax needs a non-empty vector, got shape {shape:?}")));
        }
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        for (xr, or) in x.chunks(d).zip(out.chunks_mut(d)) {
            f(xr, or);
        }
        let rg = self.rg(a);
        Ok(self.push(shape, out, rec, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.rowwise(a, softmax_row, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.rowwise(a, log_softmax_row, Op::LogSoftmax(a))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let s0 = self.shape(*first).to_vec();
        if s0.is_empty() || s0.len() > 2 {
            return Err(Error::dim("concat", &s0, &[]));
        }
        let rows = rows_of(&s0);
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len() || rows_of(s) != rows {
                return Err(Error::dim("concat", &s0, s));
            }
            width += last_dim(s);
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                let d = last_dim(self.shape(p));
                out.extend_from_slice(&self.value(p)[r * d..(r + 1) * d]);
            }
        }
        let shape = if s0.len() == 1 { vec![width] } else { vec![rows, width] };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(shape, out, Op::Concat(parts.to_vec()), rg))
    }

    /// Sum over the last axis: `[n] → []`, `[rows, n] → [rows]`.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let d = last_dim(&shape);
        let out: Vec<f64> = if d == 0 {
            vec![0.0; rows_of(&shape).max(if shape.len() <= 1 { 1 } else { 0 })]
        } else {
            self.value(a).chunks(d).map(|c| c.iter().sum()).collect()
        };
        let new_shape = if shape.len() <= 1 { vec![] } else { shape[..shape.len() - 1].to_vec() };
        let rg = self.rg(a);
        self.push(new_shape, out, Op::SumLast(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(vec![], vec![s], Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(Error::dim("reshape", self.shape(a), shape));
        }
        let data = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(a), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param { set, index } => Some((set, index, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { nodes: grads, params })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.as_slice();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.as_slice().len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf | Op::Param { .. } => {}
            Op::Affine { x, w, b } => {
                let xs = &self.nodes[x.0].shape;
                let ws = &self.nodes[w.0].shape;
                let (m, n) = (ws[0], ws[1]);
                let rows = rows_of(xs);
                let xv = self.value(*x);
                let wv = self.value(*w);
                acc(*x, &mut |dx| matmul_nn(g, wv, rows, m, n, dx));
                acc(*w, &mut |dw| matmul_tn(g, xv, rows, m, n, dw));
                if let Some(b) = b {
                    acc(*b, &mut |db| {
                        for row in g.chunks(m.max(1)) {
                            for (d, &r) in db.iter_mut().zip(row) {
                                *d += r;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * bv[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * av[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / bv[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] -= g[k] * out[k] / bv[k];
                    }
                });
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        if av[k] <= bv[k] {
                            d[k] += g[k];
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        if av[k] > bv[k] {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += k * g)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g))
            }
            Op::Tanh(a) => acc(*a, &mut |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * (1.0 - out[k] * out[k]);
                }
            }),
            Op::Relu(a) => {
                let av = self.value(*a);
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        if av[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                })
            }
            Op::Sigmoid(a) => acc(*a, &mut |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * out[k] * (1.0 - out[k]);
                }
            }),
            Op::Exp(a) => acc(*a, &mut |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * out[k];
                }
            }),
            Op::Ln(a) => {
                let av = self.value(*a);
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / av[k];
                    }
                })
            }
            Op::Square(a) => {
                let av = self.value(*a);
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += 2.0 * g[k] * av[k];
                    }
                })
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        if xv[k] >= *lo && xv[k] <= *hi {
                            d[k] += g[k];
                        }
                    }
                })
            }
            Op::Softmax(a) => {
                let dd = last_dim(&node.shape);
                acc(*a, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(dd).zip(g.chunks(dd)).zip(out.chunks(dd)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for k in 0..dd {
                            dr[k] += yr[k] * (gr[k] - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(a) => {
                let dd = last_dim(&node.shape);
                acc(*a, &mut |d| {
                    for ((dr, gr), lr) in d.chunks_mut(dd).zip(g.chunks(dd)).zip(out.chunks(dd)) {
                        let total: f64 = gr.iter().sum();
                        for k in 0..dd {
                            dr[k] += gr[k] - lr[k].exp() * total;
                        }
                    }
                })
            }
            Op::Concat(parts) => {
                let width = last_dim(&node.shape);
                let rows = rows_of(&node.shape);
                let mut offset = 0;
                for p in parts {
                    let dp = last_dim(&self.nodes[p.0].shape);
                    acc(*p, &mut |d| {
                        for r in 0..rows {
                            let src = &g[r * width + offset..r * width + offset + dp];
                            for (x, &s) in d[r * dp..(r + 1) * dp].iter_mut().zip(src) {
                                *x += s;
                            }
                        }
                    });
                    offset += dp;
                }
            }
            Op::SumLast(a) => {
                let dd = last_dim(&self.nodes[a.0].shape);
                acc(*a, &mut |d| {
                    if dd == 0 {
                        return;
                    }
                    for (dr, &gr) in d.chunks_mut(dd).zip(g) {
                        dr.iter_mut().for_each(|x| *x += gr);
                    }
                })
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => acc(*a, &mut |d| {
                let n = d.len().max(1) as f64;
                d.iter_mut().for_each(|x| *x += g[0] / n)
            }),
        }
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<(SetId, usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to a node; `None` when the node is unreachable
    /// from the loss or does not require gradients.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    /// `(parameter index, gradient)` for every reached parameter of a set.
    pub fn params_of(&self, set: SetId) -> impl Iterator<Item = (usize, &[f64])> {
        self.params
            .iter()
            .filter(move |(s, _, _)| *s == set)
            .filter_map(|&(_, idx, node)| self.nodes[node].as_deref().map(|g| (idx, g)))
    }

    pub fn touches(&self, set: SetId) -> bool {
        self.params_of(set).any(|(_, g)| g.iter().any(|&x| x != 0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn affine_cases() {
        let mut g = Graph::new();
        let x = g.constant_vec(vec![3.0, 4.0]);
        let w = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant_vec(vec![0.0, 0.0]);
        let y = g.affine(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y), &[3.0, 4.0]);

        let x = g.constant_vec(vec![9.0, 9.0]);
        let w = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant_vec(vec![1.0, 1.0]);
        let y = g.affine(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y), &[1.0, 1.0]);

        let x = g.constant_vec(vec![1.0, 1.0]);
        let w = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.affine(x, w, None).unwrap();
        assert_eq!(g.value(y), &[3.0, 7.0]);
    }

    #[test]
    fn affine_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let x = g.constant_vec(vec![1.0, 2.0, 3.0]);
        let w = g.constant(Tensor::zeros(&[2, 2]));
        let err = g.affine(x, w, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn batched_affine_matches_rowwise() {
        let mut g = Graph::new();
        let w = g.variable(Tensor::matrix(3, 2, vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap());
        let b = g.variable(Tensor::vector(vec![0.01, 0.02, 0.03]));
        let xb = g.constant_rows(2, 2, vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let yb = g.affine(xb, w, Some(b)).unwrap();
        let x0 = g.constant_vec(vec![1.0, 2.0]);
        let y0 = g.affine(x0, w, Some(b)).unwrap();
        let x1 = g.constant_vec(vec![-1.0, 0.5]);
        let y1 = g.affine(x1, w, Some(b)).unwrap();
        let rows: Vec<f64> = g.value(y0).iter().chain(g.value(y1)).copied().collect();
        for (a, b) in g.value(yb).iter().zip(&rows) {
            assert_relative_eq!(a, b, epsilon = 1e-15);
        }
        let s = g.sum(yb);
        let grads = g.backward(s).unwrap();
        // d/dW sum(XWᵀ+b) = column sums of X broadcast over rows
        assert_eq!(grads.wrt(w).unwrap(), &[0.0, 2.5, 0.0, 2.5, 0.0, 2.5]);
        assert_eq!(grads.wrt(b).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn activations() {
        let mut g = Graph::new();
        let x = g.constant_vec(vec![0.0, 0.0, 0.0]);
        let s = g.softmax(x).unwrap();
        for &p in g.value(s) {
            assert_relative_eq!(p, 1.0 / 3.0, epsilon = 1e-15);
        }
        let x = g.constant_vec(vec![-1.0, 2.0]);
        let r = g.relu(x);
        assert_eq!(g.value(r), &[0.0, 2.0]);
        let x = g.constant_vec(vec![0.5]);
        let t = g.tanh(x);
        assert_relative_eq!(g.value(t)[0], 0.46211715, epsilon = 1e-8);
    }

    #[test]
    fn softmax_of_empty_is_domain_error() {
        let mut g = Graph::new();
        let x = g.constant_vec(vec![]);
        assert!(matches!(g.softmax(x), Err(Error::Domain(_))));
    }

    #[test]
    fn square_and_tanh_derivatives() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.square(x);
        assert_eq!(g.backward(y).unwrap().wrt(x).unwrap(), &[6.0]);

        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(0.0));
        let y = g.tanh(x);
        assert_eq!(g.backward(y).unwrap().wrt(x).unwrap(), &[1.0]);
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
        let y = g.square(x);
        assert!(matches!(g.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(2.0));
        let y = g.square(x);
        let d = g.detach(y);
        let z = g.mul(d, x).unwrap();
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[4.0]);
    }

    #[test]
    fn params_are_borrowed_and_cached() {
        let mut ps = ParameterSet::new();
        let id = ps.insert("w", Tensor::vector(vec![1.0, -2.0])).unwrap();
        let grads = {
            let mut g = Graph::new();
            let a = g.param(&ps, id);
            let b = g.param(&ps, id);
            assert_eq!(a, b);
            let s = g.square(a);
            let l = g.sum(s);
            g.backward(l).unwrap()
        };
        ps.accumulate(&grads).unwrap();
        assert_eq!(ps.get(id).grad().unwrap(), &[2.0, -4.0]);
    }
}
