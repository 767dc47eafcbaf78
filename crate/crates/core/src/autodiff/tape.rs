use std::collections::HashMap;

use super::tensor::gemm;
use super::{ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Affine(Var, f64),
    MulScalar(Var, Var),
    Concat(Vec<Var>),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Cos(Var),
    Softplus(Var),
    LogSigmoid(Var),
    Sum(Var),
    Dot(Var, Var),
    Softmax(Var),
    SqDist(Var, Var),
    RowSqDist(Var, Var),
    Outer(Var, Var),
    Index(Var, usize),
    CrossEntropy(Var, usize, f64),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records forward computations for a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients of a scalar with respect to every recorded node that needs one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn unary_shape_check(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    /// Same value, no gradient path back to `v`.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        self.constant(Tensor::scalar(value))
    }

    /// Loads a parameter; repeated loads of the same id return the same var.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: params.get(id).value.clone(),
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    // ---- primitives -----------------------------------------------------

    /// Matrix product. Supports `[m,k]·[k,n]`, `[k]·[k,n]` and `[m,k]·[k]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (
            self.value(a).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        let (m, k, n, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (sa[0], sa[1], sb[1], vec![sa[0], sb[1]]),
            (1, 2) if sa[0] == sb[0] => (1, sa[0], sb[1], vec![sb[1]]),
            (2, 1) if sa[1] == sb[0] => (sa[0], sa[1], 1, vec![sa[0]]),
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::new(out_shape, out)?, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        unary_shape_check("add", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push("add", out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        unary_shape_check("sub", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= y;
        }
        let rg = self.rg(a) || self.rg(b);
        self.push("sub", out, Op::Sub(a, b), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        unary_shape_check("mul", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= y;
        }
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", out, Op::Mul(a, b), rg)
    }

    /// Adds a `[c]` bias to a `[c]` vector or to every row of an `[r,c]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.value(x).shape(), self.value(bias).shape());
        if bs.len() != 1 || xs.is_empty() || xs.len() > 2 || *xs.last().unwrap() != bs[0] {
            return Err(Error::shape("add_bias", xs, bs));
        }
        let mut out = self.value(x).clone();
        let c = bs[0];
        let b = self.value(bias).data().to_vec();
        if c > 0 {
            for row in out.data_mut().chunks_mut(c) {
                for (o, bv) in row.iter_mut().zip(&b) {
                    *o += bv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push("add_bias", out, Op::AddBias(x, bias), rg)
    }

    /// `scale · x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = scale * *v + shift);
        let rg = self.rg(x);
        self.push("affine", out, Op::Affine(x, scale), rg)
    }

    pub fn scalar_mul(&mut self, x: Var, c: f64) -> Result<Var> {
        self.affine(x, c, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 0.0)
    }

    /// Multiplies every element of `x` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape(
                "mul_scalar",
                self.value(x).shape(),
                self.value(s).shape(),
            ));
        }
        let sv = self.value(s).item();
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= sv);
        let rg = self.rg(x) || self.rg(s);
        self.push("mul_scalar", out, Op::MulScalar(x, s), rg)
    }

    /// Concatenates 1-D tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.ndim() != 1 {
                return Err(Error::shape("concat", t.shape(), &[]));
            }
            out.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            "concat",
            Tensor::vector(out),
            Op::Concat(parts.to_vec()),
            rg,
        )
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let rows = self.value(*first).shape()[0];
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape("concat_cols", self.value(*first).shape(), s));
            }
            total += s[1];
        }
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.shape()[1];
            for r in 0..rows {
                out[r * total + offset..r * total + offset + c].copy_from_slice(t.row(r));
            }
            offset += c;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            "concat_cols",
            Tensor::matrix(rows, total, out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    /// Stacks equal-length 1-D tensors into the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var], width: usize) -> Result<Var> {
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            let t = self.value(r);
            if t.shape() != [width] {
                return Err(Error::shape("stack_rows", t.shape(), &[width]));
            }
            out.extend_from_slice(t.data());
        }
        let rg = rows.iter().any(|&p| self.rg(p));
        self.push(
            "stack_rows",
            Tensor::matrix(rows.len(), width, out)?,
            Op::StackRows(rows.to_vec()),
            rg,
        )
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = f(*v));
        let rg = self.rg(x);
        self.push(name, out, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.map("cos", x, f64::cos, Op::Cos(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.map("softplus", x, softplus, Op::Softplus(x))
    }

    /// `log σ(x)`, computed without overflow.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("log_sigmoid", x, |v| -softplus(-v), Op::LogSigmoid(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let s = self.sum(x)?;
        self.scalar_mul(s, 1.0 / n as f64)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 1 || ta.shape() != tb.shape() {
            return Err(Error::shape("dot", ta.shape(), tb.shape()));
        }
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        let rg = self.rg(a) || self.rg(b);
        self.push("dot", Tensor::scalar(s), Op::Dot(a, b), rg)
    }

    /// Softmax over a 1-D set. The empty set maps to the empty vector.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 1 {
            return Err(Error::shape("softmax", t.shape(), &[]));
        }
        let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = t.data().iter().map(|v| (v - max).exp()).collect();
        let z: f64 = out.iter().sum();
        out.iter_mut().for_each(|v| *v /= z);
        let rg = self.rg(x);
        self.push("softmax", Tensor::vector(out), Op::Softmax(x), rg)
    }

    /// `‖a − b‖²` for 1-D tensors.
    pub fn squared_l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 1 || ta.shape() != tb.shape() {
            return Err(Error::shape("squared_l2_distance", ta.shape(), tb.shape()));
        }
        let s = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        self.push(
            "squared_l2_distance",
            Tensor::scalar(s),
            Op::SqDist(a, b),
            rg,
        )
    }

    /// Squared distance of every row of `x: [n,d]` to `y: [d]`, giving `[n]`.
    pub fn row_squared_distance(&mut self, x: Var, y: Var) -> Result<Var> {
        let (tx, ty) = (self.value(x), self.value(y));
        if tx.ndim() != 2 || ty.ndim() != 1 || tx.shape()[1] != ty.shape()[0] {
            return Err(Error::shape("row_squared_distance", tx.shape(), ty.shape()));
        }
        let out: Vec<f64> = (0..tx.shape()[0])
            .map(|r| {
                tx.row(r)
                    .iter()
                    .zip(ty.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum()
            })
            .collect();
        let rg = self.rg(x) || self.rg(y);
        self.push(
            "row_squared_distance",
            Tensor::vector(out),
            Op::RowSqDist(x, y),
            rg,
        )
    }

    /// `u vᵀ` for 1-D `u: [n]`, `v: [m]`.
    pub fn outer(&mut self, u: Var, v: Var) -> Result<Var> {
        let (tu, tv) = (self.value(u), self.value(v));
        if tu.ndim() != 1 || tv.ndim() != 1 {
            return Err(Error::shape("outer", tu.shape(), tv.shape()));
        }
        let (n, m) = (tu.len(), tv.len());
        let mut out = Vec::with_capacity(n * m);
        for a in tu.data() {
            out.extend(tv.data().iter().map(|b| a * b));
        }
        let rg = self.rg(u) || self.rg(v);
        self.push("outer", Tensor::matrix(n, m, out)?, Op::Outer(u, v), rg)
    }

    /// Element `i` of a 1-D tensor as a scalar.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 1 || i >= t.len() {
            return Err(Error::shape("index", t.shape(), &[i]));
        }
        let v = t.data()[i];
        let rg = self.rg(x);
        self.push("index", Tensor::scalar(v), Op::Index(x, i), rg)
    }

    /// `weight · (−log softmax(logits)[target])`.
    pub fn cross_entropy_with_logits(
        &mut self,
        logits: Var,
        target: usize,
        weight: f64,
    ) -> Result<Var> {
        let t = self.value(logits);
        if t.ndim() != 1 || target >= t.len() {
            return Err(Error::shape(
                "cross_entropy_with_logits",
                t.shape(),
                &[target],
            ));
        }
        let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + t.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = weight * (lse - t.data()[target]);
        let rg = self.rg(logits);
        self.push(
            "cross_entropy_with_logits",
            Tensor::scalar(loss),
            Op::CrossEntropy(logits, target, weight),
            rg,
        )
    }

    // ---- composites -----------------------------------------------------

    /// `x·W + b` for `x: [in]` or `[n,in]`, `W: [in,out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    // ---- reverse sweep ---------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Parameter gradients are added to
    /// the gradient slots of `params`.
    pub fn backward(&self, loss: Var, params: &mut ParamSet) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            if let Op::Param(id) = node.op {
                params.get_mut(id).grad.add_assign(&g);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&contrib),
            slot => *slot = Some(contrib),
        }
    }

    fn accum_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &self.nodes[idx].value;
        let gd = g.data();
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = if ta.ndim() == 2 {
                    (ta.shape()[0], ta.shape()[1])
                } else {
                    (1, ta.shape()[0])
                };
                let n = if tb.ndim() == 2 { tb.shape()[1] } else { 1 };
                // dA = dC · Bᵀ, dB = Aᵀ · dC
                self.accum_with(grads, *a, |da| {
                    gemm(m, n, k, gd, false, tb.data(), true, da, true)
                });
                self.accum_with(grads, *b, |db| {
                    gemm(k, m, n, ta.data(), true, gd, false, db, true)
                });
            }
            Op::Add(a, b) => {
                self.accum_with(grads, *a, |d| add_into(d, gd));
                self.accum_with(grads, *b, |d| add_into(d, gd));
            }
            Op::Sub(a, b) => {
                self.accum_with(grads, *a, |d| add_into(d, gd));
                self.accum_with(grads, *b, |d| {
                    d.iter_mut().zip(gd).for_each(|(x, y)| *x -= y)
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                self.accum_with(grads, *a, |d| {
                    for ((x, gv), bv) in d.iter_mut().zip(gd).zip(tb) {
                        *x += gv * bv;
                    }
                });
                self.accum_with(grads, *b, |d| {
                    for ((x, gv), av) in d.iter_mut().zip(gd).zip(ta) {
                        *x += gv * av;
                    }
                });
            }
            Op::AddBias(x, b) => {
                self.accum_with(grads, *x, |d| add_into(d, gd));
                let c = self.value(*b).len();
                self.accum_with(grads, *b, |d| {
                    if c > 0 {
                        for row in gd.chunks(c) {
                            add_into(d, row);
                        }
                    }
                });
            }
            Op::Affine(x, scale) => {
                self.accum_with(grads, *x, |d| {
                    d.iter_mut().zip(gd).for_each(|(a, gv)| *a += scale * gv)
                });
            }
            Op::MulScalar(x, s) => {
                let sv = self.value(*s).item();
                let xv = self.value(*x).data();
                self.accum_with(grads, *x, |d| {
                    d.iter_mut().zip(gd).for_each(|(a, gv)| *a += sv * gv)
                });
                let ds: f64 = gd.iter().zip(xv).map(|(a, b)| a * b).sum();
                self.accum_with(grads, *s, |d| d[0] += ds);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    self.accum_with(grads, *p, |d| add_into(d, &gd[offset..offset + n]));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.shape()[1];
                let rows = out.shape()[0];
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).shape()[1];
                    self.accum_with(grads, *p, |d| {
                        for r in 0..rows {
                            add_into(
                                &mut d[r * c..(r + 1) * c],
                                &gd[r * total + offset..r * total + offset + c],
                            );
                        }
                    });
                    offset += c;
                }
            }
            Op::StackRows(rows) => {
                let width = out.cols();
                for (r, v) in rows.iter().enumerate() {
                    self.accum_with(grads, *v, |d| add_into(d, &gd[r * width..(r + 1) * width]));
                }
            }
            Op::Relu(x) => {
                let od = out.data();
                self.accum_with(grads, *x, |d| {
                    for ((a, gv), o) in d.iter_mut().zip(gd).zip(od) {
                        if *o > 0.0 {
                            *a += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let od = out.data();
                self.accum_with(grads, *x, |d| {
                    for ((a, gv), o) in d.iter_mut().zip(gd).zip(od) {
                        *a += gv * o * (1.0 - o);
                    }
                });
            }
            Op::Tanh(x) => {
                let od = out.data();
                self.accum_with(grads, *x, |d| {
                    for ((a, gv), o) in d.iter_mut().zip(gd).zip(od) {
                        *a += gv * (1.0 - o * o);
                    }
                });
            }
            Op::Exp(x) => {
                let od = out.data();
                self.accum_with(grads, *x, |d| {
                    for ((a, gv), o) in d.iter_mut().zip(gd).zip(od) {
                        *a += gv * o;
                    }
                });
            }
            Op::Cos(x) => {
                let xd = self.value(*x).data();
                self.accum_with(grads, *x, |d| {
                    for ((a, gv), xv) in d.iter_mut().zip(gd).zip(xd) {
                        *a -= gv * xv.sin();
                    }
                });
            }
            Op::Softplus(x) => {
                let xd = self.value(*x).data();
                self.accum_with(grads, *x, |d| {
                    for ((a, gv), xv) in d.iter_mut().zip(gd).zip(xd) {
                        *a += gv * sigmoid(*xv);
                    }
                });
            }
            Op::LogSigmoid(x) => {
                let xd = self.value(*x).data();
                self.accum_with(grads, *x, |d| {
                    for ((a, gv), xv) in d.iter_mut().zip(gd).zip(xd) {
                        *a += gv * sigmoid(-*xv);
                    }
                });
            }
            Op::Sum(x) => {
                let gv = gd[0];
                self.accum_with(grads, *x, |d| d.iter_mut().for_each(|a| *a += gv));
            }
            Op::Dot(a, b) => {
                let gv = gd[0];
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                self.accum_with(grads, *a, |d| {
                    d.iter_mut().zip(tb).for_each(|(x, y)| *x += gv * y)
                });
                self.accum_with(grads, *b, |d| {
                    d.iter_mut().zip(ta).for_each(|(x, y)| *x += gv * y)
                });
            }
            Op::Softmax(x) => {
                let od = out.data();
                let inner: f64 = gd.iter().zip(od).map(|(a, b)| a * b).sum();
                self.accum_with(grads, *x, |d| {
                    for ((a, gv), o) in d.iter_mut().zip(gd).zip(od) {
                        *a += o * (gv - inner);
                    }
                });
            }
            Op::SqDist(a, b) => {
                let gv = gd[0];
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                self.accum_with(grads, *a, |d| {
                    for ((x, av), bv) in d.iter_mut().zip(ta).zip(tb) {
                        *x += 2.0 * gv * (av - bv);
                    }
                });
                self.accum_with(grads, *b, |d| {
                    for ((x, av), bv) in d.iter_mut().zip(ta).zip(tb) {
                        *x -= 2.0 * gv * (av - bv);
                    }
                });
            }
            Op::RowSqDist(x, y) => {
                let (tx, ty) = (self.value(*x), self.value(*y));
                let c = ty.len();
                let yd = ty.data();
                self.accum_with(grads, *x, |d| {
                    for (r, gv) in gd.iter().enumerate() {
                        for ((a, xv), yv) in d[r * c..(r + 1) * c].iter_mut().zip(tx.row(r)).zip(yd)
                        {
                            *a += 2.0 * gv * (xv - yv);
                        }
                    }
                });
                self.accum_with(grads, *y, |d| {
                    for (r, gv) in gd.iter().enumerate() {
                        for ((a, xv), yv) in d.iter_mut().zip(tx.row(r)).zip(yd) {
                            *a -= 2.0 * gv * (xv - yv);
                        }
                    }
                });
            }
            Op::Outer(u, v) => {
                let (tu, tv) = (self.value(*u).data(), self.value(*v).data());
                let m = tv.len();
                self.accum_with(grads, *u, |d| {
                    for (i, a) in d.iter_mut().enumerate() {
                        *a += gd[i * m..(i + 1) * m]
                            .iter()
                            .zip(tv)
                            .map(|(g, b)| g * b)
                            .sum::<f64>();
                    }
                });
                self.accum_with(grads, *v, |d| {
                    for (i, uv) in tu.iter().enumerate() {
                        for (a, g) in d.iter_mut().zip(&gd[i * m..(i + 1) * m]) {
                            *a += g * uv;
                        }
                    }
                });
            }
            Op::Index(x, i) => {
                let gv = gd[0];
                let i = *i;
                self.accum_with(grads, *x, |d| d[i] += gv);
            }
            Op::CrossEntropy(logits, target, weight) => {
                let t = self.value(*logits).data();
                let max = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = t.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                let scale = gd[0] * weight;
                let target = *target;
                self.accum(grads, *logits, {
                    let d: Vec<f64> = exps
                        .iter()
                        .enumerate()
                        .map(|(k, e)| scale * (e / z - if k == target { 1.0 } else { 0.0 }))
                        .collect();
                    Tensor::vector(d)
                });
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}
