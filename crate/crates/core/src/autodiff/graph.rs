//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive as it is evaluated. Nodes are appended
//! in evaluation order, so parents always precede children and a single reverse
//! sweep from the output visits each node once.

use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Log,
    Sqrt,
    Tanh,
    Silu,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine { x: Var, scale: f64 },
    MatMul(Var, Var),
    Unary(Var, Unary),
    Pow { x: Var, p: f64 },
    ClampMin { x: Var, floor: f64 },
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    Broadcast(Var),
    Reshape(Var),
    Transpose(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Gather { x: Var, indices: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Arc<Tensor>,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    detached: Vec<Var>,
    visited: usize,
}

impl Gradients {
    /// Gradient of a leaf that requires grad; `None` for constants.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, taking ownership. Zero-filled for detached leaves.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Leaves that require grad but are not connected to the output.
    /// Their gradients are zero.
    pub fn detached(&self) -> &[Var] {
        &self.detached
    }

    /// Number of nodes processed by the reverse sweep.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

impl Graph {
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Arc::new(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Shares an existing buffer as a leaf without copying.
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(
                op,
                format!("operand #{} {sa:?} vs operand #{} {sb:?}", a.0, b.0),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b), v, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Sub(a, b), v, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Mul(a, b), v, rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("div", a, b)?;
        if self.value(b).data().iter().any(|&d| d == 0.0) {
            return Err(Error::non_finite(format!("div: zero divisor in operand #{}", b.0)));
        }
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Div(a, b), v, rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(x).map(|e| scale * e + shift);
        let rg = self.rg(&[x]);
        self.push(Op::Affine { x, scale }, v, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("operand #{} {sa:?} times operand #{} {sb:?}", a.0, b.0),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            &mut out,
            0.0,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), Tensor::new(&[m, n], out)?, rg))
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Result<Var> {
        let xv = self.value(x);
        let v = match f {
            Unary::Exp => xv.map(f64::exp),
            Unary::Log => {
                if xv.data().iter().any(|&e| e <= 0.0) {
                    return Err(Error::non_finite(format!("log of non-positive value in #{}", x.0)));
                }
                xv.map(f64::ln)
            }
            Unary::Sqrt => {
                if xv.data().iter().any(|&e| e < 0.0) {
                    return Err(Error::non_finite(format!("sqrt of negative value in #{}", x.0)));
                }
                xv.map(f64::sqrt)
            }
            Unary::Tanh => xv.map(f64::tanh),
            Unary::Silu => xv.map(|e| e / (1.0 + (-e).exp())),
        };
        if !v.is_finite() {
            return Err(Error::non_finite(format!("{f:?} of #{}", x.0)));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Unary(x, f), v, rg))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sqrt)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Silu)
    }

    pub fn pow(&mut self, x: Var, p: f64) -> Result<Var> {
        let v = if p == 2.0 {
            self.value(x).map(|e| e * e)
        } else {
            self.value(x).map(|e| e.powf(p))
        };
        if !v.is_finite() {
            return Err(Error::non_finite(format!("pow({p}) of #{}", x.0)));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Pow { x, p }, v, rg))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.pow(x, 2.0)
    }

    /// `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        let v = self.value(x).map(|e| e.max(floor));
        let rg = self.rg(&[x]);
        self.push(Op::ClampMin { x, floor }, v, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(Op::Sum(x), v, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums out one axis. A 1-D input reduces to shape `[1]`.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "sum_axis",
                format!("axis {axis} out of range for #{} {shape:?}", x.0),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(&src[base..base + inner]) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Op::SumAxis { x, axis }, Tensor::new(&out_shape, out)?, rg))
    }

    /// Right-aligned broadcast: missing leading axes and unit axes expand.
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src_shape = self.shape(x).to_vec();
        let map = broadcast_index_map(&src_shape, shape).ok_or_else(|| {
            Error::shape(
                "broadcast",
                format!("operand #{} {src_shape:?} cannot broadcast to {shape:?}", x.0),
            )
        })?;
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Broadcast(x), Tensor::new(shape, data)?, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Reshape(x), v, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("transpose", format!("#{} {shape:?} is not 2-D", x.0)));
        }
        let (r, c) = (shape[0], shape[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Transpose(x), Tensor::new(&[c, r], out)?, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no operands"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("operand #{} {s:?} incompatible with {base:?} on axis {axis}", p.0),
                ));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis];
                let src = self.value(*p).data();
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            Tensor::new(&out_shape, out)?,
            rg,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("[{start}, {}) on axis {axis} of #{} {shape:?}", start + len, x.0),
            ));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let b = (o * full + start) * inner;
            out.extend_from_slice(&src[b..b + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Narrow { x, axis, start }, Tensor::new(&out_shape, out)?, rg))
    }

    /// Selects rows of the leading axis (repeats allowed).
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = shape[0];
        if indices.is_empty() {
            return Err(Error::shape("gather", "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of range for #{} {shape:?}", x.0),
            ));
        }
        let inner: usize = shape[1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            out.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            Tensor::new(&out_shape, out)?,
            rg,
        ))
    }

    /// `x @ w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        let shape = self.shape(y).to_vec();
        let bb = self.broadcast(b, &shape)?;
        self.add(y, bb)
    }

    /// Multiplies row `i` of `x` by `coeffs[i]`.
    pub fn row_scale(&mut self, x: Var, coeffs: &[f64]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != coeffs.len() {
            return Err(Error::shape(
                "row_scale",
                format!("{} coefficients for #{} {shape:?}", coeffs.len(), x.0),
            ));
        }
        if coeffs.iter().all(|&c| c == coeffs[0]) {
            return Ok(self.scale(x, coeffs[0]));
        }
        let c = self.constant(Tensor::new(&[coeffs.len(), 1], coeffs.to_vec())?);
        let cb = self.broadcast(c, &shape)?;
        self.mul(x, cb)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_shape = self.shape(output);
        if self.value(output).len() != 1 {
            return Err(Error::NonScalar(out_shape.to_vec()));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(vec![1.0]);
        }
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut visited = 0;
        for i in (0..n).rev() {
            let Some(gy) = grads[i].take() else { continue };
            visited += 1;
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(Tensor::new(node.value.shape(), gy)?);
                continue;
            }
            self.propagate(&node.op, &node.value, &gy, &mut grads);
        }
        let mut detached = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && leaf_grads[i].is_none() {
                leaf_grads[i] = Some(Tensor::zeros(node.value.shape()));
                detached.push(Var(i));
            }
        }
        Ok(Gradients {
            grads: leaf_grads,
            detached,
            visited,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        f: impl Fn(usize) -> f64,
    ) {
        if !self.wants(v) {
            return;
        }
        let n = self.value(v).len();
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().enumerate().for_each(|(i, a)| *a += f(i)),
            slot @ None => *slot = Some((0..n).map(f).collect()),
        }
    }

    fn propagate(&self, op: &Op, y: &Tensor, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate_with(grads, *a, |i| gy[i]);
                self.accumulate_with(grads, *b, |i| gy[i]);
            }
            Op::Sub(a, b) => {
                self.accumulate_with(grads, *a, |i| gy[i]);
                self.accumulate_with(grads, *b, |i| -gy[i]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate_with(grads, *a, |i| gy[i] * bv[i]);
                self.accumulate_with(grads, *b, |i| gy[i] * av[i]);
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate_with(grads, *a, |i| gy[i] / bv[i]);
                self.accumulate_with(grads, *b, |i| -gy[i] * av[i] / (bv[i] * bv[i]));
            }
            Op::Affine { x, scale } => self.accumulate_with(grads, *x, |i| gy[i] * scale),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    // dA = dY · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gy, (n, 1), self.value(*b).data(), (1, n), &mut da, 0.0);
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dY
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), (1, k), gy, (n, 1), &mut db, 0.0);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Unary(x, f) => {
                let xv = self.value(*x).data();
                let yv = y.data();
                match f {
                    Unary::Exp => self.accumulate_with(grads, *x, |i| gy[i] * yv[i]),
                    Unary::Log => self.accumulate_with(grads, *x, |i| gy[i] / xv[i]),
                    Unary::Sqrt => self.accumulate_with(grads, *x, |i| gy[i] / (2.0 * yv[i])),
                    Unary::Tanh => {
                        self.accumulate_with(grads, *x, |i| gy[i] * (1.0 - yv[i] * yv[i]))
                    }
                    Unary::Silu => self.accumulate_with(grads, *x, |i| {
                        let s = 1.0 / (1.0 + (-xv[i]).exp());
                        gy[i] * (s + xv[i] * s * (1.0 - s))
                    }),
                }
            }
            Op::Pow { x, p } => {
                let xv = self.value(*x).data();
                let p = *p;
                if p == 2.0 {
                    self.accumulate_with(grads, *x, |i| gy[i] * 2.0 * xv[i]);
                } else {
                    self.accumulate_with(grads, *x, |i| gy[i] * p * xv[i].powf(p - 1.0));
                }
            }
            Op::ClampMin { x, floor } => {
                let xv = self.value(*x).data();
                self.accumulate_with(grads, *x, |i| if xv[i] > *floor { gy[i] } else { 0.0 });
            }
            Op::Sum(x) => self.accumulate_with(grads, *x, |_| gy[0]),
            Op::SumAxis { x, axis } => {
                let (_, len, inner) = split_axis(self.shape(*x), *axis);
                self.accumulate_with(grads, *x, |i| {
                    let o = i / (len * inner);
                    gy[o * inner + i % inner]
                });
            }
            Op::Broadcast(x) => {
                if !self.wants(*x) {
                    return;
                }
                let map = broadcast_index_map(self.shape(*x), y.shape())
                    .expect("validated in forward");
                let mut g = vec![0.0; self.value(*x).len()];
                for (o, &i) in map.iter().enumerate() {
                    g[i] += gy[o];
                }
                self.accumulate(grads, *x, g);
            }
            Op::Reshape(x) => self.accumulate_with(grads, *x, |i| gy[i]),
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                self.accumulate_with(grads, *x, |idx| {
                    let (i, j) = (idx / c, idx % c);
                    gy[j * r + i]
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(y.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    let off = offset;
                    self.accumulate_with(grads, *p, |i| {
                        let o = i / (len * inner);
                        let rest = i % (len * inner);
                        gy[o * total * inner + off * inner + rest]
                    });
                    offset += len;
                    let _ = outer;
                }
            }
            Op::Narrow { x, axis, start } => {
                if !self.wants(*x) {
                    return;
                }
                let (outer, full, inner) = split_axis(self.shape(*x), *axis);
                let len = y.shape()[*axis];
                let mut g = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    g[dst..dst + len * inner].copy_from_slice(&gy[src..src + len * inner]);
                }
                self.accumulate(grads, *x, g);
            }
            Op::Gather { x, indices } => {
                if !self.wants(*x) {
                    return;
                }
                let inner: usize = self.shape(*x)[1..].iter().product();
                let mut g = vec![0.0; self.value(*x).len()];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..inner {
                        g[i * inner + j] += gy[r * inner + j];
                    }
                }
                self.accumulate(grads, *x, g);
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// For every output element, the flat index of the source element it copies.
fn broadcast_index_map(src: &[usize], dst: &[usize]) -> Option<Vec<usize>> {
    if src.len() > dst.len() {
        return None;
    }
    let pad = dst.len() - src.len();
    let mut strides = vec![0usize; dst.len()];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let (s, d) = (src[i], dst[pad + i]);
        if s == d {
            strides[pad + i] = acc;
        } else if s != 1 {
            return None;
        }
        acc *= s;
    }
    let total: usize = dst.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; dst.len()];
    let mut src_i = 0usize;
    for _ in 0..total {
        map.push(src_i);
        for ax in (0..dst.len()).rev() {
            idx[ax] += 1;
            src_i += strides[ax];
            if idx[ax] < dst[ax] {
                break;
            }
            src_i -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Some(map)
}

/// `c = a · b + beta · c` with explicit (row, col) strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover every index addressed by the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_shape_algebra() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(&[2, 3]));
        let b = g.constant(Tensor::ones(&[3, 1]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1]);
        assert_eq!(g.value(c).data(), &[3.0, 3.0]);
    }

    #[test]
    fn matmul_mismatch_names_operands() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(&[2, 3]));
        let b = g.constant(Tensor::ones(&[2, 1]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]") && err.contains("[2, 1]"), "{err}");
    }

    #[test]
    fn sum_of_ones() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(&[4, 4]));
        let s = g.sum(a);
        assert_eq!(g.value(s).item().unwrap(), 16.0);
    }

    #[test]
    fn composite_square_sum() {
        // f(x) = sum((2x)^2) at ones(3) = 12
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[3]), true);
        let y = g.scale(x, 2.0);
        let y2 = g.square(y).unwrap();
        let s = g.sum(y2);
        assert_eq!(g.value(s).item().unwrap(), 12.0);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[8.0, 8.0, 8.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]), true);
        let y = g.square(x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn grad_of_plain_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![-3.0, 0.5, 7.0, 1e3]), true);
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn grad_of_log_sum() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        let y = g.log(x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.5]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[2]), true);
        let y = g.scale(x, 3.0);
        assert!(matches!(g.backward(y), Err(Error::NonScalar(_))));
    }

    #[test]
    fn detached_leaf_gets_zero_and_flag() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[2]), true);
        let unused = g.leaf(Tensor::ones(&[3]), true);
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.detached(), &[unused]);
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[2]), true);
        let c = g.constant(Tensor::full(&[2], 3.0));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn each_node_visited_once() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[3]), true);
        let a = g.square(x).unwrap();
        let b = g.mul(a, x).unwrap();
        let c = g.add(a, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.visited(), g.len());
    }

    #[test]
    fn broadcast_rows_and_columns() {
        let mut g = Graph::new();
        let b = g.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]), true);
        let bb = g.broadcast(b, &[2, 3]).unwrap();
        assert_eq!(g.value(bb).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let col = g.leaf(Tensor::new(&[2, 1], vec![5.0, 7.0]).unwrap(), true);
        let cb = g.broadcast(col, &[2, 3]).unwrap();
        assert_eq!(g.value(cb).data(), &[5.0, 5.0, 5.0, 7.0, 7.0, 7.0]);
        let p = g.mul(bb, cb).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[12.0, 12.0, 12.0]);
        assert_eq!(grads.get(col).unwrap().data(), &[6.0, 6.0]);
        assert!(g.broadcast(b, &[2, 4]).is_err());
    }

    #[test]
    fn concat_narrow_gather_roundtrip() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let b = g.leaf(Tensor::new(&[2, 1], vec![5.0, 6.0]).unwrap(), true);
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let n = g.narrow(c, 1, 1, 2).unwrap();
        assert_eq!(g.value(n).data(), &[2.0, 5.0, 4.0, 6.0]);
        let r = g.gather(n, &[1, 1, 0]).unwrap();
        assert_eq!(g.value(r).data(), &[4.0, 6.0, 4.0, 6.0, 2.0, 5.0]);
        let s = g.sum(r);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.0, 1.0, 0.0, 2.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn log_of_zero_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![1.0, 0.0]));
        assert!(matches!(g.log(x), Err(Error::NonFinite { .. })));
    }
}
