//! Reverse-mode automatic differentiation over small dense matrices.
//!
//! A [`Graph`] records every operation eagerly. Calling [`Graph::backward`]
//! on a scalar node walks the record in reverse and accumulates gradients
//! for every node that depends on a parameter leaf.
//!
//! Forward-mode time derivatives are not a separate mechanism: they are
//! built from ordinary recorded ops (see [`crate::dual`]), so reverse mode
//! differentiates through them and yields mixed second derivatives.

use std::rc::Rc;

use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Softplus,
    Sigmoid,
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
    Square,
    Abs,
    Relu,
    Recip,
    Neg,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Unary(Var, Unary),
    /// `sigmoid(z) * dz`, the tangent of `softplus(z)`.
    SoftplusJvp(Var, Var),
    ClampMin(Var, f64),
    SumCols(Var),
    SumRows(Var),
    SumAll(Var),
    CumsumExclusive(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    GatherRows(Var, Rc<[usize]>),
    Reshape(Var),
    RangeSum(Var, Rc<[(usize, usize)]>),
    Distortion(Var, Rc<Tensor>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation.
pub struct Graph {
    nodes: Vec<Node>,
    corrupt_softplus: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("shapes {a:?} and {b:?} do not broadcast")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

#[inline]
fn bidx(t: &Tensor, r: usize, c: usize) -> usize {
    let rr = if t.rows == 1 { 0 } else { r };
    let cc = if t.cols == 1 { 0 } else { c };
    rr * t.cols + cc
}

fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_vec(a.rows, a.cols, data);
    }
    let (rows, cols) = broadcast_shape(a.shape(), b.shape());
    let mut out = Tensor::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            out.data[r * cols + c] = f(a.data[bidx(a, r, c)], b.data[bidx(b, r, c)]);
        }
    }
    out
}

/// Sum a gradient of broadcast shape back down to `shape`.
fn reduce_to(grad: Tensor, shape: (usize, usize)) -> Tensor {
    if grad.shape() == shape {
        return grad;
    }
    let mut out = Tensor::zeros(shape.0, shape.1);
    for r in 0..grad.rows {
        for c in 0..grad.cols {
            let i = bidx(&out, r, c);
            out.data[i] += grad.data[r * grad.cols + c];
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), corrupt_softplus: false }
    }

    /// Deliberately scales the softplus backward rule. Only used to show that
    /// the gradient checker catches a broken derivative.
    #[doc(hidden)]
    pub fn corrupt_softplus_backward(&mut self, on: bool) {
        self.corrupt_softplus = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(va.rows, vb.cols);
        gemm(va, false, vb, false, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `x W + b` with `b` a row vector.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(vb.rows, 1);
        assert_eq!(vb.cols, vw.cols);
        let mut out = Tensor::zeros(vx.rows, vw.cols);
        for r in 0..out.rows {
            out.data[r * out.cols..(r + 1) * out.cols].copy_from_slice(&vb.data);
        }
        gemm(vx, false, vw, false, &mut out, 1.0);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(out, Op::Linear(x, w, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = binary(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = binary(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = binary(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let out = binary(self.value(a), self.value(b), |x, y| x / y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Div(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, k), ng)
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x + k);
        let ng = self.ng(a);
        self.push(out, Op::Offset(a), ng)
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Softplus => softplus,
            Unary::Sigmoid => sigmoid,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Sin => f64::sin,
            Unary::Cos => f64::cos,
            Unary::Sqrt => f64::sqrt,
            Unary::Square => |x| x * x,
            Unary::Abs => f64::abs,
            Unary::Relu => |x| x.max(0.0),
            Unary::Recip => |x| 1.0 / x,
            Unary::Neg => |x| -x,
        };
        let out = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(out, Op::Unary(a, kind), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }
    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sin)
    }
    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Cos)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }
    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Recip)
    }
    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Neg)
    }

    pub fn softplus_jvp(&mut self, z: Var, dz: Var) -> Var {
        let (vz, vdz) = (self.value(z), self.value(dz));
        assert_eq!(vz.shape(), vdz.shape());
        let data = vz.data.iter().zip(&vdz.data).map(|(&a, &b)| sigmoid(a) * b).collect();
        let out = Tensor::from_vec(vz.rows, vz.cols, data);
        let ng = self.ng(z) || self.ng(dz);
        self.push(out, Op::SoftplusJvp(z, dz), ng)
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let out = self.value(a).map(|x| x.max(lo));
        let ng = self.ng(a);
        self.push(out, Op::ClampMin(a, lo), ng)
    }

    /// Sum across columns: `[r, c] -> [r, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = (0..va.rows).map(|r| va.row_slice(r).iter().sum()).collect();
        let out = Tensor::from_vec(va.rows, 1, data);
        let ng = self.ng(a);
        self.push(out, Op::SumCols(a), ng)
    }

    /// Sum across rows: `[r, c] -> [1, c]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = Tensor::zeros(1, va.cols);
        for r in 0..va.rows {
            for c in 0..va.cols {
                out.data[c] += va.data[r * va.cols + c];
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SumRows(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Exclusive prefix sum along each row.
    pub fn cumsum_exclusive(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = Tensor::zeros(va.rows, va.cols);
        for r in 0..va.rows {
            let mut acc = 0.0;
            for c in 0..va.cols {
                out.data[r * va.cols + c] = acc;
                acc += va.data[r * va.cols + c];
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::CumsumExclusive(a), ng)
    }

    /// Concatenate along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows, rows, "concat row mismatch");
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + vp.cols].copy_from_slice(vp.row_slice(r));
            }
            off += vp.cols;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::Concat(parts.to_vec()), ng)
    }

    /// Columns `start..end`.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Var {
        let va = self.value(a);
        assert!(start < end && end <= va.cols);
        let w = end - start;
        let mut out = Tensor::zeros(va.rows, w);
        for r in 0..va.rows {
            out.data[r * w..(r + 1) * w].copy_from_slice(&va.row_slice(r)[start..end]);
        }
        let ng = self.ng(a);
        self.push(out, Op::Slice(a, start), ng)
    }

    /// Output row `k` is input row `index[k]`.
    pub fn gather_rows(&mut self, a: Var, index: Rc<[usize]>) -> Var {
        let va = self.value(a);
        let mut out = Tensor::zeros(index.len(), va.cols);
        for (k, &i) in index.iter().enumerate() {
            out.data[k * va.cols..(k + 1) * va.cols].copy_from_slice(va.row_slice(i));
        }
        let ng = self.ng(a);
        self.push(out, Op::GatherRows(a, index), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), rows * cols, "reshape size mismatch");
        let out = Tensor::from_vec(rows, cols, va.data.clone());
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    /// For a `[rows, n]` input and per-output half-open column ranges laid out
    /// row-major over `[rows, ranges.len() / rows]`, sums the covered entries.
    pub fn range_sum(&mut self, a: Var, ranges: Rc<[(usize, usize)]>) -> Var {
        let va = self.value(a);
        assert_eq!(ranges.len() % va.rows.max(1), 0);
        let out_cols = if va.rows == 0 { 0 } else { ranges.len() / va.rows };
        let mut out = Tensor::zeros(va.rows, out_cols);
        for r in 0..va.rows {
            let row = va.row_slice(r);
            for i in 0..out_cols {
                let (lo, hi) = ranges[r * out_cols + i];
                out.data[r * out_cols + i] = row[lo..hi].iter().sum();
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::RangeSum(a, ranges), ng)
    }

    /// Per row: `sum_{i,j} w_i w_j |m_i - m_j|` for constant midpoints `m`.
    pub fn distortion(&mut self, w: Var, mids: Rc<Tensor>) -> Var {
        let vw = self.value(w);
        assert_eq!(vw.shape(), mids.shape());
        let n = vw.cols;
        let mut out = Tensor::zeros(vw.rows, 1);
        for r in 0..vw.rows {
            let wr = vw.row_slice(r);
            let mr = mids.row_slice(r);
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    acc += wr[i] * wr[j] * (mr[i] - mr[j]).abs();
                }
            }
            out.data[r] = acc;
        }
        let ng = self.ng(w);
        self.push(out, Op::Distortion(w, mids), ng)
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut ga = Tensor::zeros(va.rows, va.cols);
                    gemm(g, false, vb, true, &mut ga, 0.0);
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let mut gb = Tensor::zeros(vb.rows, vb.cols);
                    gemm(va, true, g, false, &mut gb, 0.0);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Linear(x, w, b) => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                if self.ng(*x) {
                    let mut gx = Tensor::zeros(vx.rows, vx.cols);
                    gemm(g, false, vw, true, &mut gx, 0.0);
                    self.accumulate(grads, *x, gx);
                }
                if self.ng(*w) {
                    let mut gw = Tensor::zeros(vw.rows, vw.cols);
                    gemm(vx, true, g, false, &mut gw, 0.0);
                    self.accumulate(grads, *w, gw);
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, reduce_to(g.clone(), (1, g.cols)));
                }
            }
            Op::Add(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                if self.ng(*a) {
                    self.accumulate(grads, *a, reduce_to(g.clone(), sa));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, reduce_to(g.clone(), sb));
                }
            }
            Op::Sub(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                if self.ng(*a) {
                    self.accumulate(grads, *a, reduce_to(g.clone(), sa));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, reduce_to(g.map(|x| -x), sb));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let ga = binary(g, vb, |x, y| x * y);
                    self.accumulate(grads, *a, reduce_to(ga, va.shape()));
                }
                if self.ng(*b) {
                    let gb = binary(g, va, |x, y| x * y);
                    self.accumulate(grads, *b, reduce_to(gb, vb.shape()));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let ga = binary(g, vb, |x, y| x / y);
                    self.accumulate(grads, *a, reduce_to(ga, va.shape()));
                }
                if self.ng(*b) {
                    // d(a/b)/db = -out / b
                    let t = binary(out, vb, |o, y| -o / y);
                    let gb = binary(g, &t, |x, y| x * y);
                    self.accumulate(grads, *b, reduce_to(gb, vb.shape()));
                }
            }
            Op::Scale(a, k) => {
                let k = *k;
                self.accumulate(grads, *a, g.map(|x| x * k));
            }
            Op::Offset(a) => self.accumulate(grads, *a, g.clone()),
            Op::Unary(a, kind) => {
                let x = self.value(*a);
                let corrupt = if self.corrupt_softplus { 1.1 } else { 1.0 };
                let data = g
                    .data
                    .iter()
                    .zip(&x.data)
                    .zip(&out.data)
                    .map(|((&gi, &xi), &yi)| {
                        gi * match kind {
                            Unary::Softplus => sigmoid(xi) * corrupt,
                            Unary::Sigmoid => yi * (1.0 - yi),
                            Unary::Exp => yi,
                            Unary::Log => 1.0 / xi,
                            Unary::Sin => xi.cos(),
                            Unary::Cos => -xi.sin(),
                            Unary::Sqrt => 0.5 / yi,
                            Unary::Square => 2.0 * xi,
                            Unary::Abs => {
                                if xi > 0.0 {
                                    1.0
                                } else if xi < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Relu => {
                                if xi > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Recip => -yi * yi,
                            Unary::Neg => -1.0,
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_vec(g.rows, g.cols, data));
            }
            Op::SoftplusJvp(z, dz) => {
                let (vz, vdz) = (self.value(*z), self.value(*dz));
                if self.ng(*z) {
                    let data = g
                        .data
                        .iter()
                        .zip(&vz.data)
                        .zip(&vdz.data)
                        .map(|((&gi, &zi), &di)| {
                            let s = sigmoid(zi);
                            gi * di * s * (1.0 - s)
                        })
                        .collect();
                    self.accumulate(grads, *z, Tensor::from_vec(g.rows, g.cols, data));
                }
                if self.ng(*dz) {
                    let data =
                        g.data.iter().zip(&vz.data).map(|(&gi, &zi)| gi * sigmoid(zi)).collect();
                    self.accumulate(grads, *dz, Tensor::from_vec(g.rows, g.cols, data));
                }
            }
            Op::ClampMin(a, lo) => {
                let x = self.value(*a);
                let data = g
                    .data
                    .iter()
                    .zip(&x.data)
                    .map(|(&gi, &xi)| if xi > *lo { gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_vec(g.rows, g.cols, data));
            }
            Op::SumCols(a) => {
                let (r, c) = self.shape(*a);
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        ga.data[i * c + j] = g.data[i];
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SumRows(a) => {
                let (r, c) = self.shape(*a);
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    ga.data[i * c..(i + 1) * c].copy_from_slice(&g.data);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Tensor::filled(r, c, g.data[0]));
            }
            Op::CumsumExclusive(a) => {
                // out_j = sum_{k<j} a_k  =>  da_k = sum_{j>k} g_j
                let (r, c) = self.shape(*a);
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    let mut acc = 0.0;
                    for j in (0..c).rev() {
                        ga.data[i * c + j] = acc;
                        acc += g.data[i * c + j];
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.ng(p) {
                        let mut gp = Tensor::zeros(r, c);
                        for i in 0..r {
                            gp.data[i * c..(i + 1) * c]
                                .copy_from_slice(&g.data[i * g.cols + off..i * g.cols + off + c]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    off += c;
                }
            }
            Op::Slice(a, start) => {
                let (r, c) = self.shape(*a);
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    ga.data[i * c + start..i * c + start + g.cols].copy_from_slice(g.row_slice(i));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::GatherRows(a, index) => {
                let (r, c) = self.shape(*a);
                let mut ga = Tensor::zeros(r, c);
                for (k, &i) in index.iter().enumerate() {
                    for j in 0..c {
                        ga.data[i * c + j] += g.data[k * c + j];
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Tensor::from_vec(r, c, g.data.clone()));
            }
            Op::RangeSum(a, ranges) => {
                let (r, c) = self.shape(*a);
                let out_cols = g.cols;
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    for k in 0..out_cols {
                        let (lo, hi) = ranges[i * out_cols + k];
                        let gv = g.data[i * out_cols + k];
                        for j in lo..hi {
                            ga.data[i * c + j] += gv;
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Distortion(w, mids) => {
                let vw = self.value(*w);
                let (r, n) = vw.shape();
                let mut gw = Tensor::zeros(r, n);
                for i in 0..r {
                    let wr = vw.row_slice(i);
                    let mr = mids.row_slice(i);
                    for a in 0..n {
                        let mut acc = 0.0;
                        for b in 0..n {
                            acc += wr[b] * (mr[a] - mr[b]).abs();
                        }
                        gw.data[i * n + a] = 2.0 * acc * g.data[i];
                    }
                }
                self.accumulate(grads, *w, gw);
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled to `shape` if absent.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.0, shape.1))
    }
}
