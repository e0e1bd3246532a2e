//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every value produced during one forward pass. Operations
//! are appended in execution order, so the node list is already a topological
//! order and `backward` is a single reverse sweep.

use super::tensor::{strides, Tensor};
use crate::error::{config_err, shape_err, validation_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Sigmoid,
    Gelu,
    Relu,
    Exp,
    Log,
    Abs,
    Sqrt,
    Square,
    Tanh,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary { a: usize, b: usize, kind: BinaryKind },
    Scale { a: usize, c: f64 },
    AddScalar { a: usize },
    Unary { a: usize, kind: UnaryKind },
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Bmm { a: usize, b: usize, tb: bool },
    Reshape { a: usize },
    Permute { a: usize, map: Vec<usize> },
    Narrow { a: usize, axis: usize, start: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    SumAxis { a: usize, axis: usize },
    MaxAxis { a: usize, arg: Vec<usize> },
    SumAll { a: usize },
    Softmax { a: usize },
    LogSoftmax { a: usize },
    LayerNorm { a: usize, rstd: Vec<f64> },
    Conv2d { x: usize, w: usize, b: usize },
    GatherRows { a: usize, idx: Vec<usize> },
    ScatterAddRows { a: usize, idx: Vec<usize> },
    TakeAlongLast { a: usize, idx: Vec<usize> },
    CosSqRows { a: usize, b: usize, eps: f64 },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<f64> },
    FocalBce { logits: usize, target: Vec<f64>, gamma: f64, beta: f64 },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// The recorded computation: values, per-node gradient flags, and backward rules.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn same_len_check(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

/// Broadcast output shape for two operands (numpy rules, right-aligned).
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(shape_err!("cannot broadcast shapes {:?} and {:?}", a, b));
        };
    }
    Ok(out)
}

/// For every linear index of `out`, the linear index into an operand of shape `inp`.
fn broadcast_map(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let in_strides = strides(inp);
    let mut eff = vec![0usize; rank];
    for i in 0..inp.len() {
        let o = i + rank - inp.len();
        eff[o] = if inp[i] == 1 { 0 } else { in_strides[i] };
    }
    let n: usize = out.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..rank).rev() {
            counter[d] += 1;
            off += eff[d];
            if counter[d] < out[d] {
                break;
            }
            off -= eff[d] * out[d];
            counter[d] = 0;
        }
    }
    map
}

/// `op(x) · op(y)` where `op` optionally transposes a row-major 2-D block.
#[allow(clippy::too_many_arguments)]
fn gemm(
    x: &[f64],
    tx: bool,
    y: &[f64],
    ty: bool,
    m: usize,
    p: usize,
    n: usize,
    out: &mut [f64],
) {
    // materialize op(x) as m×p and op(y) as p×n
    let xt;
    let xs: &[f64] = if tx {
        xt = transpose(x, p, m);
        &xt
    } else {
        x
    };
    let yt;
    let ys: &[f64] = if ty {
        yt = transpose(y, n, p);
        &yt
    } else {
        y
    };
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for k in 0..p {
            let a = xs[i * p + k];
            if a == 0.0 {
                continue;
            }
            let brow = &ys[k * n..(k + 1) * n];
            for (o, &b) in orow.iter_mut().zip(brow) {
                *o += a * b;
            }
        }
    }
}

/// Transpose a `rows × cols` row-major block.
fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
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

    /// Gradient of the last `backward` loss with respect to `v`; zeros when `v`
    /// is not on a path to the loss.
    pub fn grad(&self, v: Var) -> Tensor {
        let shape = self.nodes[v.0].value.shape().to_vec();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
            BinaryKind::Max => x.max(y),
            BinaryKind::Min => x.min(y),
        };
        let value = if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(av.shape().to_vec(), data)
        } else {
            let out = broadcast_shape(av.shape(), bv.shape())?;
            let ma = broadcast_map(&out, av.shape());
            let mb = broadcast_map(&out, bv.shape());
            let (ad, bd) = (av.data(), bv.data());
            let data = ma.iter().zip(&mb).map(|(&i, &j)| f(ad[i], bd[j])).collect();
            Tensor::from_parts(out, data)
        };
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, Op::Binary { a: a.0, b: b.0, kind }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Div)
    }
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Max)
    }
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Min)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value;
        let value = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|x| x * c).collect());
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Scale { a: a.0, c }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value;
        let value = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|x| x + c).collect());
        let rg = self.rg(&[a.0]);
        self.push(value, Op::AddScalar { a: a.0 }, rg)
    }

    fn unary(&mut self, a: Var, kind: UnaryKind) -> Var {
        let v = &self.nodes[a.0].value;
        let f = |x: f64| match kind {
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Gelu => gelu(x),
            UnaryKind::Relu => x.max(0.0),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Abs => x.abs(),
            UnaryKind::Sqrt => x.sqrt(),
            UnaryKind::Square => x * x,
            UnaryKind::Tanh => x.tanh(),
        };
        let value = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect());
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Unary { a: a.0, kind }, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Sigmoid)
    }
    /// Exact erf-based GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Gelu)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Relu)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Exp)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Log)
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Abs)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Sqrt)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Square)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Tanh)
    }

    // ---------------------------------------------------------------- linear algebra

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// 2-D matrix product `op(a) · op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (asv, bsv) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if asv.len() != 2 || bsv.len() != 2 {
            return Err(shape_err!("matmul needs 2-D operands, got {:?} and {:?}", asv, bsv));
        }
        let (m, p) = if ta { (asv[1], asv[0]) } else { (asv[0], asv[1]) };
        let (p2, n) = if tb { (bsv[1], bsv[0]) } else { (bsv[0], bsv[1]) };
        if p != p2 {
            return Err(shape_err!(
                "matmul inner dimensions differ: {:?}{} vs {:?}{}",
                asv,
                if ta { "ᵀ" } else { "" },
                bsv,
                if tb { "ᵀ" } else { "" }
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            self.nodes[a.0].value.data(),
            ta,
            self.nodes[b.0].value.data(),
            tb,
            m,
            p,
            n,
            &mut out,
        );
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a: a.0, b: b.0, ta, tb }, rg))
    }

    /// Batched product of `[B, m, p]` with `[B, p, n]` (or `[B, n, p]` when `tb`).
    pub fn bmm(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (asv, bsv) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if asv.len() != 3 || bsv.len() != 3 || asv[0] != bsv[0] {
            return Err(shape_err!("bmm needs matching 3-D operands, got {:?} and {:?}", asv, bsv));
        }
        let (bt, m, p) = (asv[0], asv[1], asv[2]);
        let (p2, n) = if tb { (bsv[2], bsv[1]) } else { (bsv[1], bsv[2]) };
        if p != p2 {
            return Err(shape_err!("bmm inner dimensions differ: {:?} vs {:?}", asv, bsv));
        }
        let mut out = vec![0.0; bt * m * n];
        let (ad, bd) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        for i in 0..bt {
            gemm(
                &ad[i * m * p..(i + 1) * m * p],
                false,
                &bd[i * p * n..(i + 1) * p * n],
                tb,
                m,
                p,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::from_parts(vec![bt, m, n], out), Op::Bmm { a: a.0, b: b.0, tb }, rg))
    }

    /// `x · Wᵀ + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let inner = *xs.last().ok_or_else(|| shape_err!("linear on rank-0 tensor"))?;
        let rows = xs.iter().product::<usize>() / inner;
        let out_dim = self.shape(w)[0];
        let x2 = self.reshape(x, &[rows, inner])?;
        let mut y = self.matmul_t(x2, w, false, true)?;
        if let Some(b) = b {
            y = self.add(y, b)?;
        }
        let mut out_shape = xs;
        *out_shape.last_mut().unwrap() = out_dim;
        self.reshape(y, &out_shape)
    }

    // ---------------------------------------------------------------- shape ops

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != v.numel() {
            return Err(shape_err!("cannot reshape {:?} into {:?}", v.shape(), shape));
        }
        let value = Tensor::from_parts(shape.to_vec(), v.data().to_vec());
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, Op::Reshape { a: a.0 }, rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err!("invalid permutation {:?} for shape {:?}", perm, shape));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides(&shape);
        let perm_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n: usize = shape.iter().product();
        let mut map = Vec::with_capacity(n);
        let mut counter = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..n {
            map.push(off);
            for d in (0..rank).rev() {
                counter[d] += 1;
                off += perm_strides[d];
                if counter[d] < out_shape[d] {
                    break;
                }
                off -= perm_strides[d] * out_shape[d];
                counter[d] = 0;
            }
        }
        let src = self.nodes[a.0].value.data();
        let data = map.iter().map(|&i| src[i]).collect();
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Permute { a: a.0, map }, rg))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err!("narrow({axis}, {start}, {len}) out of range for {:?}", shape));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.nodes[a.0].value.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Narrow { a: a.0, axis, start }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| shape_err!("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err!("concat axis {axis} out of range for {:?}", first));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(shape_err!("concat shapes {:?} and {:?} differ off axis {axis}", first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = &self.nodes[v.0].value;
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Concat { inputs: ids, axis }, rg))
    }

    // ---------------------------------------------------------------- reductions

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err!("sum axis {axis} out of range for {:?}", shape));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.nodes[a.0].value.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &src[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::SumAxis { a: a.0, axis }, rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| shape_err!("mean axis {axis} out of range"))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Max along `axis`, keeping it with size 1. Ties pick the first index.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err!("max axis {axis} out of range for {:?}", shape));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.nodes[a.0].value.data();
        let mut data = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    let idx = (o * n + k) * inner + i;
                    let oi = o * inner + i;
                    if src[idx] > data[oi] || k == 0 {
                        data[oi] = src[idx];
                        arg[oi] = idx;
                    }
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::MaxAxis { a: a.0, arg }, rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let rg = self.rg(&[a.0]);
        self.push(Tensor::scalar(s), Op::SumAll { a: a.0 }, rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    // ---------------------------------------------------------------- normalizers

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if v.data().iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let k = *v.shape().last().unwrap();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(k) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let value = Tensor::from_parts(v.shape().to_vec(), data);
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, Op::Softmax { a: a.0 }, rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if v.data().iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("log_softmax input contains NaN".into()));
        }
        let k = *v.shape().last().unwrap();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(k) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let value = Tensor::from_parts(v.shape().to_vec(), data);
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, Op::LogSoftmax { a: a.0 }, rg))
    }

    /// Normalize the last axis to zero mean, unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let v = &self.nodes[a.0].value;
        let d = *v.shape().last().unwrap();
        let mut data = v.data().to_vec();
        let mut rstd = Vec::with_capacity(data.len() / d);
        for row in data.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * r;
            }
            rstd.push(r);
        }
        let value = Tensor::from_parts(v.shape().to_vec(), data);
        let rg = self.rg(&[a.0]);
        self.push(value, Op::LayerNorm { a: a.0, rstd }, rg)
    }

    // ---------------------------------------------------------------- convolution

    /// Stride-1 same-padded cross-correlation.
    /// `x: [B, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_err!("conv2d needs 4-D input and kernel, got {:?} and {:?}", xs, ws));
        }
        if ws[2] % 2 == 0 || ws[3] % 2 == 0 {
            return Err(config_err!("conv2d kernel must be odd-sized, got {}x{}", ws[2], ws[3]));
        }
        if ws[1] != xs[1] || bs != [ws[0]] {
            return Err(shape_err!(
                "conv2d channel mismatch: input {:?}, kernel {:?}, bias {:?}",
                xs,
                ws,
                bs
            ));
        }
        let out = conv_forward(
            self.nodes[x.0].value.data(),
            &xs,
            self.nodes[w.0].value.data(),
            &ws,
            self.nodes[b.0].value.data(),
        );
        let rg = self.rg(&[x.0, w.0, b.0]);
        let shape = vec![xs[0], ws[0], xs[2], xs[3]];
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv2d { x: x.0, w: w.0, b: b.0 }, rg))
    }

    // ---------------------------------------------------------------- indexing

    /// Rows of a 2-D tensor, in the order given.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || idx.iter().any(|&i| i >= s[0]) || idx.is_empty() {
            return Err(shape_err!("gather_rows: bad indices for shape {:?}", s));
        }
        let d = s[1];
        let src = self.nodes[a.0].value.data();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), d], data),
            Op::GatherRows { a: a.0, idx: idx.to_vec() },
            rg,
        ))
    }

    /// Scatter-add row `r` of `a` into row `idx[r]` of an `[n, D]` zero tensor.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], n: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || idx.len() != s[0] || idx.iter().any(|&i| i >= n) {
            return Err(shape_err!("scatter_add_rows: bad indices for shape {:?} into {n} rows", s));
        }
        let d = s[1];
        let src = self.nodes[a.0].value.data();
        let mut data = vec![0.0; n * d];
        for (r, &i) in idx.iter().enumerate() {
            for (o, &v) in data[i * d..(i + 1) * d].iter_mut().zip(&src[r * d..(r + 1) * d]) {
                *o += v;
            }
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(
            Tensor::from_parts(vec![n, d], data),
            Op::ScatterAddRows { a: a.0, idx: idx.to_vec() },
            rg,
        ))
    }

    /// For `a: [N, K]` and `k` column indices per row (`idx.len() == N·k`), the `[N, k]` picks.
    pub fn take_along_last(&mut self, a: Var, idx: &[usize], k: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || idx.len() != s[0] * k || idx.iter().any(|&i| i >= s[1]) {
            return Err(shape_err!("take_along_last: bad indices for shape {:?}", s));
        }
        let src = self.nodes[a.0].value.data();
        let flat: Vec<usize> = idx
            .iter()
            .enumerate()
            .map(|(j, &c)| (j / k) * s[1] + c)
            .collect();
        let data = flat.iter().map(|&f| src[f]).collect();
        let rg = self.rg(&[a.0]);
        Ok(self.push(
            Tensor::from_parts(vec![s[0], k], data),
            Op::TakeAlongLast { a: a.0, idx: flat },
            rg,
        ))
    }

    // ---------------------------------------------------------------- fused losses

    /// Row-wise squared cosine similarity of two `[N, D]` tensors:
    /// `⟨a,b⟩² / max(‖a‖‖b‖, eps)²`, shape `[N]`.
    pub fn cos_sq_rows(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_len_check(av, bv, "cos_sq_rows")?;
        if av.rank() != 2 {
            return Err(shape_err!("cos_sq_rows needs 2-D operands, got {:?}", av.shape()));
        }
        let d = av.shape()[1];
        let data = av
            .data()
            .chunks(d)
            .zip(bv.data().chunks(d))
            .map(|(x, y)| {
                let (s, qa, qb) = dot3(x, y);
                s * s / (qa * qb).max(eps * eps)
            })
            .collect();
        let n = av.shape()[0];
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::from_parts(vec![n], data), Op::CosSqRows { a: a.0, b: b.0, eps }, rg))
    }

    /// Mean cross-entropy of `[B, T]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let v = &self.nodes[logits.0].value;
        if v.rank() != 2 || v.shape()[0] != targets.len() {
            return Err(shape_err!("cross_entropy: logits {:?} vs {} targets", v.shape(), targets.len()));
        }
        let t = v.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&c| c >= t) {
            return Err(validation_err!("class index {bad} out of range for {t} classes"));
        }
        let mut probs = Vec::with_capacity(v.numel());
        let mut loss = 0.0;
        for (row, &c) in v.data().chunks(t).zip(targets) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|x| (x - m).exp()).sum();
            loss += -(row[c] - m - s.ln());
            probs.extend(row.iter().map(|x| (x - m).exp() / s));
        }
        loss /= targets.len() as f64;
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), probs },
            rg,
        ))
    }

    /// Mean focal binary cross-entropy against a heatmap, `p = σ(z)`. Cells with
    /// `y = 1` are positives, `-(1-p)^γ ln p`; every other cell is a negative
    /// down-weighted near the peak, `-(1-y)^β p^γ ln(1-p)`.
    pub fn focal_bce(&mut self, logits: Var, target: &Tensor, gamma: f64, beta: f64) -> Result<Var> {
        let v = &self.nodes[logits.0].value;
        if v.numel() != target.numel() {
            return Err(shape_err!("focal_bce: logits {:?} vs target {:?}", v.shape(), target.shape()));
        }
        let loss = v
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &y)| focal_term(z, y, gamma, beta))
            .sum::<f64>()
            / v.numel() as f64;
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::FocalBce { logits: logits.0, target: target.data().to_vec(), gamma, beta },
            rg,
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`. Gradients from any previous sweep are cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            ));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(dout) = self.grads[id].take() else { continue };
            self.backprop_node(id, &dout);
            self.grads[id] = Some(dout);
        }
        Ok(())
    }

    fn acc(&mut self, id: usize) -> Option<&mut Vec<f64>> {
        if !self.nodes[id].requires_grad {
            return None;
        }
        let n = self.nodes[id].value.numel();
        Some(self.grads[id].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&mut self, id: usize, dout: &[f64]) {
        // Temporarily take the op out so input values can be read while
        // gradients are written.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Binary { a, b, kind } => self.bw_binary(id, *a, *b, *kind, dout),
            Op::Scale { a, c } => {
                if let Some(g) = self.acc(*a) {
                    for (g, d) in g.iter_mut().zip(dout) {
                        *g += c * d;
                    }
                }
            }
            Op::AddScalar { a } => {
                if let Some(g) = self.acc(*a) {
                    for (g, d) in g.iter_mut().zip(dout) {
                        *g += d;
                    }
                }
            }
            Op::Unary { a, kind } => {
                let x = self.nodes[*a].value.data().to_vec();
                let y = self.nodes[id].value.data().to_vec();
                if let Some(g) = self.acc(*a) {
                    for i in 0..g.len() {
                        let local = match kind {
                            UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                            UnaryKind::Gelu => gelu_grad(x[i]),
                            UnaryKind::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Exp => y[i],
                            UnaryKind::Log => 1.0 / x[i],
                            UnaryKind::Abs => {
                                if x[i] > 0.0 {
                                    1.0
                                } else if x[i] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Sqrt => 0.5 / y[i],
                            UnaryKind::Square => 2.0 * x[i],
                            UnaryKind::Tanh => 1.0 - y[i] * y[i],
                        };
                        g[i] += dout[i] * local;
                    }
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                let asv = self.nodes[*a].value.shape().to_vec();
                let bsv = self.nodes[*b].value.shape().to_vec();
                let (m, p) = if ta { (asv[1], asv[0]) } else { (asv[0], asv[1]) };
                let n = if tb { bsv[0] } else { bsv[1] };
                if self.nodes[*a].requires_grad {
                    let bd = self.nodes[*b].value.data().to_vec();
                    let g = self.acc(*a).unwrap();
                    if ta {
                        // dAᵀ-stored = op(B) · dCᵀ  (p×n · n×m)
                        gemm(&bd, tb, dout, true, p, n, m, g);
                    } else {
                        gemm(dout, false, &bd, !tb, m, n, p, g);
                    }
                }
                if self.nodes[*b].requires_grad {
                    let ad = self.nodes[*a].value.data().to_vec();
                    let g = self.acc(*b).unwrap();
                    if tb {
                        // dBᵀ-stored = dCᵀ · op(A)  (n×m · m×p)
                        gemm(dout, true, &ad, ta, n, m, p, g);
                    } else {
                        gemm(&ad, !ta, dout, false, p, m, n, g);
                    }
                }
            }
            Op::Bmm { a, b, tb } => {
                let tb = *tb;
                let asv = self.nodes[*a].value.shape().to_vec();
                let bsv = self.nodes[*b].value.shape().to_vec();
                let (bt, m, p) = (asv[0], asv[1], asv[2]);
                let n = if tb { bsv[1] } else { bsv[2] };
                if self.nodes[*a].requires_grad {
                    let bd = self.nodes[*b].value.data().to_vec();
                    let g = self.acc(*a).unwrap();
                    for i in 0..bt {
                        gemm(
                            &dout[i * m * n..(i + 1) * m * n],
                            false,
                            &bd[i * p * n..(i + 1) * p * n],
                            !tb,
                            m,
                            n,
                            p,
                            &mut g[i * m * p..(i + 1) * m * p],
                        );
                    }
                }
                if self.nodes[*b].requires_grad {
                    let ad = self.nodes[*a].value.data().to_vec();
                    let g = self.acc(*b).unwrap();
                    for i in 0..bt {
                        let (aslice, dslice) =
                            (&ad[i * m * p..(i + 1) * m * p], &dout[i * m * n..(i + 1) * m * n]);
                        let gslice = &mut g[i * p * n..(i + 1) * p * n];
                        if tb {
                            gemm(dslice, true, aslice, false, n, m, p, gslice);
                        } else {
                            gemm(aslice, true, dslice, false, p, m, n, gslice);
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(g) = self.acc(*a) {
                    for (g, d) in g.iter_mut().zip(dout) {
                        *g += d;
                    }
                }
            }
            Op::Permute { a, map } => {
                if let Some(g) = self.acc(*a) {
                    for (o, &i) in map.iter().enumerate() {
                        g[i] += dout[o];
                    }
                }
            }
            Op::Narrow { a, axis, start } => {
                let shape = self.nodes[*a].value.shape().to_vec();
                let len = self.nodes[id].value.shape()[*axis];
                let (outer, n, inner) = axis_split(&shape, *axis);
                if let Some(g) = self.acc(*a) {
                    for o in 0..outer {
                        let base = o * n * inner + start * inner;
                        for (g, d) in g[base..base + len * inner]
                            .iter_mut()
                            .zip(&dout[o * len * inner..(o + 1) * len * inner])
                        {
                            *g += d;
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.nodes[id].value.shape().to_vec();
                let (outer, total, inner) = axis_split(&out_shape, *axis);
                let mut offset = 0;
                for &inp in inputs {
                    let len = self.nodes[inp].value.shape()[*axis];
                    if let Some(g) = self.acc(inp) {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            for (g, d) in g[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(&dout[src..src + len * inner])
                            {
                                *g += d;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::SumAxis { a, axis } => {
                let shape = self.nodes[*a].value.shape().to_vec();
                let (outer, n, inner) = axis_split(&shape, *axis);
                if let Some(g) = self.acc(*a) {
                    for o in 0..outer {
                        for k in 0..n {
                            for i in 0..inner {
                                g[(o * n + k) * inner + i] += dout[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::MaxAxis { a, arg } => {
                if let Some(g) = self.acc(*a) {
                    for (o, &i) in arg.iter().enumerate() {
                        g[i] += dout[o];
                    }
                }
            }
            Op::SumAll { a } => {
                if let Some(g) = self.acc(*a) {
                    for g in g.iter_mut() {
                        *g += dout[0];
                    }
                }
            }
            Op::Softmax { a } => {
                let y = self.nodes[id].value.data().to_vec();
                let k = *self.nodes[id].value.shape().last().unwrap();
                if let Some(g) = self.acc(*a) {
                    for ((gr, yr), dr) in g.chunks_mut(k).zip(y.chunks(k)).zip(dout.chunks(k)) {
                        let dot: f64 = yr.iter().zip(dr).map(|(y, d)| y * d).sum();
                        for i in 0..k {
                            gr[i] += yr[i] * (dr[i] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { a } => {
                let y = self.nodes[id].value.data().to_vec();
                let k = *self.nodes[id].value.shape().last().unwrap();
                if let Some(g) = self.acc(*a) {
                    for ((gr, yr), dr) in g.chunks_mut(k).zip(y.chunks(k)).zip(dout.chunks(k)) {
                        let s: f64 = dr.iter().sum();
                        for i in 0..k {
                            gr[i] += dr[i] - yr[i].exp() * s;
                        }
                    }
                }
            }
            Op::LayerNorm { a, rstd } => {
                let xhat = self.nodes[id].value.data().to_vec();
                let d = *self.nodes[id].value.shape().last().unwrap();
                if let Some(g) = self.acc(*a) {
                    for (r, ((gr, xr), dr)) in
                        g.chunks_mut(d).zip(xhat.chunks(d)).zip(dout.chunks(d)).enumerate()
                    {
                        let mean_d: f64 = dr.iter().sum::<f64>() / d as f64;
                        let mean_dx: f64 = dr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for i in 0..d {
                            gr[i] += rstd[r] * (dr[i] - mean_d - xr[i] * mean_dx);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b } => self.bw_conv(*x, *w, *b, dout),
            Op::GatherRows { a, idx } => {
                let d = self.nodes[*a].value.shape()[1];
                if let Some(g) = self.acc(*a) {
                    for (r, &i) in idx.iter().enumerate() {
                        for (g, dv) in g[i * d..(i + 1) * d].iter_mut().zip(&dout[r * d..(r + 1) * d]) {
                            *g += dv;
                        }
                    }
                }
            }
            Op::ScatterAddRows { a, idx } => {
                let d = self.nodes[*a].value.shape()[1];
                if let Some(g) = self.acc(*a) {
                    for (r, &i) in idx.iter().enumerate() {
                        for (g, dv) in g[r * d..(r + 1) * d].iter_mut().zip(&dout[i * d..(i + 1) * d]) {
                            *g += dv;
                        }
                    }
                }
            }
            Op::TakeAlongLast { a, idx } => {
                if let Some(g) = self.acc(*a) {
                    for (o, &f) in idx.iter().enumerate() {
                        g[f] += dout[o];
                    }
                }
            }
            Op::CosSqRows { a, b, eps } => {
                let av = self.nodes[*a].value.data().to_vec();
                let bv = self.nodes[*b].value.data().to_vec();
                let d = self.nodes[*a].value.shape()[1];
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for (r, (x, y)) in av.chunks(d).zip(bv.chunks(d)).enumerate() {
                    let (s, qa, qb) = dot3(x, y);
                    let den = qa * qb;
                    let guarded = den <= eps * eps;
                    for i in 0..d {
                        let (da, db) = if guarded {
                            let e2 = eps * eps;
                            (2.0 * s * y[i] / e2, 2.0 * s * x[i] / e2)
                        } else {
                            (
                                2.0 * s * y[i] / den - 2.0 * s * s * x[i] / (qa * den),
                                2.0 * s * x[i] / den - 2.0 * s * s * y[i] / (qb * den),
                            )
                        };
                        ga[r * d + i] = dout[r] * da;
                        gb[r * d + i] = dout[r] * db;
                    }
                }
                if let Some(g) = self.acc(*a) {
                    g.iter_mut().zip(&ga).for_each(|(g, v)| *g += v);
                }
                if let Some(g) = self.acc(*b) {
                    g.iter_mut().zip(&gb).for_each(|(g, v)| *g += v);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let t = self.nodes[*logits].value.shape()[1];
                let scale = dout[0] / targets.len() as f64;
                if let Some(g) = self.acc(*logits) {
                    for (r, &c) in targets.iter().enumerate() {
                        for j in 0..t {
                            let onehot = if j == c { 1.0 } else { 0.0 };
                            g[r * t + j] += scale * (probs[r * t + j] - onehot);
                        }
                    }
                }
            }
            Op::FocalBce { logits, target, gamma, beta } => {
                let z = self.nodes[*logits].value.data().to_vec();
                let scale = dout[0] / z.len() as f64;
                if let Some(g) = self.acc(*logits) {
                    for i in 0..z.len() {
                        g[i] += scale * focal_grad(z[i], target[i], *gamma, *beta);
                    }
                }
            }
        }
        self.nodes[id].op = op;
    }

    fn bw_binary(&mut self, id: usize, a: usize, b: usize, kind: BinaryKind, dout: &[f64]) {
        let av = self.nodes[a].value.data().to_vec();
        let bv = self.nodes[b].value.data().to_vec();
        let out_shape = self.nodes[id].value.shape().to_vec();
        let ma = (self.nodes[a].value.shape() != out_shape.as_slice())
            .then(|| broadcast_map(&out_shape, self.nodes[a].value.shape()));
        let mb = (self.nodes[b].value.shape() != out_shape.as_slice())
            .then(|| broadcast_map(&out_shape, self.nodes[b].value.shape()));
        let ia = |o: usize| ma.as_ref().map_or(o, |m| m[o]);
        let ib = |o: usize| mb.as_ref().map_or(o, |m| m[o]);
        let partial = |x: f64, y: f64| -> (f64, f64) {
            match kind {
                BinaryKind::Add => (1.0, 1.0),
                BinaryKind::Sub => (1.0, -1.0),
                BinaryKind::Mul => (y, x),
                BinaryKind::Div => (1.0 / y, -x / (y * y)),
                BinaryKind::Max => {
                    if x >= y {
                        (1.0, 0.0)
                    } else {
                        (0.0, 1.0)
                    }
                }
                BinaryKind::Min => {
                    if x <= y {
                        (1.0, 0.0)
                    } else {
                        (0.0, 1.0)
                    }
                }
            }
        };
        if let Some(g) = self.acc(a) {
            for (o, d) in dout.iter().enumerate() {
                let (i, j) = (ia(o), ib(o));
                g[i] += d * partial(av[i], bv[j]).0;
            }
        }
        if let Some(g) = self.acc(b) {
            for (o, d) in dout.iter().enumerate() {
                let (i, j) = (ia(o), ib(o));
                g[j] += d * partial(av[i], bv[j]).1;
            }
        }
    }

    fn bw_conv(&mut self, x: usize, w: usize, b: usize, dout: &[f64]) {
        let xs = self.nodes[x].value.shape().to_vec();
        let ws = self.nodes[w].value.shape().to_vec();
        let (bn, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        let (ph, pw) = (kh / 2, kw / 2);
        let hw = h * wd;
        if self.nodes[b].requires_grad {
            let g = self.acc(b).unwrap();
            for n in 0..bn {
                for o in 0..co {
                    g[o] += dout[(n * co + o) * hw..(n * co + o + 1) * hw].iter().sum::<f64>();
                }
            }
        }
        let xd = self.nodes[x].value.data().to_vec();
        let wdat = self.nodes[w].value.data().to_vec();
        let need_x = self.nodes[x].requires_grad;
        let need_w = self.nodes[w].requires_grad;
        let mut gx = if need_x { vec![0.0; xd.len()] } else { Vec::new() };
        let mut gw = if need_w { vec![0.0; wdat.len()] } else { Vec::new() };
        for n in 0..bn {
            for o in 0..co {
                let dplane = &dout[(n * co + o) * hw..(n * co + o + 1) * hw];
                for c in 0..ci {
                    let xoff = (n * ci + c) * hw;
                    for ky in 0..kh {
                        let (y0, y1) = valid_range(ky, ph, h);
                        for kx in 0..kw {
                            let (x0, x1) = valid_range(kx, pw, wd);
                            if x0 >= x1 {
                                continue;
                            }
                            let widx = ((o * ci + c) * kh + ky) * kw + kx;
                            let wv = wdat[widx];
                            let mut acc = 0.0;
                            for yy in y0..y1 {
                                let iy = yy + ky - ph;
                                let drow = &dplane[yy * wd + x0..yy * wd + x1];
                                let base = xoff + iy * wd + x0 + kx - pw;
                                if need_w {
                                    acc += drow.iter().zip(&xd[base..base + (x1 - x0)]).map(|(a, b)| a * b).sum::<f64>();
                                }
                                if need_x {
                                    for (g, d) in gx[base..base + (x1 - x0)].iter_mut().zip(drow) {
                                        *g += wv * d;
                                    }
                                }
                            }
                            if need_w {
                                gw[widx] += acc;
                            }
                        }
                    }
                }
            }
        }
        if need_x {
            let g = self.acc(x).unwrap();
            g.iter_mut().zip(&gx).for_each(|(g, v)| *g += v);
        }
        if need_w {
            let g = self.acc(w).unwrap();
            g.iter_mut().zip(&gw).for_each(|(g, v)| *g += v);
        }
    }
}

fn dot3(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let mut s = 0.0;
    let mut qa = 0.0;
    let mut qb = 0.0;
    for (a, b) in x.iter().zip(y) {
        s += a * b;
        qa += a * a;
        qb += b * b;
    }
    (s, qa, qb)
}

/// Output rows `yy` for which `yy + k - pad` is a valid input row.
fn valid_range(k: usize, pad: usize, len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (len + pad).saturating_sub(k).min(len);
    (lo, hi.max(lo))
}

fn conv_forward(x: &[f64], xs: &[usize], w: &[f64], ws: &[usize], b: &[f64]) -> Vec<f64> {
    let (bn, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (co, kh, kw) = (ws[0], ws[2], ws[3]);
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * wd;
    let mut out = vec![0.0; bn * co * hw];
    for n in 0..bn {
        for o in 0..co {
            let plane = &mut out[(n * co + o) * hw..(n * co + o + 1) * hw];
            plane.iter_mut().for_each(|v| *v = b[o]);
            for c in 0..ci {
                let xoff = (n * ci + c) * hw;
                for ky in 0..kh {
                    let (y0, y1) = valid_range(ky, ph, h);
                    for kx in 0..kw {
                        let (x0, x1) = valid_range(kx, pw, wd);
                        if x0 >= x1 {
                            continue;
                        }
                        let wv = w[((o * ci + c) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for yy in y0..y1 {
                            let iy = yy + ky - ph;
                            let base = xoff + iy * wd + x0 + kx - pw;
                            for (p, &xv) in plane[yy * wd + x0..yy * wd + x1].iter_mut().zip(&x[base..base + (x1 - x0)]) {
                                *p += wv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn focal_term(z: f64, y: f64, gamma: f64, beta: f64) -> f64 {
    let p = sigmoid(z);
    if y >= 1.0 {
        -(1.0 - p).powf(gamma) * -softplus(-z)
    } else {
        -(1.0 - y).powf(beta) * p.powf(gamma) * -softplus(z)
    }
}

fn focal_grad(z: f64, y: f64, gamma: f64, beta: f64) -> f64 {
    let p = sigmoid(z);
    let q = 1.0 - p;
    if y >= 1.0 {
        -q.powf(gamma) * (q - gamma * p * -softplus(-z))
    } else {
        -(1.0 - y).powf(beta) * p.powf(gamma) * (gamma * q * -softplus(z) - p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2, 1], &[5.0, 6.0]));
        let c = g.matmul(i2, b).unwrap();
        assert_eq!(g.value(c).data(), &[5.0, 6.0]);

        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[17.0, 39.0]);

        let z = g.constant(Tensor::zeros(&[3, 2]));
        let c = g.matmul(z, b).unwrap();
        assert!(g.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn conv_identity_and_zero() {
        let mut rng = rand::thread_rng();
        let x = Tensor::randn(&[2, 1, 5, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let w = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv2d(xv, w, b).unwrap();
        assert_eq!(g.value(y), &x);

        let w0 = g.constant(Tensor::zeros(&[3, 1, 3, 3]));
        let b0 = g.constant(Tensor::zeros(&[3]));
        let y0 = g.conv2d(xv, w0, b0).unwrap();
        assert!(g.value(y0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let b = g.constant(Tensor::zeros(&[1]));
        assert!(matches!(g.conv2d(x, w, b), Err(Error::Config(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 4], &[3.3; 4]));
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let x = g.constant(t(&[2], &[0.0, 2f64.ln()]));
        let y = g.softmax(x).unwrap();
        assert!((g.value(y).data()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((g.value(y).data()[1] - 2.0 / 3.0).abs() < 1e-12);

        let nan = g.constant(t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(g.softmax(nan), Err(Error::Numeric(_))));
    }

    #[test]
    fn backward_square() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).item(), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn cross_entropy_grad_is_p_minus_onehot() {
        let mut g = Graph::new();
        let z = g.param(t(&[1, 3], &[0.2, -1.0, 0.7]));
        let l = g.cross_entropy(z, &[2]).unwrap();
        g.backward(l).unwrap();
        let p = {
            let e: Vec<f64> = [0.2f64, -1.0, 0.7].iter().map(|v| v.exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect::<Vec<_>>()
        };
        let grad = g.grad(z);
        for j in 0..3 {
            let onehot = if j == 2 { 1.0 } else { 0.0 };
            assert!((grad.data()[j] - (p[j] - onehot)).abs() < 1e-12);
        }
    }

    #[test]
    fn unrelated_nodes_get_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let unused = g.param(Tensor::full(&[3], 1.0));
        let y = g.square(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(unused), Tensor::zeros(&[3]));
    }

    #[test]
    fn broadcast_add_channel_and_spatial() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn(&[1, 2, 1, 1], |i| i as f64));
        let b = g.constant(Tensor::from_fn(&[1, 1, 2, 2], |i| 10.0 * i as f64));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.shape(c), &[1, 2, 2, 2]);
        assert_eq!(g.value(c).data(), &[0.0, 10.0, 20.0, 30.0, 1.0, 11.0, 21.0, 31.0]);
    }
}
