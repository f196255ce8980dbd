//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! Operations are recorded on a [`Graph`] as they execute; every node's inputs
//! precede it, so the node order is already a topological order and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! Binary elementwise operations broadcast along axes of length one, which
//! covers the leading-batch-dimension case (`[B, n] op [1, n]`, `[B, n] op [B, 1]`)
//! and scalars. Tensors taking part in graph operations have rank 1 or 2.

use crate::error::{Error, Result};
use crate::tensor::{dims2, gemm, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Swish(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    RepeatRows(Var),
    SumRowBlocks(Var),
    LogSumExpRows(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Rebuilt for every forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the graph's differentiable leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[derive(Clone, Copy)]
struct Bcast {
    rows: usize,
    cols: usize,
    a: (usize, usize),
    b: (usize, usize),
}

impl Bcast {
    fn new(op: &'static str, sa: &[usize], sb: &[usize]) -> Result<(Self, Vec<usize>)> {
        let a = dims2(sa)?;
        let b = dims2(sb)?;
        let join = |x: usize, y: usize| -> Result<usize> {
            if x == y || y == 1 {
                Ok(x)
            } else if x == 1 {
                Ok(y)
            } else {
                Err(Error::shape(op, sa, sb))
            }
        };
        let rows = join(a.0, b.0)?;
        let cols = join(a.1, b.1)?;
        let shape = if sa.len() == 2 || sb.len() == 2 {
            vec![rows, cols]
        } else {
            vec![cols]
        };
        Ok((Self { rows, cols, a, b }, shape))
    }

    #[inline]
    fn ia(&self, i: usize, j: usize) -> usize {
        idx(self.a, i, j)
    }

    #[inline]
    fn ib(&self, i: usize, j: usize) -> usize {
        idx(self.b, i, j)
    }
}

#[inline]
fn idx((r, c): (usize, usize), i: usize, j: usize) -> usize {
    (if r == 1 { 0 } else { i }) * c + if c == 1 { 0 } else { j }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    // ---------------------------------------------------------------- binary

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (bc, shape) = Bcast::new(name, self.shape(a), self.shape(b))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(bc.rows * bc.cols);
        for i in 0..bc.rows {
            for j in 0..bc.cols {
                out.push(f(av[bc.ia(i, j)], bv[bc.ib(i, j)]));
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, op, rg))
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

    // ----------------------------------------------------------------- unary

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Swish(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Clamp to `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    // ---------------------------------------------------------------- linalg

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2(self.shape(a))?;
        let av = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg))
    }

    // ------------------------------------------------------------ reductions

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / t.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// `[m, n] -> [m, 1]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2(self.shape(a))?;
        let av = self.value(a).data();
        let out = (0..r).map(|i| av[i * c..(i + 1) * c].iter().sum()).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![r, 1], out)?, Op::SumRows(a), rg))
    }

    /// `[m, n] -> [1, n]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2(self.shape(a))?;
        let av = self.value(a).data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(&av[i * c..(i + 1) * c]) {
                *o += x;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![1, c], out)?, Op::SumCols(a), rg))
    }

    /// Row-wise `log(sum(exp(x)))`, `[m, n] -> [m, 1]`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2(self.shape(a))?;
        let av = self.value(a).data();
        let out = (0..r)
            .map(|i| {
                let row = &av[i * c..(i + 1) * c];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
            })
            .collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![r, 1], out)?, Op::LogSumExpRows(a), rg))
    }

    // -------------------------------------------------------------- structure

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let (r, _) = dims2(self.shape(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = dims2(self.shape(p))?;
            if pr != r {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![r, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.shape(a))?;
        if len == 0 || start + len > c {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{} out of range for {:?}",
                start + len,
                self.shape(a)
            )));
        }
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&av[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![r, len], out)?, Op::SliceCols(a, start), rg))
    }

    /// Stack `k` copies of `a` vertically: `[m, n] -> [k*m, n]`.
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Result<Var> {
        let (r, c) = dims2(self.shape(a))?;
        if k == 0 {
            return Err(Error::InvalidArgument("repeat_rows with k = 0".into()));
        }
        let out = self.value(a).data().repeat(k);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![k * r, c], out)?, Op::RepeatRows(a), rg))
    }

    /// Sum `k` vertically stacked blocks: `[k*m, n] -> [m, n]`. Inverse shape map of [`Graph::repeat_rows`].
    pub fn sum_row_blocks(&mut self, a: Var, k: usize) -> Result<Var> {
        let (r, c) = dims2(self.shape(a))?;
        if k == 0 || r % k != 0 {
            return Err(Error::InvalidArgument(format!("{r} rows not divisible into {k} blocks")));
        }
        let m = r / k;
        let av = self.value(a).data();
        let mut out = vec![0.0; m * c];
        for blk in av.chunks(m * c) {
            for (o, x) in out.iter_mut().zip(blk) {
                *o += x;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![m, c], out)?, Op::SumRowBlocks(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    // --------------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`. Leaves used several times receive the
    /// sum of their path contributions.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::new(self.nodes[i].value.shape().to_vec(), g)).transpose())
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let out = node.value.data();
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let (bc, _) = Bcast::new("backward", self.shape(a), self.shape(b))?;
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let (da, db): (fn(f64, f64) -> f64, fn(f64, f64) -> f64) = match node.op {
                    Op::Add(..) => (|_, _| 1.0, |_, _| 1.0),
                    Op::Sub(..) => (|_, _| 1.0, |_, _| -1.0),
                    Op::Mul(..) => (|_, y| y, |x, _| x),
                    _ => (|_, y| 1.0 / y, |x, y| -x / (y * y)),
                };
                if self.rg(a) {
                    let ga = self.slot(grads, a);
                    for i in 0..bc.rows {
                        for j in 0..bc.cols {
                            let (ia, ib) = (bc.ia(i, j), bc.ib(i, j));
                            ga[ia] += g[i * bc.cols + j] * da(av[ia], bv[ib]);
                        }
                    }
                }
                if self.rg(b) {
                    let gb = self.slot(grads, b);
                    for i in 0..bc.rows {
                        for j in 0..bc.cols {
                            let (ia, ib) = (bc.ia(i, j), bc.ib(i, j));
                            gb[ib] += g[i * bc.cols + j] * db(av[ia], bv[ib]);
                        }
                    }
                }
            }
            Op::Neg(a) => self.elementwise(grads, a, g, |_, _| -1.0, out),
            Op::Scale(a, s) => self.elementwise(grads, a, g, |_, _| s, out),
            Op::AddScalar(a) => self.elementwise(grads, a, g, |_, _| 1.0, out),
            Op::Exp(a) => self.elementwise(grads, a, g, |_, y| y, out),
            Op::Log(a) => self.elementwise(grads, a, g, |x, _| 1.0 / x, out),
            Op::Tanh(a) => self.elementwise(grads, a, g, |_, y| 1.0 - y * y, out),
            Op::Sigmoid(a) => self.elementwise(grads, a, g, |_, y| y * (1.0 - y), out),
            Op::Softplus(a) => self.elementwise(grads, a, g, |x, _| sigmoid(x), out),
            Op::Swish(a) => self.elementwise(
                grads,
                a,
                g,
                |x, _| {
                    let s = sigmoid(x);
                    s + x * s * (1.0 - s)
                },
                out,
            ),
            Op::Square(a) => self.elementwise(grads, a, g, |x, _| 2.0 * x, out),
            Op::Clamp(a, lo, hi) => {
                self.elementwise(grads, a, g, |x, _| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 }, out)
            }
            Op::MatMul(a, b) => {
                let sa = self.shape(a);
                let sb = self.shape(b);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(a) {
                    let bv = self.value(b).data();
                    let ga = self.slot(grads, a);
                    gemm(m, n, k, g, false, bv, true, ga, 1.0);
                }
                if self.rg(b) {
                    let av = self.value(a).data();
                    let gb = self.slot(grads, b);
                    gemm(k, m, n, av, true, g, false, gb, 1.0);
                }
            }
            Op::Transpose(a) => {
                if self.rg(a) {
                    let (r, c) = dims2(self.shape(a))?;
                    let ga = self.slot(grads, a);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                if self.rg(a) {
                    let n = self.value(a).numel();
                    let s = if matches!(node.op, Op::Mean(_)) { g[0] / n as f64 } else { g[0] };
                    self.slot(grads, a).iter_mut().for_each(|x| *x += s);
                }
            }
            Op::SumRows(a) => {
                if self.rg(a) {
                    let (_, c) = dims2(self.shape(a))?;
                    let ga = self.slot(grads, a);
                    for (row, gi) in ga.chunks_mut(c).zip(g) {
                        row.iter_mut().for_each(|x| *x += gi);
                    }
                }
            }
            Op::SumCols(a) => {
                if self.rg(a) {
                    let (_, c) = dims2(self.shape(a))?;
                    let ga = self.slot(grads, a);
                    for row in ga.chunks_mut(c) {
                        row.iter_mut().zip(g).for_each(|(x, gi)| *x += gi);
                    }
                }
            }
            Op::LogSumExpRows(a) => {
                if self.rg(a) {
                    let (_, c) = dims2(self.shape(a))?;
                    let av = self.value(a).data();
                    let ga = self.slot(grads, a);
                    for (i, row) in ga.chunks_mut(c).enumerate() {
                        for (j, x) in row.iter_mut().enumerate() {
                            *x += g[i] * (av[i * c + j] - out[i]).exp();
                        }
                    }
                }
            }
            Op::ConcatCols(ref parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let (r, w) = dims2(self.shape(p))?;
                    if self.rg(p) {
                        let gp = self.slot(grads, p);
                        for i in 0..r {
                            for j in 0..w {
                                gp[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                if self.rg(a) {
                    let (r, c) = dims2(self.shape(a))?;
                    let len = node.value.cols();
                    let ga = self.slot(grads, a);
                    for i in 0..r {
                        for j in 0..len {
                            ga[i * c + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::RepeatRows(a) => {
                if self.rg(a) {
                    let ga = self.slot(grads, a);
                    let n = ga.len();
                    for blk in g.chunks(n) {
                        ga.iter_mut().zip(blk).for_each(|(x, gi)| *x += gi);
                    }
                }
            }
            Op::SumRowBlocks(a) => {
                if self.rg(a) {
                    let ga = self.slot(grads, a);
                    for blk in ga.chunks_mut(g.len()) {
                        blk.iter_mut().zip(g).for_each(|(x, gi)| *x += gi);
                    }
                }
            }
            Op::Reshape(a) => self.elementwise(grads, a, g, |_, _| 1.0, out),
        }
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let n = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    /// `grad_a += g * d(x, y)` where `x` is the input and `y` the output value.
    fn elementwise(
        &self,
        grads: &mut [Option<Vec<f64>>],
        a: Var,
        g: &[f64],
        d: impl Fn(f64, f64) -> f64,
        out: &[f64],
    ) {
        if !self.rg(a) {
            return;
        }
        let av = self.nodes[a.0].value.data();
        let ga = self.slot(grads, a);
        for i in 0..ga.len() {
            ga[i] += g[i] * d(av[i], out[i]);
        }
    }
}

/// Compare reverse-mode gradients of `f` at `point` against central differences.
///
/// Returns the largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`
/// over every coordinate of every input. A non-finite loss or derivative is an error.
pub fn grad_check<F>(f: F, point: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |pt: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pt.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.item(out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    if !g.item(loss)?.is_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    let grads = g.backward(loss)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = point.to_vec();
    for (pi, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(v, point[pi].shape());
        for j in 0..point[pi].numel() {
            let x = point[pi].data()[j];
            probe[pi].data_mut()[j] = x + step;
            let fp = eval(&probe)?;
            probe[pi].data_mut()[j] = x - step;
            let fm = eval(&probe)?;
            probe[pi].data_mut()[j] = x;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic.data()[j];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!("grad_check input {pi} entry {j}")));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn forward_definitions() {
        let mut g = Graph::new();
        let z = g.scalar(0.0);
        let sp = g.softplus(z);
        close(g.item(sp).unwrap(), std::f64::consts::LN_2, 1e-15);
        let sw = g.swish(z);
        assert_eq!(g.item(sw).unwrap(), 0.0);

        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let i = g.constant(Tensor::identity(2));
        let p = g.matmul(a, i).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 3]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 3]"), "{err}");
        let err = g.matmul(a, a).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn simple_derivatives() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.square(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let y = g.softplus(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.5]);
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        let y = g.exp(x);
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn repeated_leaf_accumulates() {
        // x*x + 3x at x = 2 -> 2x + 3 = 7
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let xx = g.mul(x, x).unwrap();
        let x3 = g.scale(x, 3.0);
        let y = g.add(xx, x3).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn broadcast_row_and_column() {
        let mut g = Graph::new();
        let a = g.param(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let r = g.param(Tensor::row(&[10.0, 20.0, 30.0]));
        let c = g.param(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let s = g.add(a, r).unwrap();
        let p = g.mul(s, c).unwrap();
        assert_eq!(g.value(p).data(), &[11.0, 22.0, 33.0, 28.0, 50.0, 72.0]);
        let l = g.sum(p);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(r).unwrap().data(), &[3.0, 3.0, 3.0]);
        assert_eq!(grads.get(c).unwrap().data(), &[66.0, 75.0]);
    }

    #[test]
    fn grad_check_quadratic() {
        let err = grad_check(|g, v| Ok(g.square(v[0])), &[Tensor::scalar(3.0)], 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn grad_check_reports_non_finite() {
        let r = grad_check(|g, v| Ok(g.log(v[0])), &[Tensor::scalar(-1.0)], 1e-5);
        assert!(r.is_err());
    }
}
