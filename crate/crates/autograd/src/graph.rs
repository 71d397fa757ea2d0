//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the nodes in reverse and accumulates adjoints.
//! Graphs are built fresh for every step; nothing is reused across steps.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    NormalizeRows { x: Var, norms: Vec<f64> },
    Conv1d { x: Var, w: Var, kernel: usize, dilation: usize, cols: Vec<f64> },
    GatherRows { x: Var, idx: Vec<usize> },
    SegmentMean { x: Var, starts: Vec<usize> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SumCols(Var),
    StraightThrough(Var),
    LogAbsDet { w: Var, inv_t: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A dynamic computation graph.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
    log_det_memo: BTreeMap<Var, Var>,
    training: bool,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    /// Gradient with respect to a node, if it received one.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].as_deref()
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Vec<f64>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Vec<f64>> {
        self.params
    }
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape(format!("{op}: {:?} vs {:?}", a.dims(), b.dims()))
}

fn mk(dims: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(dims, data).expect("kernel produced consistent shape")
}

impl Graph {
    pub fn new(training: bool) -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new(), log_det_memo: BTreeMap::new(), training }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &str) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradient (inputs under a gradient check).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.input(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    /// A constant copy of `v`: gradient stops here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn binary_same(&self, a: Var, b: Var, name: &str) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() != tb.dims() {
            return Err(shape_err(name, ta, tb));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        mk(ta.dims().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "add")?;
        let v = self.zip(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "sub")?;
        let v = self.zip(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "mul")?;
        let v = self.zip(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "div")?;
        let v = self.zip(a, b, |x, y| x / y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Div(a, b), ng, "div")
    }

    /// Sums several same-shaped values left to right.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("add_all of nothing".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    fn row_broadcast(&mut self, x: Var, r: Var, mul: bool) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(r));
        if tr.len() != tx.cols() {
            return Err(shape_err(if mul { "mul_row" } else { "add_row" }, tx, tr));
        }
        let c = tx.cols();
        let rd = tr.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if mul { v * rd[i % c] } else { v + rd[i % c] })
            .collect();
        let t = mk(tx.dims().to_vec(), data);
        let ng = self.ng(x) || self.ng(r);
        let op = if mul { Op::MulRow(x, r) } else { Op::AddRow(x, r) };
        self.push(t, op, ng, "row broadcast")
    }

    /// `x[.., c] + r[c]`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_broadcast(x, r, false)
    }

    /// `x[.., c] * r[c]`.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_broadcast(x, r, true)
    }

    fn col_broadcast(&mut self, x: Var, c: Var, mul: bool) -> Result<Var> {
        let (tx, tc) = (self.value(x), self.value(c));
        if tc.len() != tx.rows() {
            return Err(shape_err(if mul { "mul_col" } else { "add_col" }, tx, tc));
        }
        let cols = tx.cols();
        let cd = tc.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if mul { v * cd[i / cols] } else { v + cd[i / cols] })
            .collect();
        let t = mk(tx.dims().to_vec(), data);
        let ng = self.ng(x) || self.ng(c);
        let op = if mul { Op::MulCol(x, c) } else { Op::AddCol(x, c) };
        self.push(t, op, ng, "col broadcast")
    }

    /// `x[r, ..] + c[r]`.
    pub fn add_col(&mut self, x: Var, c: Var) -> Result<Var> {
        self.col_broadcast(x, c, false)
    }

    /// `x[r, ..] * c[r]`.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        self.col_broadcast(x, c, true)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng, "add_scalar")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)` for 2-D values, where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims().len() != 2 || vb.dims().len() != 2 {
            return Err(shape_err("matmul (2-D only)", va, vb));
        }
        let (ar, ac) = (va.dims()[0], va.dims()[1]);
        let (br, bc) = (vb.dims()[0], vb.dims()[1]);
        let inner_a = if ta { ar } else { ac };
        let inner_b = if tb { bc } else { br };
        if inner_a != inner_b {
            return Err(shape_err("matmul", va, vb));
        }
        let (data, m, n) = kernels::matmul_t(va.data(), ar, ac, ta, vb.data(), br, bc, tb);
        let ng = self.ng(a) || self.ng(b);
        self.push(mk(vec![m, n], data), Op::MatMul { a, b, ta, tb }, ng, "matmul")
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op, name: &str) -> Result<Var> {
        let v = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(v, op, ng, name)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a), "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a), "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh(a), "tanh")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::ln, Op::Log(a), "log")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::abs, Op::Abs(a), "abs")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * x, Op::Square(a), "square")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::sqrt, Op::Sqrt(a), "sqrt")
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let v = mk(t.dims().to_vec(), out);
        let ng = self.ng(a);
        self.push(v, Op::Softmax(a), ng, "softmax")
    }

    /// Row-wise log-softmax over the last dimension.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let v = mk(t.dims().to_vec(), out);
        let ng = self.ng(a);
        self.push(v, Op::LogSoftmax(a), ng, "log_softmax")
    }

    /// Normalizes each last-dim vector to zero mean and unit variance:
    /// `(x - mean) / sqrt(var + eps)` with the population variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        let mut out = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(t.rows());
        for row in out.chunks_mut(c) {
            let (mean, std) = mean_std(row);
            let r = 1.0 / (std * std + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * r;
            }
            inv_std.push(r);
        }
        let v = mk(t.dims().to_vec(), out);
        let ng = self.ng(a);
        self.push(v, Op::LayerNorm { x: a, inv_std }, ng, "layer_norm")
    }

    /// Scales each row to unit L2 norm. Zero rows are an error.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        let mut out = t.data().to_vec();
        let mut norms = Vec::with_capacity(t.rows());
        for (i, row) in out.chunks_mut(c).enumerate() {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n <= 0.0 || !n.is_finite() {
                return Err(Error::InvalidArgument(format!("row {i} has zero norm")));
            }
            for x in row.iter_mut() {
                *x /= n;
            }
            norms.push(n);
        }
        let v = mk(t.dims().to_vec(), out);
        let ng = self.ng(a);
        self.push(v, Op::NormalizeRows { x: a, norms }, ng, "normalize_rows")
    }

    /// Same-padded dilated 1-D convolution without bias.
    ///
    /// `x` is `[t, c_in]`; `w` is `[kernel * c_in, c_out]` where row
    /// `tap * c_in + i` holds the weights of input channel `i` at `tap`.
    pub fn conv1d(&mut self, x: Var, w: Var, kernel: usize, dilation: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if kernel % 2 == 0 || kernel == 0 || dilation == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv1d needs an odd kernel and positive dilation, got {kernel}/{dilation}"
            )));
        }
        if tx.dims().len() != 2 || tw.dims().len() != 2 || tw.dims()[0] != kernel * tx.cols() {
            return Err(shape_err("conv1d", tx, tw));
        }
        let (t, c) = (tx.rows(), tx.cols());
        let cout = tw.cols();
        let cols = kernels::im2col(tx.data(), t, c, kernel, dilation);
        let data = kernels::gemm(&cols, tw.data(), t, kernel * c, cout);
        let ng = self.ng(x) || self.ng(w);
        self.push(mk(vec![t, cout], data), Op::Conv1d { x, w, kernel, dilation, cols }, ng, "conv1d")
    }

    /// Selects rows of a 2-D value by index (embedding lookup, repetition).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if idx.is_empty() {
            return Err(Error::InvalidArgument("gather_rows with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::InvalidArgument(format!("row index {bad} out of range for {r} rows")));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let ng = self.ng(x);
        self.push(mk(vec![idx.len(), c], data), Op::GatherRows { x, idx: idx.to_vec() }, ng, "gather_rows")
    }

    /// Averages contiguous row segments. `starts` must begin at 0 and be
    /// strictly increasing and below the row count; the last segment runs
    /// to the end.
    pub fn segment_mean(&mut self, x: Var, starts: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        validate_segments(starts, r)?;
        let mut data = vec![0.0; starts.len() * c];
        for (n, &s) in starts.iter().enumerate() {
            let e = starts.get(n + 1).copied().unwrap_or(r);
            let out = &mut data[n * c..(n + 1) * c];
            for i in s..e {
                for (o, &v) in out.iter_mut().zip(t.row(i)) {
                    *o += v;
                }
            }
            let inv = 1.0 / (e - s) as f64;
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        let ng = self.ng(x);
        self.push(
            mk(vec![starts.len(), c], data),
            Op::SegmentMean { x, starts: starts.to_vec() },
            ng,
            "segment_mean",
        )
    }

    pub fn concat_cols(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars.first().ok_or_else(|| Error::InvalidArgument("empty concat".into()))?;
        let r = self.value(first).rows();
        for &v in vars {
            if self.value(v).rows() != r || self.value(v).dims().len() != 2 {
                return Err(shape_err("concat_cols", self.value(first), self.value(v)));
            }
        }
        let total: usize = vars.iter().map(|&v| self.value(v).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &v in vars {
                data.extend_from_slice(self.value(v).row(i));
            }
        }
        let ng = vars.iter().any(|&v| self.ng(v));
        self.push(mk(vec![r, total], data), Op::ConcatCols(vars.to_vec()), ng, "concat_cols")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if start >= end || end > t.cols() || t.dims().len() != 2 {
            return Err(Error::Shape(format!("slice_cols {start}..{end} of {:?}", t.dims())));
        }
        let r = t.rows();
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..end]);
        }
        let ng = self.ng(x);
        self.push(mk(vec![r, end - start], data), Op::SliceCols { x, start }, ng, "slice_cols")
    }

    pub fn concat_rows(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars.first().ok_or_else(|| Error::InvalidArgument("empty concat".into()))?;
        let c = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &v in vars {
            let t = self.value(v);
            if t.cols() != c || t.dims().len() != 2 {
                return Err(shape_err("concat_rows", self.value(first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let ng = vars.iter().any(|&v| self.ng(v));
        self.push(mk(vec![rows, c], data), Op::ConcatRows(vars.to_vec()), ng, "concat_rows")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if start >= end || end > t.rows() || t.dims().len() != 2 {
            return Err(Error::Shape(format!("slice_rows {start}..{end} of {:?}", t.dims())));
        }
        let c = t.cols();
        let data = t.data()[start * c..end * c].to_vec();
        let ng = self.ng(x);
        self.push(mk(vec![end - start, c], data), Op::SliceRows { x, start }, ng, "slice_rows")
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(dims)?;
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng, "reshape")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.dims().len() != 2 {
            return Err(Error::Shape(format!("transpose of {:?}", t.dims())));
        }
        let v = t.transpose();
        let ng = self.ng(x);
        self.push(v, Op::Transpose(x), ng, "transpose")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng, "mean")
    }

    /// Column sums: `[r, c] -> [c]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        let mut out = vec![0.0; c];
        for row in t.data().chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::vector(out), Op::SumRows(x), ng, "sum_rows")
    }

    /// Column means: `[r, c] -> [c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rows() as f64;
        let s = self.sum_rows(x)?;
        self.scale(s, 1.0 / r)
    }

    /// Row sums: `[r, c] -> [r]`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().chunks(t.cols()).map(|row| row.iter().sum()).collect();
        let ng = self.ng(x);
        self.push(Tensor::vector(out), Op::SumCols(x), ng, "sum_cols")
    }

    /// Forward value `value`; backward passes the adjoint to `source`
    /// unchanged (straight-through estimator).
    pub fn straight_through(&mut self, source: Var, value: Tensor) -> Result<Var> {
        if value.dims() != self.dims(source) {
            return Err(shape_err("straight_through", self.value(source), &value));
        }
        let ng = self.ng(source);
        self.push(value, Op::StraightThrough(source), ng, "straight_through")
    }

    /// `log |det W|` of a square matrix. Repeated calls on the same node
    /// return the same result node.
    pub fn log_abs_det(&mut self, w: Var) -> Result<Var> {
        if let Some(&v) = self.log_det_memo.get(&w) {
            return Ok(v);
        }
        let t = self.value(w);
        let lu = crate::linalg::Lu::new(t)?;
        let value = lu.log_abs_det();
        let inv_t = lu.inverse().transpose().into_data();
        let ng = self.ng(w);
        let v = self.push(Tensor::scalar(value), Op::LogAbsDet { w, inv_t }, ng, "log_abs_det")?;
        self.log_det_memo.insert(w, v);
        Ok(v)
    }

    /// Inverted dropout. Outside training mode, or with `rate == 0`, this
    /// returns `x` itself.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut RngStream) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !self.training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let dims = self.dims(x).to_vec();
        let n: usize = dims.iter().product();
        let mask: Vec<f64> =
            (0..n).map(|_| if rng.uniform() < rate { 0.0 } else { keep }).collect();
        let m = self.constant(mk(dims, mask));
        self.mul(x, m)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.dims(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else { continue };
            self.propagate(i, g, lower);
        }
        let mut params = BTreeMap::new();
        for (&id, &v) in &self.params {
            if let Some(Some(g)) = grads.get(v.0) {
                params.insert(id, g.clone());
            }
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { nodes: grads, params })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| zip3(d, g, vb, |g, y| g * y));
                acc(*b, &mut |d| zip3(d, g, va, |g, x| g * x));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| zip3(d, g, vb, |g, y| g / y));
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] -= g[k] * va[k] / (vb[k] * vb[k]);
                    }
                });
            }
            Op::AddRow(x, r) => {
                let c = val(*r).len();
                acc(*x, &mut |d| add_into(d, g));
                acc(*r, &mut |d| {
                    for row in g.chunks(c) {
                        add_into(d, row);
                    }
                });
            }
            Op::MulRow(x, r) => {
                let (vx, vr) = (val(*x), val(*r));
                let c = vr.len();
                acc(*x, &mut |d| {
                    for (k, dv) in d.iter_mut().enumerate() {
                        *dv += g[k] * vr[k % c];
                    }
                });
                acc(*r, &mut |d| {
                    for (k, (&gv, &xv)) in g.iter().zip(vx).enumerate() {
                        d[k % c] += gv * xv;
                    }
                });
            }
            Op::AddCol(x, cv) => {
                let cols = self.nodes[x.0].value.cols();
                acc(*x, &mut |d| add_into(d, g));
                acc(*cv, &mut |d| {
                    for (r, row) in g.chunks(cols).enumerate() {
                        d[r] += row.iter().sum::<f64>();
                    }
                });
            }
            Op::MulCol(x, cv) => {
                let (vx, vc) = (val(*x), val(*cv));
                let cols = self.nodes[x.0].value.cols();
                acc(*x, &mut |d| {
                    for (k, dv) in d.iter_mut().enumerate() {
                        *dv += g[k] * vc[k / cols];
                    }
                });
                acc(*cv, &mut |d| {
                    for (k, (&gv, &xv)) in g.iter().zip(vx).enumerate() {
                        d[k / cols] += gv * xv;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g)),
            Op::AddScalar(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::MatMul { a, b, ta, tb } => {
                let (na, nb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (ar, ac) = (na.dims()[0], na.dims()[1]);
                let (br, bc) = (nb.dims()[0], nb.dims()[1]);
                let (m, n) = (node.value.dims()[0], node.value.dims()[1]);
                acc(*a, &mut |d| {
                    let (ga, _, _) = if *ta {
                        kernels::matmul_t(nb.data(), br, bc, *tb, g, m, n, true)
                    } else {
                        kernels::matmul_t(g, m, n, false, nb.data(), br, bc, !*tb)
                    };
                    add_into(d, &ga);
                });
                acc(*b, &mut |d| {
                    let (gb, _, _) = if *tb {
                        kernels::matmul_t(g, m, n, true, na.data(), ar, ac, *ta)
                    } else {
                        kernels::matmul_t(na.data(), ar, ac, !*ta, g, m, n, false)
                    };
                    add_into(d, &gb);
                });
            }
            Op::Relu(a) => {
                let va = val(*a);
                acc(*a, &mut |d| zip3(d, g, va, |g, x| if x > 0.0 { g } else { 0.0 }));
            }
            Op::Sigmoid(a) => acc(*a, &mut |d| zip3(d, g, y, |g, y| g * y * (1.0 - y))),
            Op::Tanh(a) => acc(*a, &mut |d| zip3(d, g, y, |g, y| g * (1.0 - y * y))),
            Op::Exp(a) => acc(*a, &mut |d| zip3(d, g, y, |g, y| g * y)),
            Op::Log(a) => {
                let va = val(*a);
                acc(*a, &mut |d| zip3(d, g, va, |g, x| g / x));
            }
            Op::Abs(a) => {
                let va = val(*a);
                acc(*a, &mut |d| {
                    zip3(d, g, va, |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                });
            }
            Op::Square(a) => {
                let va = val(*a);
                acc(*a, &mut |d| zip3(d, g, va, |g, x| 2.0 * g * x));
            }
            Op::Sqrt(a) => acc(*a, &mut |d| zip3(d, g, y, |g, y| g / (2.0 * y))),
            Op::Softmax(a) => {
                let c = node.value.cols();
                acc(*a, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for k in 0..c {
                            dr[k] += yr[k] * (gr[k] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let c = node.value.cols();
                acc(*a, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let gs: f64 = gr.iter().sum();
                        for k in 0..c {
                            dr[k] += gr[k] - yr[k].exp() * gs;
                        }
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let c = node.value.cols();
                let nf = c as f64;
                acc(*x, &mut |d| {
                    for (r, ((dr, gr), yr)) in
                        d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)).enumerate()
                    {
                        let gm: f64 = gr.iter().sum::<f64>() / nf;
                        let gy: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / nf;
                        for k in 0..c {
                            dr[k] += inv_std[r] * (gr[k] - gm - yr[k] * gy);
                        }
                    }
                });
            }
            Op::NormalizeRows { x, norms } => {
                let c = node.value.cols();
                acc(*x, &mut |d| {
                    for (r, ((dr, gr), yr)) in
                        d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)).enumerate()
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for k in 0..c {
                            dr[k] += (gr[k] - yr[k] * dot) / norms[r];
                        }
                    }
                });
            }
            Op::Conv1d { x, w, kernel, dilation, cols } => {
                let tx = &self.nodes[x.0].value;
                let tw = &self.nodes[w.0].value;
                let (t, c) = (tx.rows(), tx.cols());
                let cout = tw.cols();
                let kc = kernel * c;
                acc(*w, &mut |d| {
                    let (gw, _, _) = kernels::matmul_t(cols, t, kc, true, g, t, cout, false);
                    add_into(d, &gw);
                });
                acc(*x, &mut |d| {
                    let (gc, _, _) = kernels::matmul_t(g, t, cout, false, tw.data(), kc, cout, true);
                    kernels::col2im(&gc, t, c, *kernel, *dilation, d);
                });
            }
            Op::GatherRows { x, idx } => {
                let c = node.value.cols();
                acc(*x, &mut |d| {
                    for (o, &i) in idx.iter().enumerate() {
                        add_into(&mut d[i * c..(i + 1) * c], &g[o * c..(o + 1) * c]);
                    }
                });
            }
            Op::SegmentMean { x, starts } => {
                let c = node.value.cols();
                let r = self.nodes[x.0].value.rows();
                acc(*x, &mut |d| {
                    for (n, &s) in starts.iter().enumerate() {
                        let e = starts.get(n + 1).copied().unwrap_or(r);
                        let inv = 1.0 / (e - s) as f64;
                        let gr = &g[n * c..(n + 1) * c];
                        for i in s..e {
                            for (dv, &gv) in d[i * c..(i + 1) * c].iter_mut().zip(gr) {
                                *dv += gv * inv;
                            }
                        }
                    }
                });
            }
            Op::ConcatCols(vars) => {
                let total = node.value.cols();
                let r = node.value.rows();
                let mut off = 0;
                for &v in vars {
                    let c = self.nodes[v.0].value.cols();
                    acc(v, &mut |d| {
                        for i in 0..r {
                            add_into(&mut d[i * c..(i + 1) * c], &g[i * total + off..i * total + off + c]);
                        }
                    });
                    off += c;
                }
            }
            Op::SliceCols { x, start } => {
                let src_c = self.nodes[x.0].value.cols();
                let c = node.value.cols();
                acc(*x, &mut |d| {
                    for (i, gr) in g.chunks(c).enumerate() {
                        add_into(&mut d[i * src_c + start..i * src_c + start + c], gr);
                    }
                });
            }
            Op::ConcatRows(vars) => {
                let mut off = 0;
                for &v in vars {
                    let n = self.nodes[v.0].value.len();
                    acc(v, &mut |d| add_into(d, &g[off..off + n]));
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.cols();
                acc(*x, &mut |d| add_into(&mut d[start * c..start * c + g.len()], g));
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Transpose(x) => {
                let (r, c) = (node.value.dims()[0], node.value.dims()[1]);
                acc(*x, &mut |d| add_into(d, &kernels::transpose(g, r, c)));
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::SumRows(x) => {
                let c = node.value.len();
                acc(*x, &mut |d| {
                    for row in d.chunks_mut(c) {
                        add_into(row, g);
                    }
                });
            }
            Op::SumCols(x) => {
                let c = self.nodes[x.0].value.cols();
                acc(*x, &mut |d| {
                    for (row, &gv) in d.chunks_mut(c).zip(g) {
                        row.iter_mut().for_each(|d| *d += gv);
                    }
                });
            }
            Op::StraightThrough(src) => acc(*src, &mut |d| add_into(d, g)),
            Op::LogAbsDet { w, inv_t } => {
                acc(*w, &mut |d| d.iter_mut().zip(inv_t).for_each(|(d, v)| *d += g[0] * v));
            }
        }
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    for (d, g) in d.iter_mut().zip(g) {
        *d += g;
    }
}

fn zip3(d: &mut [f64], g: &[f64], v: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((d, &g), &v) in d.iter_mut().zip(g).zip(v) {
        *d += f(g, v);
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Mean and population standard deviation of a slice (two-pass).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub(crate) fn validate_segments(starts: &[usize], rows: usize) -> Result<()> {
    if starts.first() != Some(&0) {
        return Err(Error::InvalidArgument(format!("segment starts {starts:?} must begin at 0")));
    }
    if starts.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(format!(
            "segment starts {starts:?} are not strictly increasing"
        )));
    }
    if *starts.last().unwrap() >= rows {
        return Err(Error::InvalidArgument(format!(
            "segment start {} is beyond {rows} rows",
            starts.last().unwrap()
        )));
    }
    Ok(())
}
