//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! Every operation appends a node to a [`Tape`]; [`Var::backward`] walks the
//! tape in reverse and returns the gradients of every bound parameter. All
//! ops treat their operands as `[rows, cols]` matrices (see
//! [`Tensor::rows`]/[`Tensor::cols`]).

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param { store: u64, id: ParamId },
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Square(usize),
    Abs(usize),
    ClampMin(usize, f64),
    Sum(usize),
    Mean(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    GatherRows(usize, Vec<usize>),
    SegmentSoftmax(usize, Vec<usize>),
    SegmentSum(usize, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<(u64, ParamId), usize>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.idx, self.dims())
    }
}

/// Parameter gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    pub(crate) entries: Vec<(u64, ParamId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, store: &ParamStore, name: &str) -> Option<&Tensor> {
        let id = store.id(name)?;
        self.entries
            .iter()
            .find(|(s, i, _)| *s == store.uid() && *i == id)
            .map(|(_, _, g)| g)
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    fn needs(&self, parents: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        parents.iter().any(|&p| nodes[p].requires_grad)
    }

    /// A value that receives no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Bind a named parameter. Binding the same parameter twice returns the
    /// same node, so gradients from every use accumulate in one place.
    pub fn param(&self, store: &ParamStore, name: &str) -> Var<'_> {
        let id = store
            .id(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not registered"));
        self.param_id(store, id)
    }

    pub fn param_id(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        let key = (store.uid(), id);
        if let Some(&idx) = self.bound.borrow().get(&key) {
            return Var { tape: self, idx };
        }
        let v = self.push(
            store.value(id).clone(),
            Op::Param {
                store: store.uid(),
                id,
            },
            true,
        );
        self.bound.borrow_mut().insert(key, v.idx);
        v
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols of nothing".into()));
        }
        let nodes = self.nodes.borrow();
        let rows = nodes[parts[0].idx].value.rows();
        let mut cols = 0;
        for p in parts {
            let v = &nodes[p.idx].value;
            if v.rows() != rows {
                return Err(shape_err(format!(
                    "concat_cols row mismatch: {} vs {rows}",
                    v.rows()
                )));
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(nodes[p.idx].value.row_slice(r));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.idx).collect();
        drop(nodes);
        let rg = self.needs(&ids);
        Ok(self.push(
            Tensor::matrix(rows, cols, data)?,
            Op::ConcatCols(ids),
            rg,
        ))
    }

    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(shape_err("concat_rows of nothing".into()));
        }
        let nodes = self.nodes.borrow();
        let cols = nodes[parts[0].idx].value.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = &nodes[p.idx].value;
            if v.cols() != cols {
                return Err(shape_err(format!(
                    "concat_rows col mismatch: {} vs {cols}",
                    v.cols()
                )));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.idx).collect();
        drop(nodes);
        let rg = self.needs(&ids);
        Ok(self.push(
            Tensor::matrix(rows, cols, data)?,
            Op::ConcatRows(ids),
            rg,
        ))
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `aᵀ · g` for a: [m,k], g: [m,n] → [k,n]
fn matmul_at_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

/// `g · bᵀ` for g: [m,n], b: [k,n] → [m,k]
fn matmul_a_bt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.idx].value)
    }

    pub fn dims(&self) -> Vec<usize> {
        self.with_value(|v| v.dims().to_vec())
    }

    pub fn rows(&self) -> usize {
        self.with_value(|v| v.rows())
    }

    pub fn cols(&self) -> usize {
        self.with_value(|v| v.cols())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.with_value(|v| v.data()[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.idx].requires_grad
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.idx];
            let mut v = n.value.clone();
            v.data_mut().iter_mut().for_each(|x| *x = f(*x));
            (v, n.requires_grad)
        };
        self.tape.push(value, op, rg)
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx].value;
            let b = &nodes[other.idx].value;
            if a.rows() != b.rows() || a.cols() != b.cols() {
                return Err(shape_err(format!(
                    "{name}: {:?} vs {:?}",
                    a.dims(),
                    b.dims()
                )));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.dims().to_vec(), data)?
        };
        let rg = self.tape.needs(&[self.idx, other.idx]);
        Ok(self.tape.push(value, op, rg))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx].value;
            let b = &nodes[other.idx].value;
            let (m, k) = (a.rows(), a.cols());
            let (k2, n) = (b.rows(), b.cols());
            if k != k2 {
                return Err(shape_err(format!(
                    "matmul inner dims: {:?} x {:?}",
                    a.dims(),
                    b.dims()
                )));
            }
            Tensor::matrix(m, n, matmul_raw(a.data(), b.data(), m, k, n))?
        };
        let rg = self.tape.needs(&[self.idx, other.idx]);
        Ok(self.tape.push(value, Op::MatMul(self.idx, other.idx), rg))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.idx, other.idx), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.idx, other.idx), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.idx, other.idx), |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", Op::Div(self.idx, other.idx), |a, b| a / b)
    }

    /// `[r, c] + [1, c]`, the row broadcast to every row.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx].value;
            let b = &nodes[row.idx].value;
            if b.len() != a.cols() {
                return Err(shape_err(format!(
                    "add_row: {:?} + {:?}",
                    a.dims(),
                    b.dims()
                )));
            }
            let c = a.cols();
            let mut v = a.clone();
            for chunk in v.data_mut().chunks_mut(c.max(1)) {
                for (x, &y) in chunk.iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
            v
        };
        let rg = self.tape.needs(&[self.idx, row.idx]);
        Ok(self.tape.push(value, Op::AddRow(self.idx, row.idx), rg))
    }

    /// `[r, c] ⊙ [r, 1]`, each row scaled by its own weight.
    pub fn mul_col(self, col: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx].value;
            let w = &nodes[col.idx].value;
            if w.len() != a.rows() {
                return Err(shape_err(format!(
                    "mul_col: {:?} * {:?}",
                    a.dims(),
                    w.dims()
                )));
            }
            let c = a.cols();
            let mut v = a.clone();
            for (r, chunk) in v.data_mut().chunks_mut(c.max(1)).enumerate() {
                let s = w.data()[r];
                chunk.iter_mut().for_each(|x| *x *= s);
            }
            v
        };
        let rg = self.tape.needs(&[self.idx, col.idx]);
        Ok(self.tape.push(value, Op::MulCol(self.idx, col.idx), rg))
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.unary(Op::Scale(self.idx, k), |x| x * k)
    }

    pub fn offset(self, k: f64) -> Var<'t> {
        self.unary(Op::Offset(self.idx), |x| x + k)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.idx), sigmoid)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.idx), f64::tanh)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.idx), f64::exp)
    }

    pub fn log(self) -> Var<'t> {
        self.unary(Op::Log(self.idx), f64::ln)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.idx), |x| x.max(0.0))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(Op::LeakyRelu(self.idx, slope), |x| {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        })
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.idx), |x| x * x)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Op::Abs(self.idx), f64::abs)
    }

    pub fn clamp_min(self, floor: f64) -> Var<'t> {
        self.unary(Op::ClampMin(self.idx, floor), |x| x.max(floor))
    }

    pub fn sum(self) -> Var<'t> {
        let (s, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.idx];
            (n.value.sum(), n.requires_grad)
        };
        self.tape.push(Tensor::scalar(s), Op::Sum(self.idx), rg)
    }

    pub fn mean(self) -> Var<'t> {
        let (s, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.idx];
            let len = n.value.len().max(1) as f64;
            (n.value.sum() / len, n.requires_grad)
        };
        self.tape.push(Tensor::scalar(s), Op::Mean(self.idx), rg)
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.idx];
            let a = &n.value;
            if start + len > a.cols() {
                return Err(shape_err(format!(
                    "slice_cols {start}..{} of {:?}",
                    start + len,
                    a.dims()
                )));
            }
            let mut data = Vec::with_capacity(a.rows() * len);
            for r in 0..a.rows() {
                data.extend_from_slice(&a.row_slice(r)[start..start + len]);
            }
            (Tensor::matrix(a.rows(), len, data)?, n.requires_grad)
        };
        Ok(self.tape.push(value, Op::SliceCols(self.idx, start), rg))
    }

    /// Output row `i` is input row `indices[i]`; backward scatter-adds.
    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.idx];
            let a = &n.value;
            let c = a.cols();
            let mut data = Vec::with_capacity(indices.len() * c);
            for &i in indices {
                if i >= a.rows() {
                    return Err(Error::Index {
                        index: i,
                        len: a.rows(),
                    });
                }
                data.extend_from_slice(a.row_slice(i));
            }
            (Tensor::matrix(indices.len(), c, data)?, n.requires_grad)
        };
        Ok(self
            .tape
            .push(value, Op::GatherRows(self.idx, indices.to_vec()), rg))
    }

    pub fn row(self, i: usize) -> Result<Var<'t>> {
        self.gather_rows(&[i])
    }

    /// Softmax of an `[n, 1]` column within groups of rows sharing a
    /// segment id. Groups need not be contiguous.
    pub fn segment_softmax(self, segments: &[usize]) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.idx];
            let a = &n.value;
            if a.len() != segments.len() {
                return Err(shape_err(format!(
                    "segment_softmax: {} values, {} segment ids",
                    a.len(),
                    segments.len()
                )));
            }
            let nseg = segments.iter().copied().max().map_or(0, |m| m + 1);
            let mut max = vec![f64::NEG_INFINITY; nseg];
            for (&x, &s) in a.data().iter().zip(segments) {
                if x > max[s] {
                    max[s] = x;
                }
            }
            let mut out: Vec<f64> = a
                .data()
                .iter()
                .zip(segments)
                .map(|(&x, &s)| (x - max[s]).exp())
                .collect();
            let mut denom = vec![0.0; nseg];
            for (&e, &s) in out.iter().zip(segments) {
                denom[s] += e;
            }
            for (e, &s) in out.iter_mut().zip(segments) {
                *e /= denom[s];
            }
            (Tensor::new(a.dims().to_vec(), out)?, n.requires_grad)
        };
        Ok(self
            .tape
            .push(value, Op::SegmentSoftmax(self.idx, segments.to_vec()), rg))
    }

    /// Sum rows into `num_segments` output rows by segment id.
    pub fn segment_sum(self, segments: &[usize], num_segments: usize) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.idx];
            let a = &n.value;
            if a.rows() != segments.len() {
                return Err(shape_err(format!(
                    "segment_sum: {} rows, {} segment ids",
                    a.rows(),
                    segments.len()
                )));
            }
            let c = a.cols();
            let mut out = vec![0.0; num_segments * c];
            for (r, &s) in segments.iter().enumerate() {
                if s >= num_segments {
                    return Err(Error::Index {
                        index: s,
                        len: num_segments,
                    });
                }
                for (o, &x) in out[s * c..(s + 1) * c].iter_mut().zip(a.row_slice(r)) {
                    *o += x;
                }
            }
            (Tensor::matrix(num_segments, c, out)?, n.requires_grad)
        };
        Ok(self
            .tape
            .push(value, Op::SegmentSum(self.idx, segments.to_vec()), rg))
    }

    /// Reverse pass from this (single-element) node.
    pub fn backward(self) -> Gradients {
        let nodes = self.tape.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; self.idx + 1];
        grads[self.idx] = Some(Tensor::filled(nodes[self.idx].value.dims(), 1.0));
        let mut out = Gradients::default();

        for i in (0..=self.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |p: usize, delta: Tensor| {
                if !nodes[p].requires_grad {
                    return;
                }
                match &mut grads[p] {
                    Some(existing) => {
                        for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                            *e += d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            };
            let val = |p: usize| &nodes[p].value;
            let map = |t: &Tensor, f: &dyn Fn(usize, f64) -> f64| {
                let mut out = t.clone();
                out.data_mut()
                    .iter_mut()
                    .enumerate()
                    .for_each(|(k, x)| *x = f(k, *x));
                out
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param { store, id } => out.entries.push((*store, *id, g)),
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if nodes[*a].requires_grad {
                        let da = matmul_a_bt(g.data(), bv.data(), m, k, n);
                        acc(*a, Tensor::new(av.dims().to_vec(), da).expect("shape"));
                    }
                    if nodes[*b].requires_grad {
                        let db = matmul_at_b(av.data(), g.data(), m, k, n);
                        acc(*b, Tensor::new(bv.dims().to_vec(), db).expect("shape"));
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, map(&g, &|_, x| -x));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    acc(*a, map(&g, &|k, x| x * bv.data()[k]));
                    acc(*b, map(&g, &|k, x| x * av.data()[k]));
                }
                Op::Div(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    acc(*a, map(&g, &|k, x| x / bv.data()[k]));
                    acc(
                        *b,
                        map(&g, &|k, x| {
                            let d = bv.data()[k];
                            -x * av.data()[k] / (d * d)
                        }),
                    );
                }
                Op::AddRow(a, b) => {
                    let bv = val(*b);
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for r in 0..g.rows() {
                        for (d, x) in db.iter_mut().zip(g.row_slice(r)) {
                            *d += x;
                        }
                    }
                    acc(*b, Tensor::new(bv.dims().to_vec(), db).expect("shape"));
                    acc(*a, g);
                }
                Op::MulCol(a, w) => {
                    let (av, wv) = (val(*a), val(*w));
                    let c = g.cols();
                    let da = map(&g, &|k, x| x * wv.data()[k / c]);
                    let dw: Vec<f64> = (0..g.rows())
                        .map(|r| {
                            g.row_slice(r)
                                .iter()
                                .zip(av.row_slice(r))
                                .map(|(x, y)| x * y)
                                .sum()
                        })
                        .collect();
                    acc(*w, Tensor::new(wv.dims().to_vec(), dw).expect("shape"));
                    acc(*a, da);
                }
                Op::Scale(a, k) => acc(*a, map(&g, &|_, x| x * k)),
                Op::Offset(a) => acc(*a, g),
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    acc(
                        *a,
                        map(&g, &|k, x| {
                            let s = y.data()[k];
                            x * s * (1.0 - s)
                        }),
                    );
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    acc(
                        *a,
                        map(&g, &|k, x| {
                            let t = y.data()[k];
                            x * (1.0 - t * t)
                        }),
                    );
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    acc(*a, map(&g, &|k, x| x * y.data()[k]));
                }
                Op::Log(a) => {
                    let av = val(*a);
                    acc(*a, map(&g, &|k, x| x / av.data()[k]));
                }
                Op::Relu(a) => {
                    let av = val(*a);
                    acc(
                        *a,
                        map(&g, &|k, x| if av.data()[k] > 0.0 { x } else { 0.0 }),
                    );
                }
                Op::LeakyRelu(a, slope) => {
                    let av = val(*a);
                    acc(
                        *a,
                        map(&g, &|k, x| {
                            if av.data()[k] > 0.0 {
                                x
                            } else {
                                x * slope
                            }
                        }),
                    );
                }
                Op::Square(a) => {
                    let av = val(*a);
                    acc(*a, map(&g, &|k, x| 2.0 * x * av.data()[k]));
                }
                Op::Abs(a) => {
                    let av = val(*a);
                    acc(
                        *a,
                        map(&g, &|k, x| {
                            let v = av.data()[k];
                            if v > 0.0 {
                                x
                            } else if v < 0.0 {
                                -x
                            } else {
                                0.0
                            }
                        }),
                    );
                }
                Op::ClampMin(a, floor) => {
                    let av = val(*a);
                    acc(
                        *a,
                        map(&g, &|k, x| if av.data()[k] >= *floor { x } else { 0.0 }),
                    );
                }
                Op::Sum(a) => {
                    let av = val(*a);
                    acc(*a, Tensor::filled(av.dims(), g.data()[0]));
                }
                Op::Mean(a) => {
                    let av = val(*a);
                    let n = av.len().max(1) as f64;
                    acc(*a, Tensor::filled(av.dims(), g.data()[0] / n));
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let pv = val(p);
                        let w = pv.cols();
                        if nodes[p].requires_grad {
                            let mut data = Vec::with_capacity(pv.len());
                            for r in 0..g.rows() {
                                data.extend_from_slice(&g.row_slice(r)[start..start + w]);
                            }
                            acc(p, Tensor::new(pv.dims().to_vec(), data).expect("shape"));
                        }
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let pv = val(p);
                        let n = pv.len();
                        if nodes[p].requires_grad {
                            acc(
                                p,
                                Tensor::new(pv.dims().to_vec(), g.data()[start..start + n].to_vec())
                                    .expect("shape"),
                            );
                        }
                        start += n;
                    }
                }
                Op::SliceCols(a, start) => {
                    let av = val(*a);
                    let (c, w) = (av.cols(), g.cols());
                    let mut da = Tensor::zeros(av.dims());
                    for r in 0..g.rows() {
                        da.data_mut()[r * c + start..r * c + start + w]
                            .copy_from_slice(g.row_slice(r));
                    }
                    acc(*a, da);
                }
                Op::GatherRows(a, indices) => {
                    let av = val(*a);
                    let c = av.cols();
                    let mut da = Tensor::zeros(av.dims());
                    for (r, &src) in indices.iter().enumerate() {
                        for (d, x) in da.data_mut()[src * c..(src + 1) * c]
                            .iter_mut()
                            .zip(g.row_slice(r))
                        {
                            *d += x;
                        }
                    }
                    acc(*a, da);
                }
                Op::SegmentSoftmax(a, segments) => {
                    let y = node.value.data();
                    let nseg = segments.iter().copied().max().map_or(0, |m| m + 1);
                    let mut dot = vec![0.0; nseg];
                    for ((&gy, &yy), &s) in g.data().iter().zip(y).zip(segments) {
                        dot[s] += gy * yy;
                    }
                    acc(*a, map(&g, &|k, x| y[k] * (x - dot[segments[k]])));
                }
                Op::SegmentSum(a, segments) => {
                    let av = val(*a);
                    let c = av.cols();
                    let mut data = Vec::with_capacity(av.len());
                    for &s in segments {
                        data.extend_from_slice(&g.data()[s * c..(s + 1) * c]);
                    }
                    acc(*a, Tensor::new(av.dims().to_vec(), data).expect("shape"));
                }
            }
        }
        out
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
