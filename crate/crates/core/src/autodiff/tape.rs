//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so every node's inputs have a
//! smaller index than the node itself. Walking the tape backwards is therefore
//! a reverse topological order that visits each node exactly once.

use super::array::{sigmoid, Array};
use super::params::{ParamId, ParameterSet};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    LogSigmoid(Var),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    SliceCols(Var, usize),
    Row(Var, usize),
    Gather(Var, Vec<usize>),
    Transpose(Var),
    Softmax(Var),
    Pick(Var, Vec<usize>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Option<Array>,
}

/// Per-parameter gradients produced by [`Tape::backward`], aligned with the
/// parameter set the tape was built over.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn empty(n: usize) -> Self {
        Gradients {
            grads: vec![None; n],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Option<Array>> {
        self.grads.iter()
    }

    pub fn get(&self, id: ParamId) -> Option<&Array> {
        self.grads.get(id.index()).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.add_scaled(t, scale),
                    None => {
                        let mut t = t.clone();
                        t.scale(scale);
                        *mine = Some(t);
                    }
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale(s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.sum_squares())
            .sum::<f64>()
            .sqrt()
    }
}

/// Records one forward pass. Parameters are read through a shared borrow of
/// the [`ParameterSet`] and are never copied onto the tape.
pub struct Tape<'p> {
    params: &'p ParameterSet,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParameterSet) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParameterSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(a), _) => a,
            (None, Op::Param(id)) => self.params.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.value(v).shape()
    }

    fn push(&mut self, op: Op, value: Array) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input. Gradients do not flow out of leaves.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.index()] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(Op::Add(a, b), out)
    }

    /// Adds the `1 x n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let bias = self.value(b);
        debug_assert_eq!(bias.rows(), 1);
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            for (o, x) in out.row_mut(r).iter_mut().zip(bias.data()) {
                *o += x;
            }
        }
        self.push(Op::AddRow(a, b), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        debug_assert_eq!(va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Array::from_vec(va.rows(), va.cols(), data).expect("same shape");
        self.push(Op::Mul(a, b), out)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale(s);
        self.push(Op::Scale(a, s), out)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Array {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        Array::from_vec(va.rows(), va.cols(), data).expect("same shape")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, sigmoid);
        self.push(Op::Sigmoid(a), out)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::ln);
        self.push(Op::Log(a), out)
    }

    /// `ln(sigmoid(x))`, evaluated without forming the sigmoid.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| -softplus(-x));
        self.push(Op::LogSigmoid(a), out)
    }

    /// Concatenates arrays with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Array::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let v = self.value(p);
                debug_assert_eq!(v.rows(), rows);
                out.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
                offset += v.cols();
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    /// Stacks arrays with equal column counts vertically.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            debug_assert_eq!(v.cols(), cols);
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let out = Array::from_vec(rows, cols, data).expect("consistent");
        self.push(Op::StackRows(parts.to_vec()), out)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        let mut out = Array::zeros(va.rows(), len);
        for r in 0..va.rows() {
            out.row_mut(r).copy_from_slice(&va.row(r)[start..start + len]);
        }
        self.push(Op::SliceCols(a, start), out)
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        let out = Array::row_vector(self.value(a).row(r).to_vec());
        self.push(Op::Row(a, r), out)
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let mut out = Array::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            if id >= t.rows() {
                return Err(Error::TokenOutOfRange {
                    id,
                    size: t.rows(),
                });
            }
            out.row_mut(i).copy_from_slice(t.row(id));
        }
        Ok(self.push(Op::Gather(table, ids.to_vec()), out))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(Op::Transpose(a), out)
    }

    /// Row-wise softmax. Entries whose mask flag is `false` get weight exactly
    /// zero; the mask, if given, applies to columns of every row.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let va = self.value(a);
        if let Some(m) = mask {
            debug_assert_eq!(m.len(), va.cols());
            if !m.iter().any(|&x| x) {
                return Err(Error::AllMasked);
            }
        }
        let mut out = Array::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            let row = va.row(r);
            let live = |c: usize| mask.map_or(true, |m| m[c]);
            let max = (0..row.len())
                .filter(|&c| live(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            let o = out.row_mut(r);
            let mut total = 0.0;
            for c in 0..row.len() {
                if live(c) {
                    o[c] = (row[c] - max).exp();
                    total += o[c];
                }
            }
            o.iter_mut().for_each(|x| *x /= total);
        }
        Ok(self.push(Op::Softmax(a), out))
    }

    /// For each row `r`, picks element `[r, idx[r]]`; the result is `rows x 1`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let va = self.value(a);
        debug_assert_eq!(idx.len(), va.rows());
        let mut out = Array::zeros(va.rows(), 1);
        for (r, &c) in idx.iter().enumerate() {
            if c >= va.cols() {
                return Err(Error::TokenOutOfRange {
                    id: c,
                    size: va.cols(),
                });
            }
            out.set(r, 0, va.get(r, c));
        }
        Ok(self.push(Op::Pick(a, idx.to_vec()), out))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Array::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Backpropagates from the scalar `loss` and returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape {
                name: "loss".into(),
                expected: vec![1, 1],
                found: lv.shape().to_vec(),
            });
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Array>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Array::scalar(1.0));
        let mut out = Gradients::empty(self.params.len());

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let slot = &mut out.grads[id.index()];
                    match slot {
                        Some(s) => s.add_assign(&g),
                        None => *slot = Some(g),
                    }
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads, *a, g.matmul_t(vb));
                    accumulate(&mut grads, *b, va.t_matmul(&g));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, b) => {
                    let mut gb = Array::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads, *a, zip_map(&g, vb, |g, y| g * y));
                    accumulate(&mut grads, *b, zip_map(&g, va, |g, x| g * x));
                }
                Op::Scale(a, s) => {
                    let mut g = g;
                    g.scale(*s);
                    accumulate(&mut grads, *a, g);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().expect("value");
                    accumulate(&mut grads, *a, zip_map(&g, y, |g, y| g * y * (1.0 - y)));
                }
                Op::Tanh(a) => {
                    let y = node.value.as_ref().expect("value");
                    accumulate(&mut grads, *a, zip_map(&g, y, |g, y| g * (1.0 - y * y)));
                }
                Op::Log(a) => {
                    let x = self.value(*a);
                    accumulate(&mut grads, *a, zip_map(&g, x, |g, x| g / x));
                }
                Op::LogSigmoid(a) => {
                    let x = self.value(*a);
                    accumulate(&mut grads, *a, zip_map(&g, x, |g, x| g * sigmoid(-x)));
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        let mut gp = Array::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            gp.row_mut(r)
                                .copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        accumulate(&mut grads, p, gp);
                        offset += cols;
                    }
                }
                Op::StackRows(parts) => {
                    let mut row = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        let start = row * g.cols();
                        let data = g.data()[start..start + rows * g.cols()].to_vec();
                        accumulate(
                            &mut grads,
                            p,
                            Array::from_vec(rows, g.cols(), data).expect("consistent"),
                        );
                        row += rows;
                    }
                }
                Op::SliceCols(a, start) => {
                    let va = self.value(*a);
                    let mut ga = Array::zeros(va.rows(), va.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Row(a, r) => {
                    let va = self.value(*a);
                    let mut ga = Array::zeros(va.rows(), va.cols());
                    ga.row_mut(*r).copy_from_slice(g.data());
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gather(table, ids) => {
                    let t = self.value(*table);
                    let mut gt = Array::zeros(t.rows(), t.cols());
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, x) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Softmax(a) => {
                    let y = node.value.as_ref().expect("value");
                    let mut ga = Array::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                            *o = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Pick(a, idx) => {
                    let va = self.value(*a);
                    let mut ga = Array::zeros(va.rows(), va.cols());
                    for (r, &c) in idx.iter().enumerate() {
                        ga.set(r, c, g.get(r, 0));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let va = self.value(*a);
                    accumulate(
                        &mut grads,
                        *a,
                        Array::filled(va.rows(), va.cols(), g.item()),
                    );
                }
            }
        }
        Ok(out)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn zip_map(g: &Array, x: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let data = g.data().iter().zip(x.data()).map(|(&g, &x)| f(g, x)).collect();
    Array::from_vec(g.rows(), g.cols(), data).expect("same shape")
}

fn accumulate(grads: &mut [Option<Array>], v: Var, g: Array) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
