//! A small reverse-mode automatic differentiation tape over dense matrices.
//!
//! Every model in the crate records its forward pass on a [`Tape`] and calls
//! [`Tape::backward`] on a 1x1 loss node. Parameters live in a
//! [`ParamStore`](crate::params::ParamStore) and are bound lazily: the first
//! [`Tape::param`] call for a given id creates a leaf, later calls reuse it, so
//! a parameter used in several places accumulates one gradient.

use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::Matrix;
use crate::params::{ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    SubCol(Var, Var),
    MulCol(Var, Var),
    DivCol(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    LogSigmoid(Var),
    Square(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    RowMean(Var),
    RowStd { x: Var, eps: f64, floor: f64 },
    RowNorm(Var),
}

struct Node {
    value: Matrix,
    op: Op,
}

pub struct Tape<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    bound: Vec<Option<Var>>,
}

impl Gradients {
    /// Gradient of the loss with respect to any node recorded on the tape.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a bound parameter; `None` when the parameter was not used.
    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.bound
            .get(id.index())
            .copied()
            .flatten()
            .and_then(|v| self.wrt(v))
    }
}

#[inline]
fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - libm::log1p(libm::exp(-libm::fabs(x)))
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn row_mean_var(x: &Matrix, r: usize) -> (f64, f64) {
    let row = x.row(r);
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

impl<'s> Tape<'s> {
    /// A tape without parameters, for pure forward computations and tests.
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            bound: Vec::new(),
        }
    }

    pub fn with_params(store: &'s ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::with_capacity(256),
            bound: vec![None; store.len()],
        }
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input. Gradients still flow *to* it (see
    /// [`Gradients::wrt`]) but nothing flows further.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Cuts the graph: a constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Binds a stored parameter as a leaf, reusing the existing binding.
    ///
    /// Panics if the tape was created without a parameter store.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let store = self.store.expect("tape has no parameter store");
        let v = self.push(store.get(id).clone(), Op::Leaf);
        self.bound[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).hadamard(self.value(b));
        self.push(value, Op::Mul(a, b))
    }

    /// `a + 1·row`, broadcasting a 1xc row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row expects a 1x{c} row");
        let rv = self.value(row);
        let value = Matrix::from_fn(r, c, |i, j| self.value(a).get(i, j) + rv.get(0, j));
        self.push(value, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "mul_row expects a 1x{c} row");
        let rv = self.value(row);
        let value = Matrix::from_fn(r, c, |i, j| self.value(a).get(i, j) * rv.get(0, j));
        self.push(value, Op::MulRow(a, row))
    }

    fn col_op(&mut self, a: Var, col: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(col), (r, 1), "column broadcast expects {r}x1");
        let cv = self.value(col);
        Matrix::from_fn(r, c, |i, j| f(self.value(a).get(i, j), cv.get(i, 0)))
    }

    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let value = self.col_op(a, col, |x, c| x + c);
        self.push(value, Op::AddCol(a, col))
    }

    pub fn sub_col(&mut self, a: Var, col: Var) -> Var {
        let value = self.col_op(a, col, |x, c| x - c);
        self.push(value, Op::SubCol(a, col))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let value = self.col_op(a, col, |x, c| x * c);
        self.push(value, Op::MulCol(a, col))
    }

    pub fn div_col(&mut self, a: Var, col: Var) -> Var {
        let value = self.col_op(a, col, |x, c| x / c);
        self.push(value, Op::DivCol(a, col))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self
            .value(a)
            .map(|x| if x > 0.0 { x } else { slope * x });
        self.push(value, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    /// Numerically stable `ln(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(log_sigmoid);
        self.push(value, Op::LogSigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push(value, Op::Square(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - max);
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::hconcat(&mats);
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + len <= c, "slice_cols out of range");
        let x = self.value(a);
        let value = Matrix::from_fn(r, len, |i, j| x.get(i, start + j));
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let value = self.value(a).select_rows(rows);
        self.push(value, Op::GatherRows(a, rows.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Matrix::scalar(x.sum() / x.len() as f64);
        self.push(value, Op::Mean(a))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Matrix::from_fn(x.rows(), 1, |i, _| x.row(i).iter().sum());
        self.push(value, Op::RowSum(a))
    }

    pub fn row_mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Matrix::from_fn(x.rows(), 1, |i, _| row_mean_var(x, i).0);
        self.push(value, Op::RowMean(a))
    }

    /// Per-row population standard deviation `max(sqrt(var + eps), floor)`.
    ///
    /// The gradient is zero wherever the floor is active or the row is
    /// constant.
    pub fn row_std(&mut self, a: Var, eps: f64, floor: f64) -> Var {
        let x = self.value(a);
        let value = Matrix::from_fn(x.rows(), 1, |i, _| {
            libm::sqrt(row_mean_var(x, i).1 + eps).max(floor)
        });
        self.push(value, Op::RowStd { x: a, eps, floor })
    }

    /// Per-row Euclidean norm. The gradient at a zero row is taken as zero.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Matrix::from_fn(x.rows(), 1, |i, _| {
            libm::sqrt(x.row(i).iter().map(|v| v * v).sum())
        });
        self.push(value, Op::RowNorm(a))
    }

    /// Runs the backward pass from a 1x1 node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar node");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Gradients {
            nodes: grads,
            bound: self.bound.clone(),
        }
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, delta: Matrix| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        let val = |v: Var| &self.nodes[v.0].value;

        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.matmul_t(val(*b)));
                acc(*b, val(*a).t_matmul(g));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                acc(*a, g.hadamard(val(*b)));
                acc(*b, g.hadamard(val(*a)));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, Matrix::from_fn(1, g.cols(), |_, j| {
                    (0..g.rows()).map(|i| g.get(i, j)).sum()
                }));
            }
            Op::MulRow(a, row) => {
                let (x, r) = (val(*a), val(*row));
                acc(*a, Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * r.get(0, j)));
                acc(*row, Matrix::from_fn(1, g.cols(), |_, j| {
                    (0..g.rows()).map(|i| g.get(i, j) * x.get(i, j)).sum()
                }));
            }
            Op::AddCol(a, col) | Op::SubCol(a, col) => {
                let sign = if matches!(op, Op::SubCol(..)) { -1.0 } else { 1.0 };
                acc(*a, g.clone());
                acc(*col, Matrix::from_fn(g.rows(), 1, |i, _| {
                    sign * g.row(i).iter().sum::<f64>()
                }));
            }
            Op::MulCol(a, col) => {
                let (x, c) = (val(*a), val(*col));
                acc(*a, Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * c.get(i, 0)));
                acc(*col, Matrix::from_fn(g.rows(), 1, |i, _| {
                    g.row(i).iter().zip(x.row(i)).map(|(gv, xv)| gv * xv).sum()
                }));
            }
            Op::DivCol(a, col) => {
                let (x, c) = (val(*a), val(*col));
                acc(*a, Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) / c.get(i, 0)));
                acc(*col, Matrix::from_fn(g.rows(), 1, |i, _| {
                    let ci = c.get(i, 0);
                    -g.row(i).iter().zip(x.row(i)).map(|(gv, xv)| gv * xv).sum::<f64>()
                        / (ci * ci)
                }));
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::LeakyRelu(a, slope) => {
                acc(*a, val(*a).zip_map(g, |x, gv| if x > 0.0 { gv } else { slope * gv }));
            }
            Op::Sigmoid(a) => acc(*a, out.zip_map(g, |y, gv| gv * y * (1.0 - y))),
            Op::LogSigmoid(a) => acc(*a, val(*a).zip_map(g, |x, gv| gv * sigmoid(-x))),
            Op::Square(a) => acc(*a, val(*a).zip_map(g, |x, gv| 2.0 * x * gv)),
            Op::SoftmaxRows(a) => {
                let mut d = Matrix::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let dot: f64 = g.row(i).iter().zip(out.row(i)).map(|(a, b)| a * b).sum();
                    for j in 0..g.cols() {
                        d.set(i, j, out.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                acc(*a, d);
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = val(*p).cols();
                    acc(*p, Matrix::from_fn(g.rows(), w, |i, j| g.get(i, start + j)));
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).shape();
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    for j in 0..g.cols() {
                        d.set(i, start + j, g.get(i, j));
                    }
                }
                acc(*a, d);
            }
            Op::GatherRows(a, rows) => {
                let (r, c) = val(*a).shape();
                let mut d = Matrix::zeros(r, c);
                for (k, &src) in rows.iter().enumerate() {
                    for (dv, gv) in d.row_mut(src).iter_mut().zip(g.row(k)) {
                        *dv += gv;
                    }
                }
                acc(*a, d);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::filled(r, c, g.item() / (r * c) as f64));
            }
            Op::RowSum(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::from_fn(r, c, |i, _| g.get(i, 0)));
            }
            Op::RowMean(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::from_fn(r, c, |i, _| g.get(i, 0) / c as f64));
            }
            Op::RowStd { x, eps, floor } => {
                let xv = val(*x);
                let (r, c) = xv.shape();
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    let (mean, var) = row_mean_var(xv, i);
                    let raw = libm::sqrt(var + eps);
                    if raw <= *floor || raw == 0.0 {
                        continue;
                    }
                    let scale = g.get(i, 0) / (c as f64 * raw);
                    for j in 0..c {
                        d.set(i, j, scale * (xv.get(i, j) - mean));
                    }
                }
                acc(*x, d);
            }
            Op::RowNorm(a) => {
                let xv = val(*a);
                acc(*a, Matrix::from_fn(xv.rows(), xv.cols(), |i, j| {
                    let n = out.get(i, 0);
                    if n == 0.0 {
                        0.0
                    } else {
                        g.get(i, 0) * xv.get(i, j) / n
                    }
                }));
            }
        }
    }
}
