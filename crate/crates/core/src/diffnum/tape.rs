//! The autodiff tape: eager operations with recorded backward rules.
//!
//! Every operation evaluates immediately, verifies the result is finite, and
//! appends a node describing how to propagate gradients to its inputs. A
//! single `backward` pass then walks the nodes in reverse creation order —
//! which is already a valid topological order, because an eager op can only
//! consume previously created nodes.
//!
//! Gradients only flow where they are needed: a node "requires grad" when any
//! of its inputs does, and accumulation skips everything else. Data enters
//! the graph through `leaf` (no gradient) and trainable weights through
//! `param`.

use std::cell::RefCell;

use crate::error::{Error, Result};

use super::tensor::{Scalar, Tensor};

/// Handle to a node on the tape. Only valid for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone)]
enum Op<S> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// Divide every entry of the first input by a `[1, 1]` second input.
    DivScalar(usize, usize),
    /// Add a `[1, c]` row vector to every row of the first input.
    AddRow(usize, usize),
    /// Add an `[r, 1]` column vector to every column of the first input.
    AddCol(usize, usize),
    /// Elementwise `mul * x + add`; only the slope matters going backward.
    Affine { x: usize, mul: S },
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Relu(usize),
    /// Row-wise softmax over the columns flagged `true`; excluded columns
    /// produce exactly zero. A row with no valid column is all zeros.
    SoftmaxMasked { x: usize, valid: Vec<bool> },
    ConcatCols(usize, usize),
    /// Stack `[1, c]` rows into an `[n, c]` matrix.
    StackRows(Vec<usize>),
    /// Collapse rows: `[r, c] -> [1, c]`.
    SumRows(usize),
    /// Collapse columns: `[r, c] -> [r, 1]`.
    SumCols(usize),
    /// Sum of every entry: `[r, c] -> [1, 1]`.
    SumAll(usize),
    /// Frobenius norm of the whole tensor: `[r, c] -> [1, 1]`. Uses the zero
    /// subgradient at the origin, so it is safe on vanishing differences
    /// where a composed `sqrt(sum(x^2))` would blow up.
    Norm(usize),
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    grad: Option<Tensor<S>>,
    requires_grad: bool,
    op: Op<S>,
}

pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Inserts a constant: gradients are not tracked through it.
    pub fn leaf(&self, value: Tensor<S>) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// Inserts a trainable tensor: `grad` is available after `backward`.
    pub fn param(&self, value: Tensor<S>) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> Tensor<S> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// The value of a `[1, 1]` node.
    pub fn scalar(&self, v: Var) -> S {
        self.nodes.borrow()[v.0].value.item()
    }

    /// Gradient accumulated by the last `backward`, if the node required one
    /// and was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        self.nodes.borrow()[v.0].grad.clone()
    }

    // ---- binary ops ------------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let value = nodes[a.0].value.matmul(&nodes[b.0].value)?;
            (value, nodes[a.0].requires_grad || nodes[b.0].requires_grad)
        };
        self.push(value, Op::MatMul(a.0, b.0), rg, "matmul")
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let value = nodes[a.0].value.add(&nodes[b.0].value)?;
            (value, nodes[a.0].requires_grad || nodes[b.0].requires_grad)
        };
        self.push(value, Op::Add(a.0, b.0), rg, "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let value = nodes[a.0].value.sub(&nodes[b.0].value)?;
            (value, nodes[a.0].requires_grad || nodes[b.0].requires_grad)
        };
        self.push(value, Op::Sub(a.0, b.0), rg, "sub")
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let value = nodes[a.0].value.mul(&nodes[b.0].value)?;
            (value, nodes[a.0].requires_grad || nodes[b.0].requires_grad)
        };
        self.push(value, Op::Mul(a.0, b.0), rg, "mul")
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let value = nodes[a.0].value.zip_map(&nodes[b.0].value, |x, y| x / y)?;
            (value, nodes[a.0].requires_grad || nodes[b.0].requires_grad)
        };
        self.push(value, Op::Div(a.0, b.0), rg, "div")
    }

    /// Divides every entry of `a` by the `[1, 1]` node `s`.
    pub fn div_scalar(&self, a: Var, s: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            if nodes[s.0].value.shape() != (1, 1) {
                return Err(Error::Shape(format!(
                    "div_scalar: divisor must be 1x1, got {}x{}",
                    nodes[s.0].value.rows(),
                    nodes[s.0].value.cols()
                )));
            }
            let sv = nodes[s.0].value.item();
            let value = nodes[a.0].value.map(|x| x / sv);
            (value, nodes[a.0].requires_grad || nodes[s.0].requires_grad)
        };
        self.push(value, Op::DivScalar(a.0, s.0), rg, "div_scalar")
    }

    /// Adds the `[1, c]` row vector `b` to every row of `a`.
    pub fn add_row(&self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            if bv.rows() != 1 || bv.cols() != av.cols() {
                return Err(Error::Shape(format!(
                    "add_row: {}x{} plus {}x{}",
                    av.rows(),
                    av.cols(),
                    bv.rows(),
                    bv.cols()
                )));
            }
            let mut value = av.clone();
            for r in 0..value.rows() {
                for c in 0..value.cols() {
                    value.set(r, c, value.get(r, c) + bv.get(0, c));
                }
            }
            (value, nodes[a.0].requires_grad || nodes[b.0].requires_grad)
        };
        self.push(value, Op::AddRow(a.0, b.0), rg, "add_row")
    }

    /// Adds the `[r, 1]` column vector `b` to every column of `a`.
    pub fn add_col(&self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            if bv.cols() != 1 || bv.rows() != av.rows() {
                return Err(Error::Shape(format!(
                    "add_col: {}x{} plus {}x{}",
                    av.rows(),
                    av.cols(),
                    bv.rows(),
                    bv.cols()
                )));
            }
            let mut value = av.clone();
            for r in 0..value.rows() {
                for c in 0..value.cols() {
                    value.set(r, c, value.get(r, c) + bv.get(r, 0));
                }
            }
            (value, nodes[a.0].requires_grad || nodes[b.0].requires_grad)
        };
        self.push(value, Op::AddCol(a.0, b.0), rg, "add_col")
    }

    pub fn concat_cols(&self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            if av.rows() != bv.rows() {
                return Err(Error::Shape(format!(
                    "concat_cols: {}x{} with {}x{}",
                    av.rows(),
                    av.cols(),
                    bv.rows(),
                    bv.cols()
                )));
            }
            let mut rows = Vec::with_capacity(av.rows());
            for r in 0..av.rows() {
                let mut row = av.row(r).to_vec();
                row.extend_from_slice(bv.row(r));
                rows.push(row);
            }
            (
                Tensor::from_rows(&rows)?,
                nodes[a.0].requires_grad || nodes[b.0].requires_grad,
            )
        };
        self.push(value, Op::ConcatCols(a.0, b.0), rg, "concat_cols")
    }

    /// Stacks `[1, c]` row vectors into an `[n, c]` matrix.
    pub fn stack_rows(&self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::Shape("stack_rows: empty input".into()));
        }
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let cols = nodes[rows[0].0].value.cols();
            let mut data = Vec::with_capacity(rows.len() * cols);
            let mut rg = false;
            for v in rows {
                let t = &nodes[v.0].value;
                if t.rows() != 1 || t.cols() != cols {
                    return Err(Error::Shape(format!(
                        "stack_rows: expected 1x{cols}, got {}x{}",
                        t.rows(),
                        t.cols()
                    )));
                }
                data.extend_from_slice(t.as_slice());
                rg |= nodes[v.0].requires_grad;
            }
            (Tensor::new(rows.len(), cols, data)?, rg)
        };
        let ids = rows.iter().map(|v| v.0).collect();
        self.push(value, Op::StackRows(ids), rg, "stack_rows")
    }

    // ---- unary ops -------------------------------------------------------

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].value.transpose(), nodes[a.0].requires_grad)
        };
        self.push(value, Op::Transpose(a.0), rg, "transpose")
    }

    /// Elementwise `mul * x + add` with constants.
    pub fn affine(&self, a: Var, mul: S, add: S) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (
                nodes[a.0].value.map(|x| mul * x + add),
                nodes[a.0].requires_grad,
            )
        };
        self.push(value, Op::Affine { x: a.0, mul }, rg, "affine")
    }

    pub fn scale(&self, a: Var, k: S) -> Result<Var> {
        self.affine(a, k, S::zero())
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&self, a: Var) -> Result<Var> {
        self.affine(a, -S::one(), S::one())
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (
                nodes[a.0].value.map(|x| S::one() / (S::one() + (-x).exp())),
                nodes[a.0].requires_grad,
            )
        };
        self.push(value, Op::Sigmoid(a.0), rg, "sigmoid")
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].value.map(|x| x.tanh()), nodes[a.0].requires_grad)
        };
        self.push(value, Op::Tanh(a.0), rg, "tanh")
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].value.map(|x| x.exp()), nodes[a.0].requires_grad)
        };
        self.push(value, Op::Exp(a.0), rg, "exp")
    }

    /// Natural log; the finite-value check rejects non-positive inputs.
    pub fn ln(&self, a: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].value.map(|x| x.ln()), nodes[a.0].requires_grad)
        };
        self.push(value, Op::Ln(a.0), rg, "ln")
    }

    /// Elementwise square root. The derivative diverges at zero, so when a
    /// gradient must survive a possibly-zero magnitude use `norm` instead.
    pub fn sqrt(&self, a: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].value.map(|x| x.sqrt()), nodes[a.0].requires_grad)
        };
        self.push(value, Op::Sqrt(a.0), rg, "sqrt")
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (
                nodes[a.0].value.map(|x| if x > S::zero() { x } else { S::zero() }),
                nodes[a.0].requires_grad,
            )
        };
        self.push(value, Op::Relu(a.0), rg, "relu")
    }

    /// Row-wise softmax restricted to the columns where `valid` is `true`.
    /// Excluded columns come out exactly zero; a row with no valid column is
    /// all zeros rather than an error, so callers can feed padded slots
    /// uniformly.
    pub fn softmax_masked(&self, a: Var, valid: &[bool]) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            if valid.len() != av.cols() {
                return Err(Error::Shape(format!(
                    "softmax_masked: mask length {} for {} columns",
                    valid.len(),
                    av.cols()
                )));
            }
            let mut value = Tensor::zeros(av.rows(), av.cols());
            for r in 0..av.rows() {
                let mut max: Option<S> = None;
                for c in 0..av.cols() {
                    if valid[c] {
                        let x = av.get(r, c);
                        max = Some(match max {
                            Some(m) if m >= x => m,
                            _ => x,
                        });
                    }
                }
                let Some(max) = max else { continue };
                let mut denom = S::zero();
                for c in 0..av.cols() {
                    if valid[c] {
                        let e = (av.get(r, c) - max).exp();
                        value.set(r, c, e);
                        denom = denom + e;
                    }
                }
                for c in 0..av.cols() {
                    if valid[c] {
                        value.set(r, c, value.get(r, c) / denom);
                    }
                }
            }
            (value, nodes[a.0].requires_grad)
        };
        self.push(
            value,
            Op::SoftmaxMasked {
                x: a.0,
                valid: valid.to_vec(),
            },
            rg,
            "softmax_masked",
        )
    }

    /// Plain softmax across each full row.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        let cols = self.nodes.borrow()[a.0].value.cols();
        self.softmax_masked(a, &vec![true; cols])
    }

    // ---- reductions ------------------------------------------------------

    /// `[r, c] -> [1, c]`: sums the rows together.
    pub fn sum_rows(&self, a: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let mut value = Tensor::zeros(1, av.cols());
            for r in 0..av.rows() {
                for c in 0..av.cols() {
                    value.set(0, c, value.get(0, c) + av.get(r, c));
                }
            }
            (value, nodes[a.0].requires_grad)
        };
        self.push(value, Op::SumRows(a.0), rg, "sum_rows")
    }

    /// `[r, c] -> [r, 1]`: sums each row across its columns.
    pub fn sum_cols(&self, a: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let mut value = Tensor::zeros(av.rows(), 1);
            for r in 0..av.rows() {
                let mut acc = S::zero();
                for c in 0..av.cols() {
                    acc = acc + av.get(r, c);
                }
                value.set(r, 0, acc);
            }
            (value, nodes[a.0].requires_grad)
        };
        self.push(value, Op::SumCols(a.0), rg, "sum_cols")
    }

    pub fn sum_all(&self, a: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (
                Tensor::scalar(nodes[a.0].value.sum()),
                nodes[a.0].requires_grad,
            )
        };
        self.push(value, Op::SumAll(a.0), rg, "sum_all")
    }

    pub fn mean_all(&self, a: Var) -> Result<Var> {
        let n = self.nodes.borrow()[a.0].value.len();
        let s = self.sum_all(a)?;
        self.scale(s, S::one() / S::from(n).unwrap())
    }

    /// `[r, c] -> [1, c]`: arithmetic mean of the rows.
    pub fn mean_rows(&self, a: Var) -> Result<Var> {
        let r = self.nodes.borrow()[a.0].value.rows();
        let s = self.sum_rows(a)?;
        self.scale(s, S::one() / S::from(r).unwrap())
    }

    /// Frobenius norm of the whole tensor, with zero subgradient at zero.
    pub fn norm(&self, a: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let mut acc = S::zero();
            for &x in nodes[a.0].value.as_slice() {
                acc = acc + x * x;
            }
            (Tensor::scalar(acc.sqrt()), nodes[a.0].requires_grad)
        };
        self.push(value, Op::Norm(a.0), rg, "norm")
    }

    /// `sum((a - b)^2)` as a `[1, 1]` node.
    pub fn sq_dist(&self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.sum_all(sq)
    }

    /// `sum(a * b)` as a `[1, 1]` node.
    pub fn dot(&self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum_all(p)
    }

    // ---- backward --------------------------------------------------------

    /// Runs reverse-mode accumulation from a `[1, 1]` root. Existing
    /// gradients are cleared first, so each call reflects exactly one root.
    pub fn backward(&self, root: Var) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[root.0].value.shape() != (1, 1) {
            return Err(Error::Grad(format!(
                "backward root must be 1x1, got {}x{}",
                nodes[root.0].value.rows(),
                nodes[root.0].value.cols()
            )));
        }
        if !nodes[root.0].requires_grad {
            return Err(Error::Grad(
                "backward root does not depend on any parameter".into(),
            ));
        }
        for node in nodes.iter_mut() {
            node.grad = None;
        }
        nodes[root.0].grad = Some(Tensor::scalar(S::one()));

        for i in (0..=root.0).rev() {
            if !nodes[i].requires_grad || nodes[i].grad.is_none() {
                continue;
            }
            let g = nodes[i].grad.as_ref().unwrap().clone();
            let op = nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul(&nodes[b].value.transpose())?;
                    let db = nodes[a].value.transpose().matmul(&g)?;
                    accum(&mut nodes, a, da);
                    accum(&mut nodes, b, db);
                }
                Op::Transpose(a) => {
                    accum(&mut nodes, a, g.transpose());
                }
                Op::Add(a, b) => {
                    accum(&mut nodes, a, g.clone());
                    accum(&mut nodes, b, g);
                }
                Op::Sub(a, b) => {
                    accum(&mut nodes, a, g.clone());
                    accum(&mut nodes, b, g.scale(-S::one()));
                }
                Op::Mul(a, b) => {
                    let da = g.mul(&nodes[b].value)?;
                    let db = g.mul(&nodes[a].value)?;
                    accum(&mut nodes, a, da);
                    accum(&mut nodes, b, db);
                }
                Op::Div(a, b) => {
                    let da = g.zip_map(&nodes[b].value, |gv, bv| gv / bv)?;
                    // d/db (a/b) = -a / b^2 = -y / b
                    let db = g
                        .mul(&nodes[i].value)?
                        .zip_map(&nodes[b].value, |gy, bv| -(gy / bv))?;
                    accum(&mut nodes, a, da);
                    accum(&mut nodes, b, db);
                }
                Op::DivScalar(a, s) => {
                    let sv = nodes[s].value.item();
                    let da = g.scale(S::one() / sv);
                    let num = g.mul(&nodes[a].value)?.sum();
                    let ds = Tensor::scalar(-num / (sv * sv));
                    accum(&mut nodes, a, da);
                    accum(&mut nodes, s, ds);
                }
                Op::AddRow(a, b) => {
                    let mut db = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            db.set(0, c, db.get(0, c) + g.get(r, c));
                        }
                    }
                    accum(&mut nodes, a, g);
                    accum(&mut nodes, b, db);
                }
                Op::AddCol(a, b) => {
                    let mut db = Tensor::zeros(g.rows(), 1);
                    for r in 0..g.rows() {
                        let mut acc = S::zero();
                        for c in 0..g.cols() {
                            acc = acc + g.get(r, c);
                        }
                        db.set(r, 0, acc);
                    }
                    accum(&mut nodes, a, g);
                    accum(&mut nodes, b, db);
                }
                Op::Affine { x, mul } => {
                    accum(&mut nodes, x, g.scale(mul));
                }
                Op::Sigmoid(x) => {
                    let y = &nodes[i].value;
                    let dx = g.zip_map(y, |gv, yv| gv * yv * (S::one() - yv))?;
                    accum(&mut nodes, x, dx);
                }
                Op::Tanh(x) => {
                    let y = &nodes[i].value;
                    let dx = g.zip_map(y, |gv, yv| gv * (S::one() - yv * yv))?;
                    accum(&mut nodes, x, dx);
                }
                Op::Exp(x) => {
                    let dx = g.mul(&nodes[i].value)?;
                    accum(&mut nodes, x, dx);
                }
                Op::Ln(x) => {
                    let dx = g.zip_map(&nodes[x].value, |gv, xv| gv / xv)?;
                    accum(&mut nodes, x, dx);
                }
                Op::Sqrt(x) => {
                    let two = S::from(2.0).unwrap();
                    let y = &nodes[i].value;
                    let dx = g.zip_map(y, |gv, yv| gv / (two * yv))?;
                    accum(&mut nodes, x, dx);
                }
                Op::Relu(x) => {
                    let dx = g.zip_map(&nodes[x].value, |gv, xv| {
                        if xv > S::zero() {
                            gv
                        } else {
                            S::zero()
                        }
                    })?;
                    accum(&mut nodes, x, dx);
                }
                Op::SoftmaxMasked { x, valid } => {
                    let y = &nodes[i].value;
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let mut dot = S::zero();
                        for c in 0..y.cols() {
                            dot = dot + g.get(r, c) * y.get(r, c);
                        }
                        for c in 0..y.cols() {
                            if valid[c] {
                                dx.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                            }
                        }
                    }
                    accum(&mut nodes, x, dx);
                }
                Op::ConcatCols(a, b) => {
                    let ca = nodes[a].value.cols();
                    let cb = nodes[b].value.cols();
                    let mut da = Tensor::zeros(g.rows(), ca);
                    let mut db = Tensor::zeros(g.rows(), cb);
                    for r in 0..g.rows() {
                        for c in 0..ca {
                            da.set(r, c, g.get(r, c));
                        }
                        for c in 0..cb {
                            db.set(r, c, g.get(r, ca + c));
                        }
                    }
                    accum(&mut nodes, a, da);
                    accum(&mut nodes, b, db);
                }
                Op::StackRows(ids) => {
                    for (r, id) in ids.iter().enumerate() {
                        let dr = Tensor::row_vec(g.row(r));
                        accum(&mut nodes, *id, dr);
                    }
                }
                Op::SumRows(x) => {
                    let (r, c) = nodes[x].value.shape();
                    let mut dx = Tensor::zeros(r, c);
                    for rr in 0..r {
                        for cc in 0..c {
                            dx.set(rr, cc, g.get(0, cc));
                        }
                    }
                    accum(&mut nodes, x, dx);
                }
                Op::SumCols(x) => {
                    let (r, c) = nodes[x].value.shape();
                    let mut dx = Tensor::zeros(r, c);
                    for rr in 0..r {
                        for cc in 0..c {
                            dx.set(rr, cc, g.get(rr, 0));
                        }
                    }
                    accum(&mut nodes, x, dx);
                }
                Op::SumAll(x) => {
                    let (r, c) = nodes[x].value.shape();
                    accum(&mut nodes, x, Tensor::full(r, c, g.item()));
                }
                Op::Norm(x) => {
                    let y = nodes[i].value.item();
                    if y > S::zero() {
                        let dx = nodes[x].value.scale(g.item() / y);
                        accum(&mut nodes, x, dx);
                    }
                }
            }
        }

        for node in nodes.iter() {
            if let Some(g) = &node.grad {
                if !g.is_finite() {
                    return Err(Error::NonFinite(
                        "backward produced a non-finite gradient".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    // ---- internals -------------------------------------------------------

    fn push(&self, value: Tensor<S>, op: Op<S>, requires_grad: bool, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "{name} produced a non-finite value"
            )));
        }
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn push_unchecked(&self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(nodes.len() - 1)
    }
}

fn accum<S: Scalar>(nodes: &mut [Node<S>], idx: usize, delta: Tensor<S>) {
    if !nodes[idx].requires_grad {
        return;
    }
    match &mut nodes[idx].grad {
        Some(g) => g.add_scaled_assign(&delta, S::one()),
        None => nodes[idx].grad = Some(delta),
    }
}
