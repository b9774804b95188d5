//! Reverse-mode differentiation over real matrices.
//!
//! Operations append nodes to a [`Tape`]; a node only refers to nodes
//! recorded before it, so walking the node list backwards is a reverse
//! topological order. [`Tape::backward`] visits every node at most once.
//!
//! Values that do not depend on any [`Tape::param`] are recorded as
//! constants and no gradient is propagated into them.

use std::ops::Range;
use std::sync::atomic::{AtomicU32, Ordering};

use ndarray::{s, Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::linalg::real_inverse;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// `x * s` with `s` a 1x1 value.
    ScaleBy(Var, Var),
    Transpose(Var),
    /// `x + row` broadcast over rows, `row` is `1 x n`.
    AddRow(Var, Var),
    /// `x * row` broadcast over rows.
    MulRow(Var, Var),
    Relu(Var),
    Square(Var),
    Sqrt(Var),
    Ln(Var),
    Recip(Var),
    SumAll(Var),
    /// `n x m -> n x 1`.
    SumCols(Var),
    /// Diagonal of a square matrix as a column.
    Diag(Var),
    Inverse(Var),
    Slice {
        src: Var,
        rows: Range<usize>,
        cols: Range<usize>,
    },
    /// Transposes each consecutive `block x cols` row block.
    BlockTranspose(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    AddN(Vec<Var>),
    /// Per-column standardization with batch statistics.
    BatchNormalize {
        x: Var,
        inv_std: Array1<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    tape: u32,
    shapes: Vec<(usize, usize)>,
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of `var`; exactly zero when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Array2<f64> {
        assert_eq!(var.tape, self.tape, "variable from another tape");
        match &self.grads[var.index] {
            Some(g) => g.clone(),
            None => Array2::zeros(self.shapes[var.index]),
        }
    }

    /// `None` when no gradient flowed into `var`.
    pub fn get_ref(&self, var: Var) -> Option<&Array2<f64>> {
        assert_eq!(var.tape, self.tape, "variable from another tape");
        self.grads[var.index].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn value(&self, var: Var) -> &Array2<f64> {
        self.check(var);
        &self.nodes[var.index].value
    }

    pub fn scalar(&self, var: Var) -> f64 {
        let v = self.value(var);
        assert_eq!(v.dim(), (1, 1), "not a scalar");
        v[[0, 0]]
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.value(var).dim()
    }

    fn check(&self, var: Var) {
        assert_eq!(var.tape, self.id, "variable from another tape");
    }

    fn rg(&self, var: Var) -> bool {
        self.check(var);
        self.nodes[var.index].requires_grad
    }

    fn push_raw(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, index }
    }

    fn push(&mut self, value: Array2<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.rg(v));
        let op = if requires_grad { op } else { Op::Leaf };
        self.push_raw(value, op, requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dims(op, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::dims("matmul", va.dim(), vb.dim()));
        }
        let out = va.dot(vb);
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a) - self.value(b);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a) * self.value(b);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let out = self.value(a) / self.value(b);
        Ok(self.push(out, Op::Div(a, b), &[a, b]))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| -x);
        self.push(out, Op::Neg(a), &[a])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a) * factor;
        self.push(out, Op::Scale(a, factor), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        self.push(out, Op::AddScalar(a), &[a])
    }

    /// `a * s` where `s` is `1 x 1`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(Error::dims("scale_by", self.shape(a), self.shape(s)));
        }
        let out = self.value(a) * self.scalar(s);
        Ok(self.push(out, Op::ScaleBy(a, s), &[a, s]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(out, Op::Transpose(a), &[a])
    }

    /// `x + row` for every row of `x`; `row` is `1 x n`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (vx, vr) = (self.value(x), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != vx.ncols() {
            return Err(Error::dims("add_row", vx.dim(), vr.dim()));
        }
        let out = vx + vr;
        Ok(self.push(out, Op::AddRow(x, row), &[x, row]))
    }

    /// `x * row` for every row of `x`; `row` is `1 x n`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (vx, vr) = (self.value(x), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != vx.ncols() {
            return Err(Error::dims("mul_row", vx.dim(), vr.dim()));
        }
        let out = vx * vr;
        Ok(self.push(out, Op::MulRow(x, row), &[x, row]))
    }

    /// ReLU with subgradient 0 at 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| if x > 0.0 { x } else { 0.0 });
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * x);
        self.push(out, Op::Square(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::sqrt);
        self.push(out, Op::Sqrt(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        self.push(out, Op::Ln(a), &[a])
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| 1.0 / x);
        self.push(out, Op::Recip(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::SumAll(a), &[a])
    }

    /// Row sums as an `n x 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::SumCols(a), &[a])
    }

    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.nrows() != v.ncols() {
            return Err(Error::dims("diag", v.dim(), v.dim()));
        }
        let out = v.diag().to_owned().insert_axis(Axis(1));
        Ok(self.push(out, Op::Diag(a), &[a]))
    }

    /// Real matrix inverse (partial-pivoted LU).
    pub fn inverse(&mut self, a: Var) -> Result<Var> {
        let out = real_inverse(self.value(a))?;
        Ok(self.push(out, Op::Inverse(a), &[a]))
    }

    pub fn slice(&mut self, a: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let v = self.value(a);
        if rows.end > v.nrows() || cols.end > v.ncols() || rows.start > rows.end || cols.start > cols.end {
            return Err(Error::dims("slice", v.dim(), (rows.end, cols.end)));
        }
        let out = v.slice(s![rows.clone(), cols.clone()]).to_owned();
        Ok(self.push(out, Op::Slice { src: a, rows, cols }, &[a]))
    }

    /// `(n * block) x c` to `(n * c) x block`, transposing every
    /// `block x c` row block in place of the whole matrix.
    pub fn block_transpose(&mut self, a: Var, block: usize) -> Result<Var> {
        let v = self.value(a);
        if block == 0 || v.nrows() % block != 0 {
            return Err(Error::dims("block_transpose", v.dim(), (block, v.ncols())));
        }
        let out = block_transpose(v, block);
        Ok(self.push(out, Op::BlockTranspose(a, block), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views)
            .map_err(|_| Error::dims("concat_cols", self.shape(parts[0]), (0, 0)))?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views)
            .map_err(|_| Error::dims("concat_rows", self.shape(parts[0]), (0, 0)))?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Sum of equally shaped values.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::dims("add_n", (0, 0), (0, 0)))?;
        let mut out = self.value(first).clone();
        for &p in &parts[1..] {
            self.same_shape("add_n", first, p)?;
            out += self.value(p);
        }
        Ok(self.push(out, Op::AddN(parts.to_vec()), parts))
    }

    /// Standardizes each column with its batch mean and biased variance.
    /// Returns the normalized values with the batch mean and variance.
    pub fn batch_normalize(&mut self, x: Var, eps: f64) -> (Var, Array1<f64>, Array1<f64>) {
        let v = self.value(x);
        let n = v.nrows() as f64;
        let mean = v.sum_axis(Axis(0)) / n;
        let centered = v - &mean;
        let var = centered.mapv(|c| c * c).sum_axis(Axis(0)) / n;
        let inv_std = var.mapv(|s| 1.0 / (s + eps).sqrt());
        let out = centered * &inv_std;
        let node = self.push(out, Op::BatchNormalize { x, inv_std }, &[x]);
        (node, mean, var)
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.tape != self.id || loss.index >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        let shape = self.nodes[loss.index].value.dim();
        if shape != (1, 1) {
            return Err(Error::dims("backward", shape, (1, 1)));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let mut shapes: Vec<_> = self.nodes.iter().map(|n| n.value.dim()).collect();
        shapes.truncate(loss.index + 1);
        grads.resize(self.nodes.len(), None);
        shapes.extend(self.nodes[loss.index + 1..].iter().map(|n| n.value.dim()));
        Ok(Gradients {
            tape: self.id,
            shapes,
            grads,
        })
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let val = |v: Var| &self.nodes[v.index].value;
        let mut acc = |v: Var, delta: Array2<f64>| {
            if !self.nodes[v.index].requires_grad {
                return;
            }
            match &mut grads[v.index] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        let rg = |v: Var| self.nodes[v.index].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if rg(*a) {
                    acc(*a, g.dot(&val(*b).t()));
                }
                if rg(*b) {
                    acc(*b, val(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                if rg(*b) {
                    acc(*b, g.mapv(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    acc(*a, g * val(*b));
                }
                if rg(*b) {
                    acc(*b, g * val(*a));
                }
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                if rg(*a) {
                    acc(*a, g / vb);
                }
                if rg(*b) {
                    // d(a/b)/db = -out / b
                    acc(*b, -(g * &node.value) / vb);
                }
            }
            Op::Neg(a) => acc(*a, g.mapv(|x| -x)),
            Op::Scale(a, f) => acc(*a, g * *f),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::ScaleBy(a, s) => {
                if rg(*a) {
                    acc(*a, g * val(*s)[[0, 0]]);
                }
                if rg(*s) {
                    let d = (g * val(*a)).sum();
                    acc(*s, Array2::from_elem((1, 1), d));
                }
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::AddRow(x, row) => {
                acc(*x, g.clone());
                if rg(*row) {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(x, row) => {
                if rg(*x) {
                    acc(*x, g * val(*row));
                }
                if rg(*row) {
                    acc(*row, (g * val(*x)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                ndarray::Zip::from(&mut d).and(&node.value).for_each(|d, &y| {
                    if y <= 0.0 {
                        *d = 0.0;
                    }
                });
                acc(*a, d);
            }
            Op::Square(a) => acc(*a, g * val(*a) * 2.0),
            Op::Sqrt(a) => acc(*a, g / &(&node.value * 2.0)),
            Op::Ln(a) => acc(*a, g / val(*a)),
            Op::Recip(a) => acc(*a, -(g * &node.value * &node.value)),
            Op::SumAll(a) => acc(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]])),
            Op::SumCols(a) => {
                let cols = val(*a).ncols();
                let d = g.broadcast((g.nrows(), cols)).expect("column broadcast").to_owned();
                acc(*a, d);
            }
            Op::Diag(a) => {
                let n = g.nrows();
                let mut d = Array2::zeros((n, n));
                for i in 0..n {
                    d[[i, i]] = g[[i, 0]];
                }
                acc(*a, d);
            }
            Op::Inverse(a) => {
                // d(A^{-1}) = -A^{-1} dA A^{-1}  =>  dA = -A^{-T} G A^{-T}
                let inv_t = node.value.t();
                acc(*a, -inv_t.dot(g).dot(&inv_t));
            }
            Op::Slice { src, rows, cols } => {
                let mut d = Array2::zeros(val(*src).dim());
                d.slice_mut(s![rows.clone(), cols.clone()]).assign(g);
                acc(*src, d);
            }
            Op::BlockTranspose(a, _block) => {
                acc(*a, block_transpose(g, val(*a).ncols()));
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).ncols();
                    if rg(p) {
                        acc(p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = val(p).nrows();
                    if rg(p) {
                        acc(p, g.slice(s![start..start + h, ..]).to_owned());
                    }
                    start += h;
                }
            }
            Op::AddN(parts) => {
                for &p in parts {
                    acc(p, g.clone());
                }
            }
            Op::BatchNormalize { x, inv_std } => {
                // dx = inv_std / n * (n g - Σg - x̂ Σ(g x̂))
                let xhat = &node.value;
                let n = xhat.nrows() as f64;
                let sum_g = g.sum_axis(Axis(0));
                let sum_gx = (g * xhat).sum_axis(Axis(0));
                let d = ((g * n) - &sum_g - &(xhat * &sum_gx)) * &(inv_std / n);
                acc(*x, d);
            }
        }
    }
}

fn block_transpose(a: &Array2<f64>, block: usize) -> Array2<f64> {
    let cols = a.ncols();
    let n = a.nrows() / block;
    let mut out = Array2::zeros((n * cols, block));
    for b in 0..n {
        out.slice_mut(s![b * cols..(b + 1) * cols, ..])
            .assign(&a.slice(s![b * block..(b + 1) * block, ..]).t());
    }
    out
}
