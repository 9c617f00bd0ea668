//! Dense row-major `f64` tensors and a tape for reverse-mode differentiation.
//!
//! The engine is intentionally small: it covers what an MLP softmax
//! classifier and the loss zoo need. Every op is recorded on a [`Tape`] as
//! a node holding its forward value; [`Tape::backward`] walks the nodes in
//! reverse creation order, which is a valid topological order because a
//! node can only reference nodes created before it.
//!
//! Broadcasting is limited to [`Tape::add_row`] (a vector added to each row
//! of a matrix).

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for axis of length {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense tensor of 64-bit floats in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            1 => 1,
            _ => 0,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 0,
        }
    }

    /// Row `i` of a matrix (or the whole vector).
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Selects the given rows of a matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let m = self.as_matrix("select_rows")?;
        let mut data = Vec::with_capacity(idx.len() * m.1);
        for &i in idx {
            if i >= m.0 {
                return Err(TensorError::Index {
                    op: "select_rows",
                    index: i,
                    bound: m.0,
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Self::matrix(idx.len(), m.1, data)
    }

    /// Selects the given columns of a matrix.
    pub fn select_cols(&self, idx: &[usize]) -> Result<Self> {
        let (r, c) = self.as_matrix("select_cols")?;
        let mut data = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            let row = self.row(i);
            for &j in idx {
                if j >= c {
                    return Err(TensorError::Index {
                        op: "select_cols",
                        index: j,
                        bound: c,
                    });
                }
                data.push(row[j]);
            }
        }
        Self::matrix(r, idx.len(), data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        same_shape(op, self, other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        same_shape("max_abs_diff", self, other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.as_matrix("transpose")?;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Self::matrix(c, r, data)
    }

    /// Plain matrix product `self · rhs`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (n, k) = self.as_matrix("matmul")?;
        let (k2, m) = rhs.as_matrix("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &rhs.data[p * m..(p + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self::matrix(n, m, out)
    }

    /// `self · rhsᵀ` without materializing the transpose.
    fn matmul_bt(&self, rhs: &Self) -> Self {
        let (n, k) = (self.shape[0], self.shape[1]);
        let m = rhs.shape[0];
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let b_row = &rhs.data[j * k..(j + 1) * k];
                out[i * m + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Self {
            shape: vec![n, m],
            data: out,
        }
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    fn matmul_at(&self, rhs: &Self) -> Self {
        let (n, k) = (self.shape[0], self.shape[1]);
        let m = rhs.shape[1];
        let mut out = vec![0.0; k * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let b_row = &rhs.data[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out[p * m..(p + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self {
            shape: vec![k, m],
            data: out,
        }
    }

    fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(TensorError::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

/// Row-wise log-softmax with max subtraction. Works on vectors (one row)
/// and matrices.
pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let cols = x.cols().max(1);
    let mut out = x.data.clone();
    for row in out.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

/// Row-wise softmax.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let cols = x.cols().max(1);
    let mut out = x.data.clone();
    for row in out.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Powf(Var, f64),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Gather {
        input: Var,
        rows: Vec<usize>,
        cols: Vec<usize>,
    },
    LogSoftmax(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Records primitive ops and their forward values.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not reach the root or does
    /// not require a gradient.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`; zeros when `v` is unused.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(op, value, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(Op::MatMul(a, b), value, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push_op(Op::Add(a, b), value, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push_op(Op::Sub(a, b), value, &[a, b]))
    }

    /// Adds vector `b` (length M) to every row of matrix `x` (N×M).
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        if xv.shape.len() != 2 || bv.shape.len() != 1 || xv.shape[1] != bv.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: xv.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let mut value = xv.clone();
        let m = bv.shape[0];
        if m > 0 {
            for row in value.data.chunks_mut(m) {
                for (v, &bias) in row.iter_mut().zip(&bv.data) {
                    *v += bias;
                }
            }
        }
        Ok(self.push_op(Op::AddRow(x, b), value, &[x, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push_op(Op::Mul(a, b), value, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push_op(Op::Scale(a, c), value, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push_op(Op::AddScalar(a), value, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push_op(Op::Relu(a), value, &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push_op(Op::Log(a), value, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push_op(Op::Exp(a), value, &[a])
    }

    /// Elementwise `x^p`. The derivative at `x = 0` is taken as zero.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let value = self.value(a).map(|x| x.powf(p));
        self.push_op(Op::Powf(a, p), value, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push_op(Op::Sum(a), value, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Tensor::scalar(v.sum() / v.len() as f64);
        self.push_op(Op::Mean(a), value, &[a])
    }

    /// Sums each row of a matrix, giving a vector of length N.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let (n, m) = v.as_matrix("sum_rows")?;
        let data = (0..n).map(|i| v.data[i * m..(i + 1) * m].iter().sum()).collect();
        let value = Tensor::vector(data);
        Ok(self.push_op(Op::SumRows(a), value, &[a]))
    }

    /// Picks `x[rows[i], cols[i]]` for each `i`.
    pub fn gather(&mut self, a: Var, rows: &[usize], cols: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let (n, m) = v.as_matrix("gather")?;
        if rows.len() != cols.len() {
            return Err(TensorError::ShapeMismatch {
                op: "gather",
                lhs: vec![rows.len()],
                rhs: vec![cols.len()],
            });
        }
        let mut data = Vec::with_capacity(rows.len());
        for (&r, &c) in rows.iter().zip(cols) {
            if r >= n {
                return Err(TensorError::Index {
                    op: "gather",
                    index: r,
                    bound: n,
                });
            }
            if c >= m {
                return Err(TensorError::Index {
                    op: "gather",
                    index: c,
                    bound: m,
                });
            }
            data.push(v.data[r * m + c]);
        }
        let value = Tensor::vector(data);
        Ok(self.push_op(
            Op::Gather {
                input: a,
                rows: rows.to_vec(),
                cols: cols.to_vec(),
            },
            value,
            &[a],
        ))
    }

    /// Row-wise log-softmax (stabilized by max subtraction).
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        self.push_op(Op::LogSoftmax(a), value, &[a])
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(TensorError::NonScalarRoot {
                shape: rv.shape.clone(),
            });
        }
        self.backward_from(root, Tensor::filled(&rv.shape, 1.0))
    }

    /// Reverse pass seeded with an explicit upstream gradient for `node`.
    ///
    /// Used to push an analytic dL/dlogits into the network.
    pub fn backward_from(&self, node: Var, seed: Tensor) -> Result<Gradients> {
        same_shape("backward_from", self.value(node), &seed)?;
        let mut grads: Vec<Option<Tensor>> = vec![None; node.0 + 1];
        grads[node.0] = Some(seed);

        for idx in (0..=node.0).rev() {
            let n = &self.nodes[idx];
            if !n.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&n.op, &n.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        grads.resize(self.nodes.len(), None);
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g.matmul_bt(val(*b)));
                }
                if rg(*b) {
                    accumulate(grads, *b, val(*a).matmul_at(g));
                }
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if rg(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if rg(*b) {
                    accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::AddRow(x, b) => {
                if rg(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if rg(*b) {
                    let m = val(*b).len();
                    let mut col = vec![0.0; m];
                    if m > 0 {
                        for row in g.data.chunks(m) {
                            for (c, v) in col.iter_mut().zip(row) {
                                *c += v;
                            }
                        }
                    }
                    accumulate(grads, *b, Tensor::vector(col));
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g.zip_map(val(*b), "mul", |x, y| x * y)?);
                }
                if rg(*b) {
                    accumulate(grads, *b, g.zip_map(val(*a), "mul", |x, y| x * y)?);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let d = g.zip_map(val(*a), "relu", |gi, x| if x > 0.0 { gi } else { 0.0 })?;
                accumulate(grads, *a, d);
            }
            Op::Log(a) => {
                accumulate(grads, *a, g.zip_map(val(*a), "log", |gi, x| gi / x)?);
            }
            Op::Exp(a) => {
                accumulate(grads, *a, g.zip_map(out, "exp", |gi, y| gi * y)?);
            }
            Op::Powf(a, p) => {
                let p = *p;
                let d = g.zip_map(val(*a), "powf", |gi, x| {
                    if x == 0.0 || p == 0.0 {
                        0.0
                    } else {
                        gi * p * x.powf(p - 1.0)
                    }
                })?;
                accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let s = g.item();
                accumulate(grads, *a, Tensor::filled(&val(*a).shape, s));
            }
            Op::Mean(a) => {
                let v = val(*a);
                let s = g.item() / v.len() as f64;
                accumulate(grads, *a, Tensor::filled(&v.shape, s));
            }
            Op::SumRows(a) => {
                let v = val(*a);
                let m = v.shape[1];
                let mut d = Tensor::zeros(&v.shape);
                for (i, row) in d.data.chunks_mut(m.max(1)).enumerate().take(v.shape[0]) {
                    row.fill(g.data[i]);
                }
                accumulate(grads, *a, d);
            }
            Op::Gather { input, rows, cols } => {
                let v = val(*input);
                let m = v.shape[1];
                let mut d = Tensor::zeros(&v.shape);
                for (k, (&r, &c)) in rows.iter().zip(cols).enumerate() {
                    d.data[r * m + c] += g.data[k];
                }
                accumulate(grads, *input, d);
            }
            Op::LogSoftmax(a) => {
                // d/dz = g - softmax(z) * rowsum(g), with softmax = exp(out).
                let m = out.cols().max(1);
                let mut d = g.clone();
                for (drow, orow) in d.data.chunks_mut(m).zip(out.data.chunks(m)) {
                    let total: f64 = drow.iter().sum();
                    for (dv, &o) in drow.iter_mut().zip(orow) {
                        *dv -= o.exp() * total;
                    }
                }
                accumulate(grads, *a, d);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data.iter_mut().zip(&g.data) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Central-difference check of an analytic gradient.
///
/// `f` evaluates the scalar function at a parameter vector and `grad` is the
/// gradient under test at `params`. Returns the largest elementwise
/// `|g_ad - g_fd| / (|g_fd| + 1e-8)`.
pub fn fd_check<F>(mut f: F, params: &[f64], grad: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(TensorError::NonFinite(format!("fd_check step must be positive, got {eps}")));
    }
    if params.len() != grad.len() {
        return Err(TensorError::ShapeMismatch {
            op: "fd_check",
            lhs: vec![params.len()],
            rhs: vec![grad.len()],
        });
    }
    let mut x = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = f(&x);
        x[i] = orig - eps;
        let minus = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(TensorError::NonFinite(format!(
                "function value at coordinate {i}: f(+eps)={plus}, f(-eps)={minus}"
            )));
        }
        let fd = (plus - minus) / (2.0 * eps);
        worst = worst.max((grad[i] - fd).abs() / (fd.abs() + 1e-8));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_softmax_uniform() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let out = tape.log_softmax(z);
        let ln2 = std::f64::consts::LN_2;
        for &v in tape.value(out).data() {
            assert!((v + ln2).abs() < 1e-15);
        }
    }

    #[test]
    fn log_softmax_never_overflows() {
        let out = log_softmax_rows(&Tensor::vector(vec![1000.0, 0.0, -1000.0]));
        assert!(out.all_finite());
        assert_eq!(out.data()[0], 0.0);
    }

    #[test]
    fn gather_index_semantics() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let g = tape.gather(x, &[0, 1], &[1, 0]).unwrap();
        assert_eq!(tape.value(g).data(), &[2.0, 3.0]);
        assert!(matches!(
            tape.gather(x, &[2], &[0]),
            Err(TensorError::Index { op: "gather", .. })
        ));
    }

    #[test]
    fn identity_matmul() {
        let a = Tensor::matrix(3, 2, vec![1.0, -2.0, 3.5, 4.0, 0.25, 6.0]).unwrap();
        assert_eq!(Tensor::identity(3).matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn log_softmax_gradient_is_onehot_minus_softmax() {
        let z = vec![0.3, -1.2, 2.0, 0.5];
        let y = 2;
        let mut tape = Tape::new();
        let zv = tape.leaf(Tensor::matrix(1, 4, z.clone()).unwrap());
        let ls = tape.log_softmax(zv);
        let pick = tape.gather(ls, &[0], &[y]).unwrap();
        let root = tape.sum(pick);
        let g = tape.backward(root).unwrap().wrt(zv);
        let p = softmax_rows(&Tensor::vector(z));
        for k in 0..4 {
            let expected = if k == y { 1.0 } else { 0.0 } - p.data()[k];
            assert!((g.data()[k] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarRoot { .. })));
    }

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.leaf(Tensor::vector(vec![5.0]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused).data(), &[0.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let a = tape.scale(x, 2.0);
        let b = tape.exp(x);
        let c = tape.add(a, b).unwrap();
        let g = tape.backward(c).unwrap();
        assert!((g.wrt(x).item() - (2.0 + 3f64.exp())).abs() < 1e-12);
    }

    #[test]
    fn fd_check_on_square() {
        let err = fd_check(|p| p[0] * p[0], &[3.0], &[6.0], 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn fd_check_rejects_bad_step_and_non_finite() {
        assert!(fd_check(|p| p[0], &[1.0], &[1.0], 0.0).is_err());
        assert!(fd_check(|p| p[0].ln(), &[0.0], &[1.0], 1e-5).is_err());
    }
}
