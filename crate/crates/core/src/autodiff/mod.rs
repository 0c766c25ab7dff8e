//! A small reverse-mode automatic differentiation engine over dense `f64`
//! arrays.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, so node ids are already in topological order and [`Graph::backward`]
//! is a single reverse sweep. Graphs are cheap to build and are rebuilt for
//! every training step.

pub mod kernels;
mod mlp;

pub use mlp::{mlp_apply, MlpHandle, MlpParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm floor used by every cosine similarity in the crate.
pub const NORM_EPS: f64 = 1e-8;

/// Row-major dense array of `f64` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseArray {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl DenseArray {
    /// Validated constructor: dimensions must be positive, their product must
    /// match the value count, and every value must be finite.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) || shape.iter().product::<usize>() != values.len() {
            return Err(Error::InvalidShape {
                shape,
                len: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("DenseArray::new".into()));
        }
        Ok(Self { shape, values })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self { shape, values }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![], vec![value])
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self::from_parts(vec![values.len()], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows.first().ok_or(Error::EmptyInput { op: "from_rows" })?;
        let cols = first.as_ref().len();
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![r.len()],
                });
            }
            values.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element array.
    pub fn item(&self) -> Option<f64> {
        (self.values.len() == 1).then(|| self.values[0])
    }

    /// `(rows, cols)` of a rank-2 array.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Some((r, c)),
            _ => None,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.values[i * cols..(i + 1) * cols]
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.values.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape,
            });
        }
        Ok(Self::from_parts(shape, self.values.clone()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Cosine {
        x: NodeId,
        y: NodeId,
        x_norms: Vec<f64>,
        y_norms: Vec<f64>,
    },
    LogSumExpRows(NodeId),
    Transpose(NodeId),
    Diag(NodeId),
    Reshape(NodeId),
    GatherRows(NodeId, Vec<usize>),
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Cosine { .. } => "cosine",
            Op::LogSumExpRows(_) => "logsumexp_rows",
            Op::Transpose(_) => "transpose",
            Op::Diag(_) => "diag",
            Op::Reshape(_) => "reshape",
            Op::GatherRows(..) => "gather_rows",
        }
    }
}

#[derive(Clone, Debug)]
struct ComputeNode {
    op: Op,
    value: DenseArray,
}

/// Tape of compute nodes. Exclusively owned by one forward/backward pass.
#[derive(Default, Debug)]
pub struct Graph {
    nodes: Vec<ComputeNode>,
}

fn mismatch(op: &'static str, a: &DenseArray, b: &DenseArray) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape.clone(),
        right: b.shape.clone(),
    }
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

    pub fn value(&self, id: NodeId) -> &DenseArray {
        &self.nodes[id.0].value
    }

    pub fn op_tag(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.tag()
    }

    fn push(&mut self, op: Op, value: DenseArray) -> NodeId {
        self.nodes.push(ComputeNode { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Adds an input (parameter or constant). Gradients are reported for
    /// every leaf; the caller decides which ones to apply.
    pub fn leaf(&mut self, value: DenseArray) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((n, k), (k2, m)) = match (av.dims2(), bv.dims2()) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(mismatch("matmul", av, bv)),
        };
        if k != k2 {
            return Err(mismatch("matmul", av, bv));
        }
        let out = kernels::matmul(&av.values, &bv.values, n, k, m);
        Ok(self.push(Op::MatMul(a, b), DenseArray::from_parts(vec![n, m], out)))
    }

    /// Adds a bias vector to every row of a matrix.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(bias));
        match (av.dims2(), bv.shape.as_slice()) {
            (Some((_, m)), &[b]) if b == m => {}
            _ => return Err(mismatch("add_bias", av, bv)),
        }
        let mut out = av.values.clone();
        kernels::add_bias_relu(&mut out, &bv.values, false);
        let shape = av.shape.clone();
        Ok(self.push(Op::AddBias(a, bias), DenseArray::from_parts(shape, out)))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let out = DenseArray::from_parts(av.shape.clone(), av.values.iter().map(|v| v.max(0.0)).collect());
        self.push(Op::Relu(a), out)
    }

    fn zip_with(&mut self, a: NodeId, b: NodeId, op: Op, tag: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(mismatch(tag, av, bv));
        }
        let out = av.values.iter().zip(&bv.values).map(|(&x, &y)| f(x, y)).collect();
        let shape = av.shape.clone();
        Ok(self.push(op, DenseArray::from_parts(shape, out)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let av = self.value(a);
        let out = DenseArray::from_parts(av.shape.clone(), av.values.iter().map(|v| v * c).collect());
        self.push(Op::Scale(a, c), out)
    }

    /// Sum of all elements, as a rank-0 array.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).values.iter().sum();
        self.push(Op::Sum(a), DenseArray::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Pairwise cosine similarity between the rows of two matrices
    /// (`n x k` and `m x k`), giving an `n x m` matrix.
    pub fn cosine_matrix(&mut self, x: NodeId, y: NodeId) -> Result<NodeId> {
        let (xv, yv) = (self.value(x), self.value(y));
        let ((n, k), (m, k2)) = match (xv.dims2(), yv.dims2()) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(mismatch("cosine_matrix", xv, yv)),
        };
        if k != k2 {
            return Err(mismatch("cosine_matrix", xv, yv));
        }
        let x_norms = kernels::row_norms(&xv.values, k);
        let y_norms = kernels::row_norms(&yv.values, k);
        let out = kernels::cosine_matrix_with_norms(&xv.values, &yv.values, k, &x_norms, &y_norms);
        Ok(self.push(
            Op::Cosine {
                x,
                y,
                x_norms,
                y_norms,
            },
            DenseArray::from_parts(vec![n, m], out),
        ))
    }

    /// Cosine similarity of two equal-length vectors, as a rank-0 node.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 1 || av.shape != bv.shape {
            return Err(mismatch("cosine_similarity", av, bv));
        }
        let k = av.len();
        let a2 = self.reshape(a, vec![1, k])?;
        let b2 = self.reshape(b, vec![1, k])?;
        let c = self.cosine_matrix(a2, b2)?;
        self.reshape(c, vec![])
    }

    /// Row-wise log-sum-exp of an `n x m` matrix, giving a length-`n` vector.
    pub fn logsumexp_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let (_, m) = av.dims2().ok_or_else(|| Error::ShapeMismatch {
            op: "logsumexp_rows",
            left: av.shape.clone(),
            right: vec![],
        })?;
        let out: Vec<f64> = av.values.chunks(m).map(kernels::logsumexp).collect();
        Ok(self.push(Op::LogSumExpRows(a), DenseArray::vector(out)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let (n, m) = av.dims2().ok_or_else(|| Error::ShapeMismatch {
            op: "transpose",
            left: av.shape.clone(),
            right: vec![],
        })?;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = av.values[i * m + j];
            }
        }
        Ok(self.push(Op::Transpose(a), DenseArray::from_parts(vec![m, n], out)))
    }

    pub fn diag(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let n = match av.dims2() {
            Some((n, m)) if n == m => n,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "diag",
                    left: av.shape.clone(),
                    right: vec![],
                })
            }
        };
        let out = (0..n).map(|i| av.values[i * n + i]).collect();
        Ok(self.push(Op::Diag(a), DenseArray::vector(out)))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a).reshaped(shape)?;
        Ok(self.push(Op::Reshape(a), v))
    }

    /// Selects rows of a matrix by index (rows may repeat).
    pub fn gather_rows(&mut self, table: NodeId, rows: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        let (n, k) = tv.dims2().ok_or_else(|| Error::ShapeMismatch {
            op: "gather_rows",
            left: tv.shape.clone(),
            right: vec![],
        })?;
        if rows.is_empty() {
            return Err(Error::EmptyInput { op: "gather_rows" });
        }
        let mut out = Vec::with_capacity(rows.len() * k);
        for &r in rows {
            if r >= n {
                return Err(Error::InvalidArgument(format!("row {r} out of range for {n} rows")));
            }
            out.extend_from_slice(tv.row(r));
        }
        let value = DenseArray::from_parts(vec![rows.len(), k], out);
        Ok(self.push(Op::GatherRows(table, rows.to_vec()), value))
    }

    /// Reverse sweep from a scalar root. Gradients are freshly zeroed on
    /// every call, so a graph may be differentiated more than once.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (n, k) = av.dims2().unwrap();
                    let m = bv.shape[1];
                    // dA = G Bᵀ, dB = Aᵀ G
                    let da = kernels::matmul_nt(&g, &bv.values, n, m, k);
                    let db = kernels::matmul_tn(&av.values, &g, n, k, m);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddBias(a, b) => {
                    let m = self.value(*b).len();
                    let mut db = vec![0.0; m];
                    for row in g.chunks(m) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, db);
                }
                Op::Relu(a) => {
                    let d = node
                        .value
                        .values
                        .iter()
                        .zip(&g)
                        .map(|(&out, &gv)| if out > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, d);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.iter().map(|v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = g.iter().zip(&bv.values).map(|(x, y)| x * y).collect();
                    let db = g.iter().zip(&av.values).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, g.iter().map(|v| v * c).collect());
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    accumulate(&mut grads, *a, vec![g[0]; n]);
                }
                Op::Cosine {
                    x,
                    y,
                    x_norms,
                    y_norms,
                } => {
                    let (dx, dy) = cosine_backward(
                        &self.value(*x).values,
                        &self.value(*y).values,
                        x_norms,
                        y_norms,
                        &node.value.values,
                        &g,
                    );
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *y, dy);
                }
                Op::LogSumExpRows(a) => {
                    let av = self.value(*a);
                    let m = av.shape[1];
                    let mut d = vec![0.0; av.len()];
                    for (i, row) in av.values.chunks(m).enumerate() {
                        let lse = node.value.values[i];
                        for (j, v) in row.iter().enumerate() {
                            d[i * m + j] = g[i] * (v - lse).exp();
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Transpose(a) => {
                    let (n, m) = self.value(*a).dims2().unwrap();
                    let mut d = vec![0.0; n * m];
                    for i in 0..n {
                        for j in 0..m {
                            d[i * m + j] = g[j * n + i];
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Diag(a) => {
                    let n = g.len();
                    let mut d = vec![0.0; n * n];
                    for i in 0..n {
                        d[i * n + i] = g[i];
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Reshape(a) => accumulate(&mut grads, *a, g.clone()),
                Op::GatherRows(t, rows) => {
                    let tv = self.value(*t);
                    let k = tv.shape[1];
                    let mut d = vec![0.0; tv.len()];
                    for (out_row, &r) in rows.iter().enumerate() {
                        for c in 0..k {
                            d[r * k + c] += g[out_row * k + c];
                        }
                    }
                    accumulate(&mut grads, *t, d);
                }
            }
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
            grads,
        })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, contribution: Vec<f64>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn cosine_backward(
    x: &[f64],
    y: &[f64],
    x_norms: &[f64],
    y_norms: &[f64],
    c: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = x_norms.len();
    let m = y_norms.len();
    let k = x.len() / n;
    let mut dx = vec![0.0; x.len()];
    let mut dy = vec![0.0; y.len()];
    for i in 0..n {
        let xi = &x[i * k..(i + 1) * k];
        let dxn = x_norms[i].max(NORM_EPS);
        let x_active = x_norms[i] > NORM_EPS;
        for j in 0..m {
            let gij = g[i * m + j];
            if gij == 0.0 {
                continue;
            }
            let yj = &y[j * k..(j + 1) * k];
            let dyn_ = y_norms[j].max(NORM_EPS);
            let y_active = y_norms[j] > NORM_EPS;
            let cij = c[i * m + j];
            let inv = gij / (dxn * dyn_);
            // d/dx <x,y>/(|x||y|) = y/(|x||y|) - c x/|x|^2, and symmetrically for y;
            // below the norm floor the denominator is constant.
            let cx = if x_active { gij * cij / (dxn * dxn) } else { 0.0 };
            let cy = if y_active { gij * cij / (dyn_ * dyn_) } else { 0.0 };
            for p in 0..k {
                dx[i * k + p] += inv * yj[p] - cx * xi[p];
                dy[j * k + p] += inv * xi[p] - cy * yj[p];
            }
        }
    }
    (dx, dy)
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `id`; zeros when no path exists.
    pub fn get(&self, id: NodeId) -> DenseArray {
        let shape = self.shapes[id.0].clone();
        match &self.grads[id.0] {
            Some(g) => DenseArray::from_parts(shape, g.clone()),
            None => DenseArray::zeros(&shape),
        }
    }

    pub fn take(&mut self, id: NodeId) -> DenseArray {
        let shape = self.shapes[id.0].clone();
        match self.grads[id.0].take() {
            Some(g) => DenseArray::from_parts(shape, g),
            None => DenseArray::zeros(&shape),
        }
    }
}

/// ε-stabilised cosine similarity of two rank-1 arrays.
pub fn cosine_similarity(a: &DenseArray, b: &DenseArray) -> Result<f64> {
    if a.rank() != 1 || a.shape != b.shape {
        return Err(mismatch("cosine_similarity", a, b));
    }
    Ok(kernels::cosine(&a.values, &b.values))
}

/// Numerically stable `ln Σ exp(x)`.
pub fn logsumexp(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::EmptyInput { op: "logsumexp" });
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("logsumexp input".into()));
    }
    Ok(kernels::logsumexp(xs))
}

/// Compares an analytic gradient against central differences.
///
/// `f` returns the function value and its analytic gradient at a point.
/// Returns the largest per-coordinate relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check<F>(f: F, theta: &DenseArray, step: f64) -> Result<f64>
where
    F: Fn(&DenseArray) -> Result<(f64, DenseArray)>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let (value, analytic) = f(theta)?;
    if !value.is_finite() || !analytic.is_finite() {
        return Err(Error::NonFinite("finite_difference_check at theta".into()));
    }
    if analytic.shape != theta.shape {
        return Err(mismatch("finite_difference_check", &analytic, theta));
    }
    let mut probe = theta.clone();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        let orig = theta.values[i];
        probe.values[i] = orig + step;
        let (up, _) = f(&probe)?;
        probe.values[i] = orig - step;
        let (down, _) = f(&probe)?;
        probe.values[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("finite_difference_check at coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.values[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
