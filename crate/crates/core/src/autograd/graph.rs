//! Tape-style computation graph.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and [`Graph::backward`] is a single reverse sweep that
//! visits every node at most once. Gradients arriving at a node along
//! several paths are summed before the node propagates them further.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels;
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;
const NORMALIZE_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        indices: Vec<usize>,
    },
    Reshape(Var),
    MeanRows(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
        total_weight: f64,
    },
    Mse(Var, Var),
    L1(Var, Var),
    DiagonalContrastive {
        s: Var,
        row_probs: Vec<f64>,
        col_probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Concat { .. } => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::Reshape(_) => "reshape",
            Op::MeanRows(_) => "mean_rows",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Mse(..) => "mse",
            Op::L1(..) => "l1",
            Op::DiagonalContrastive { .. } => "diagonal_contrastive",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation and differentiates it in reverse.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: BTreeMap<ParamId, Var>,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match *t.shape() {
        [m, n] => Ok((m, n)),
        _ => Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: match op {
                "matmul" | "matmul_nt" => "matmul operands must be 2-D",
                _ => "operand must be 2-D",
            },
        }),
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + libm::tanh(u))
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = libm::tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise numerically stable softmax over the last axis.
pub fn softmax_rows(data: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (row, out_row) in data.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &v) in out_row.iter_mut().zip(row) {
            *o = libm::exp(v - max);
            total += *o;
        }
        for o in out_row.iter_mut() {
            *o /= total;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: BTreeMap::new(),
            check_finite: true,
        }
    }

    /// Toggles the NaN/Inf check performed after every forward op.
    pub fn with_finite_check(mut self, enabled: bool) -> Self {
        self.check_finite = enabled;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
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

    /// Inserts a value that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a trainable parameter; repeated calls return the same node so
    /// that every use contributes to one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), true);
        self.params.insert(id, v);
        v
    }

    /// Makes later [`Graph::param`] calls for `id` return `v`, so that a
    /// parameter can be fed from an arbitrary node.
    pub fn bind_param(&mut self, id: ParamId, v: Var) {
        self.params.insert(id, v);
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims(ta, "matmul")?;
        let (k2, n) = matrix_dims(tb, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let out = kernels::matmul(ta.data(), tb.data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims(ta, "matmul_nt")?;
        let (n, k2) = matrix_dims(tb, "matmul_nt")?;
        if k != k2 {
            return Err(mismatch("matmul_nt", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = matrix_dims(ta, "transpose")?;
        let out = kernels::transpose(ta.data(), m, n);
        let rg = self.rg(a);
        self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a), rg)
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(shape, data), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a bias vector to every row of `x` (broadcast over leading axes).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tx.last_dim();
        if tb.len() != n {
            return Err(mismatch("add_bias", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, &b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(x) || self.rg(bias);
        self.push(Tensor::from_parts(shape, data), Op::AddBias(x, bias), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.sum() / t.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = softmax_rows(t.data(), t.last_dim());
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, out), Op::Softmax(x), rg)
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = tx.last_dim();
        if tg.len() != n {
            return Err(mismatch("layer_norm", tx, tg));
        }
        if tb.len() != n {
            return Err(mismatch("layer_norm", tx, tb));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            rstd[r] = s;
            for j in 0..n {
                let h = (row[j] - mean) * s;
                xhat[r * n + j] = h;
                out[r * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        )
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, libm::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, libm::exp, Op::Exp(x))
    }

    /// Concatenates 2-D operands along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or(Error::Empty("concat inputs"))?;
        let (m0, n0) = matrix_dims(self.value(first), "concat")?;
        let mut dims = Vec::with_capacity(xs.len());
        for &v in xs {
            let (m, n) = matrix_dims(self.value(v), "concat")?;
            let ok = match axis {
                0 => n == n0,
                1 => m == m0,
                _ => false,
            };
            if !ok {
                return Err(mismatch("concat", self.value(first), self.value(v)));
            }
            dims.push((m, n));
        }
        let (shape, data) = if axis == 0 {
            let rows: usize = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * n0);
            for &v in xs {
                data.extend_from_slice(self.value(v).data());
            }
            (vec![rows, n0], data)
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(m0 * cols);
            for r in 0..m0 {
                for &v in xs {
                    data.extend_from_slice(self.value(v).row(r));
                }
            }
            (vec![m0, cols], data)
        };
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                inputs: xs.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Columns `start..start + len` of a 2-D operand.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = matrix_dims(t, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::InvalidArgument(alloc::format!(
                "column slice {start}..{} out of range for width {n}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let rg = self.rg(x);
        self.push(
            Tensor::from_parts(vec![m, len], data),
            Op::SliceCols { x, start },
            rg,
        )
    }

    /// Selects rows of a 2-D operand by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = matrix_dims(t, "gather_rows")?;
        if indices.is_empty() {
            return Err(Error::Empty("gather_rows indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::InvalidArgument(alloc::format!(
                "row index {bad} out of range for {m} rows"
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        let rg = self.rg(x);
        self.push(
            Tensor::from_parts(vec![indices.len(), n], data),
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
            rg,
        )
    }

    /// Rows `ids` of an embedding table.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg)
    }

    /// Column means of a 2-D operand as a `[1, n]` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = matrix_dims(t, "mean_rows")?;
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![1, n], out), Op::MeanRows(x), rg)
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.last_dim();
        let mut norms = Vec::with_capacity(t.rows());
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>() + NORMALIZE_EPS);
            for v in row.iter_mut() {
                *v /= norm;
            }
            norms.push(norm);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(
            Tensor::from_parts(shape, out),
            Op::NormalizeRows { x, norms },
            rg,
        )
    }

    /// Mean cross-entropy of row-wise logits against class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let weights = vec![1.0; targets.len()];
        self.weighted_cross_entropy(logits, targets, &weights)
    }

    /// Weighted mean cross-entropy `Σ wᵣ·(−log pᵣ[tᵣ]) / Σ wᵣ`. Rows with
    /// zero weight are ignored entirely.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let t = self.value(logits);
        let v = t.last_dim();
        let rows = t.rows();
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= v) {
            return Err(Error::InvalidArgument(alloc::format!(
                "target class {bad} out of range for {v} logits"
            )));
        }
        let total_weight: f64 = weights.iter().sum();
        if total_weight <= 0.0 {
            return Err(Error::Empty("cross_entropy weights"));
        }
        let probs = softmax_rows(t.data(), v);
        let mut loss = 0.0;
        for r in 0..rows {
            if weights[r] == 0.0 {
                continue;
            }
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|&x| libm::exp(x - max)).sum::<f64>());
            loss += weights[r] * (lse - row[targets[r]]);
        }
        loss /= total_weight;
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                total_weight,
            },
            rg,
        )
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mse", ta, tb));
        }
        let s = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / ta.len() as f64;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(s), Op::Mse(a, b), rg)
    }

    /// Mean of absolute elementwise differences.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("l1", ta, tb));
        }
        let s = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / ta.len() as f64;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(s), Op::L1(a, b), rg)
    }

    /// Symmetric cross-entropy of a square score matrix against its
    /// diagonal: the mean over rows of `lse(row) − sᵢᵢ` and over columns of
    /// `lse(col) − sᵢᵢ`, averaged. Every reduction sums its terms in sorted
    /// order, so a common permutation of rows and columns leaves the value
    /// bit-identical.
    pub fn diagonal_contrastive(&mut self, s: Var) -> Result<Var> {
        let t = self.value(s);
        let (b, n) = matrix_dims(t, "diagonal_contrastive")?;
        if b != n || b == 0 {
            return Err(Error::InvalidShape {
                shape: t.shape().to_vec(),
                reason: "contrastive scores must be a non-empty square matrix",
            });
        }
        let d = t.data();
        let mut row_probs = vec![0.0; b * b];
        let mut col_probs = vec![0.0; b * b];
        let mut terms = Vec::with_capacity(2 * b);
        for i in 0..b {
            let row: Vec<f64> = (0..b).map(|j| d[i * b + j]).collect();
            let lse = sorted_lse(&row);
            for j in 0..b {
                row_probs[i * b + j] = libm::exp(row[j] - lse);
            }
            terms.push(lse - d[i * b + i]);
        }
        for j in 0..b {
            let col: Vec<f64> = (0..b).map(|i| d[i * b + j]).collect();
            let lse = sorted_lse(&col);
            for i in 0..b {
                col_probs[i * b + j] = libm::exp(col[i] - lse);
            }
            terms.push(lse - d[j * b + j]);
        }
        let loss = sorted_sum(terms) / (2 * b) as f64;
        let rg = self.rg(s);
        self.push(
            Tensor::scalar(loss),
            Op::DiagonalContrastive {
                s,
                row_probs,
                col_probs,
            },
            rg,
        )
    }

    /// Gradient accumulated at `v` by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)?
            .as_ref()
            .map(|g| Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone()))
    }

    /// Gradients of every bound parameter, indexed like the store. Parameters
    /// the loss does not depend on get `None`.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Option<Tensor>> {
        let mut out = vec![None; store.len()];
        for (&id, &v) in &self.params {
            out[id.index()] = self.grad(v);
        }
        out
    }

    /// Node bound to parameter `id`, if the forward pass used it.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = &self.nodes[loss.0].value;
        if !lt.is_scalar() || !lt.shape().iter().all(|&d| d == 1) {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };
        let val = |v: Var| &nodes[v.0].value;
        let out = &nodes[i].value;

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                acc(*a, &mut |d| kernels::matmul_nt_acc(g, val(*b).data(), d, m, n, k));
                acc(*b, &mut |d| kernels::matmul_tn_acc(val(*a).data(), g, d, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[0];
                acc(*a, &mut |d| kernels::matmul_acc(g, val(*b).data(), d, m, n, k));
                acc(*b, &mut |d| kernels::matmul_tn_acc(g, val(*a).data(), d, m, n, k));
            }
            Op::Transpose(a) => {
                let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
                let gt = kernels::transpose(g, n, m);
                acc(*a, &mut |d| add_into(d, &gt));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    for (di, gi) in d.iter_mut().zip(g) {
                        *di -= gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |d| {
                    for ((di, gi), bi) in d.iter_mut().zip(g).zip(val(*b).data()) {
                        *di += gi * bi;
                    }
                });
                acc(*b, &mut |d| {
                    for ((di, gi), ai) in d.iter_mut().zip(g).zip(val(*a).data()) {
                        *di += gi * ai;
                    }
                });
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |d| add_into(d, g));
                let n = val(*b).len();
                acc(*b, &mut |d| {
                    for row in g.chunks_exact(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |d| {
                for (di, gi) in d.iter_mut().zip(g) {
                    *di += c * gi;
                }
            }),
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|di| *di += g[0])),
            Op::Mean(x) => {
                let scale = g[0] / val(*x).len() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|di| *di += scale));
            }
            Op::Softmax(x) => {
                let n = out.last_dim();
                acc(*x, &mut |d| {
                    for ((drow, grow), yrow) in d
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(out.data().chunks_exact(n))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((di, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *di += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = out.last_dim();
                let gamma = val(*gain).data();
                acc(*gain, &mut |d| {
                    for (grow, hrow) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for ((di, gi), hi) in d.iter_mut().zip(grow).zip(hrow) {
                            *di += gi * hi;
                        }
                    }
                });
                acc(*bias, &mut |d| {
                    for grow in g.chunks_exact(n) {
                        add_into(d, grow);
                    }
                });
                acc(*x, &mut |d| {
                    let mut dh = vec![0.0; n];
                    for (r, ((drow, grow), hrow)) in d
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(xhat.chunks_exact(n))
                        .enumerate()
                    {
                        for j in 0..n {
                            dh[j] = grow[j] * gamma[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dhh =
                            dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            drow[j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dhh);
                        }
                    }
                });
            }
            Op::Gelu(x) => acc(*x, &mut |d| {
                for ((di, gi), xi) in d.iter_mut().zip(g).zip(val(*x).data()) {
                    *di += gi * gelu_grad(*xi);
                }
            }),
            Op::Relu(x) => acc(*x, &mut |d| {
                for ((di, gi), xi) in d.iter_mut().zip(g).zip(val(*x).data()) {
                    if *xi > 0.0 {
                        *di += gi;
                    }
                }
            }),
            Op::Tanh(x) => acc(*x, &mut |d| {
                for ((di, gi), yi) in d.iter_mut().zip(g).zip(out.data()) {
                    *di += gi * (1.0 - yi * yi);
                }
            }),
            Op::Exp(x) => acc(*x, &mut |d| {
                for ((di, gi), yi) in d.iter_mut().zip(g).zip(out.data()) {
                    *di += gi * yi;
                }
            }),
            Op::Concat { inputs, axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &v in inputs {
                        let len = val(v).len();
                        acc(v, &mut |d| add_into(d, &g[offset..offset + len]));
                        offset += len;
                    }
                } else {
                    let total = out.last_dim();
                    let mut col = 0;
                    for &v in inputs {
                        let w = val(v).last_dim();
                        acc(v, &mut |d| {
                            for (drow, grow) in d.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                                add_into(drow, &grow[col..col + w]);
                            }
                        });
                        col += w;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let n = val(*x).last_dim();
                let w = out.last_dim();
                acc(*x, &mut |d| {
                    for (drow, grow) in d.chunks_exact_mut(n).zip(g.chunks_exact(w)) {
                        add_into(&mut drow[*start..*start + w], grow);
                    }
                });
            }
            Op::GatherRows { x, indices } => {
                let n = val(*x).last_dim();
                acc(*x, &mut |d| {
                    for (grow, &r) in g.chunks_exact(n).zip(indices) {
                        add_into(&mut d[r * n..(r + 1) * n], grow);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::MeanRows(x) => {
                let (m, _) = (val(*x).shape()[0], val(*x).shape()[1]);
                let n = g.len();
                acc(*x, &mut |d| {
                    for drow in d.chunks_exact_mut(n) {
                        for (di, gi) in drow.iter_mut().zip(g) {
                            *di += gi / m as f64;
                        }
                    }
                });
            }
            Op::NormalizeRows { x, norms } => {
                let n = out.last_dim();
                acc(*x, &mut |d| {
                    for (((drow, grow), yrow), norm) in d
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(out.data().chunks_exact(n))
                        .zip(norms)
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((di, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *di += (gi - yi * dot) / norm;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                total_weight,
            } => {
                let v = val(*logits).last_dim();
                acc(*logits, &mut |d| {
                    for (r, drow) in d.chunks_exact_mut(v).enumerate() {
                        let w = weights[r];
                        if w == 0.0 {
                            continue;
                        }
                        let scale = g[0] * w / total_weight;
                        for (j, dj) in drow.iter_mut().enumerate() {
                            let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                            *dj += scale * (probs[r * v + j] - onehot);
                        }
                    }
                });
            }
            Op::DiagonalContrastive {
                s,
                row_probs,
                col_probs,
            } => {
                let b = val(*s).rows();
                let scale = g[0] / (2 * b) as f64;
                acc(*s, &mut |d| {
                    for i in 0..b {
                        for j in 0..b {
                            let k = i * b + j;
                            let diag = if i == j { 2.0 } else { 0.0 };
                            d[k] += scale * (row_probs[k] + col_probs[k] - diag);
                        }
                    }
                });
            }
            Op::Mse(a, b) => {
                let n = val(*a).len() as f64;
                let diff: Vec<f64> = val(*a)
                    .data()
                    .iter()
                    .zip(val(*b).data())
                    .map(|(x, y)| 2.0 * (x - y) * g[0] / n)
                    .collect();
                acc(*a, &mut |d| add_into(d, &diff));
                acc(*b, &mut |d| {
                    for (di, v) in d.iter_mut().zip(&diff) {
                        *di -= v;
                    }
                });
            }
            Op::L1(a, b) => {
                let n = val(*a).len() as f64;
                let sign: Vec<f64> = val(*a)
                    .data()
                    .iter()
                    .zip(val(*b).data())
                    .map(|(x, y)| {
                        let s = if x > y {
                            1.0
                        } else if x < y {
                            -1.0
                        } else {
                            0.0
                        };
                        s * g[0] / n
                    })
                    .collect();
                acc(*a, &mut |d| add_into(d, &sign));
                acc(*b, &mut |d| {
                    for (di, v) in d.iter_mut().zip(&sign) {
                        *di -= v;
                    }
                });
            }
        }
    }
}

#[inline]
fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Log-sum-exp whose value does not depend on the order of `v`.
fn sorted_lse(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + libm::log(sorted_sum(v.iter().map(|x| libm::exp(x - max)).collect()))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
