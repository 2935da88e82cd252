//! Dense f64 tensors on a reverse-mode autodiff tape.
//!
//! A [`Tape`] owns every tensor created during one forward pass. Ops append
//! nodes and record their parents; [`Tape::backward`] walks the nodes in
//! reverse creation order, so tape construction and backward are both linear
//! in the number of op nodes. All reductions run in a fixed sequential order
//! and no op broadcasts shapes implicitly, which keeps results bitwise
//! reproducible across runs.
//!
//! Repeated `backward` calls accumulate into `grad`; the caller owns zeroing
//! (training loops simply build a fresh tape per step).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected 2-d tensor, got {shape:?}")]
    NotTwoDim { op: &'static str, shape: Vec<usize> },
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("{0}: non-finite input")]
    NonFinite(&'static str),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("{op}: index {index} out of range {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Plain row-major matrix used outside the tape (traces, diagnostics).
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    GatherRows(usize, Vec<usize>),
    GatherPerRow(usize, Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    Sqrt(usize),
    Softplus(usize),
    Sum(usize),
    SumRows(usize),
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Single-threaded computation tape. Independent tapes may live on separate
/// threads; one tape must never be shared.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn dims2(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [m, n] => Ok((*m, *n)),
        _ => Err(TensorError::NotTwoDim {
            op,
            shape: shape.to_vec(),
        }),
    }
}

/// C[m,n] += A[m,k] * B[k,n], loops ordered for contiguous access.
fn matmul_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

/// C[m,n] += A[m,k] * B[n,k]^T  (i.e. A times B-transposed without forming it).
fn matmul_bt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            crow[j] += s;
        }
    }
}

/// C[k,n] += A[m,k]^T * B[m,n].
fn matmul_at_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

fn gelu_val(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softplus_val(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid_val(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(data.len(), numel(&shape));
        self.nodes.push(Node {
            data,
            shape,
            grad: None,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn req(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// New leaf; `requires_grad` marks it as a gradient target.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> TensorId {
        assert_eq!(
            data.len(),
            numel(&shape),
            "leaf data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        self.push(data, shape, requires_grad, Op::Leaf)
    }

    /// Constant leaf (never receives gradient).
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> TensorId {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.constant(vec![v], vec![1])
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matrix(&self, id: TensorId) -> Matrix {
        let (m, n) = dims2(self.shape(id), "matrix").expect("matrix() needs a 2-d tensor");
        Matrix::from_vec(m, n, self.nodes[id.0].data.clone())
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("add", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.req(a) || self.req(b);
        Ok(self.push(data, shape, rg, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("sub", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.req(a) || self.req(b);
        Ok(self.push(data, shape, rg, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.req(a) || self.req(b);
        Ok(self.push(data, shape, rg, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.req(a);
        self.push(data, shape, rg, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x + c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.req(a);
        self.push(data, shape, rg, Op::AddScalar(a.0))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = dims2(self.shape(a), "matmul")?;
        let (k2, n) = dims2(self.shape(b), "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut data = vec![0.0; m * n];
        matmul_acc(&mut data, &self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let rg = self.req(a) || self.req(b);
        Ok(self.push(data, vec![m, n], rg, Op::MatMul(a.0, b.0)))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = dims2(self.shape(a), "transpose")?;
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.req(a);
        Ok(self.push(data, vec![n, m], rg, Op::Transpose(a.0)))
    }

    pub fn reshape(&mut self, a: TensorId, new_shape: Vec<usize>) -> Result<TensorId> {
        if numel(&new_shape) != self.nodes[a.0].data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: new_shape,
            });
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.req(a);
        Ok(self.push(data, new_shape, rg, Op::Reshape(a.0)))
    }

    /// Embedding lookup: rows of `table` selected by `ids`. Gradient
    /// scatter-adds into the selected rows.
    pub fn gather_rows(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (v, d) = dims2(self.shape(table), "gather_rows")?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    bound: v,
                });
            }
            data.extend_from_slice(&self.nodes[table.0].data[id * d..(id + 1) * d]);
        }
        let rg = self.req(table);
        Ok(self.push(data, vec![ids.len(), d], rg, Op::GatherRows(table.0, ids.to_vec())))
    }

    /// Picks one column per row: `out[i] = x[i, cols[i]]`, shape `[m, 1]`.
    pub fn gather_per_row(&mut self, x: TensorId, cols: &[usize]) -> Result<TensorId> {
        let (m, n) = dims2(self.shape(x), "gather_per_row")?;
        if cols.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "gather_per_row",
                lhs: vec![m, n],
                rhs: vec![cols.len()],
            });
        }
        let mut data = Vec::with_capacity(m);
        for (i, &c) in cols.iter().enumerate() {
            if c >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_per_row",
                    index: c,
                    bound: n,
                });
            }
            data.push(self.nodes[x.0].data[i * n + c]);
        }
        let rg = self.req(x);
        Ok(self.push(data, vec![m, 1], rg, Op::GatherPerRow(x.0, cols.to_vec())))
    }

    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (m, n) = dims2(self.shape(x), "slice_rows")?;
        if start + len > m {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                bound: m,
            });
        }
        let data = self.nodes[x.0].data[start * n..(start + len) * n].to_vec();
        let rg = self.req(x);
        Ok(self.push(data, vec![len, n], rg, Op::SliceRows(x.0, start)))
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (m, n) = dims2(self.shape(x), "slice_cols")?;
        if start + len > n {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: n,
            });
        }
        let src = &self.nodes[x.0].data;
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let rg = self.req(x);
        Ok(self.push(data, vec![m, len], rg, Op::SliceCols(x.0, start)))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        assert!(!parts.is_empty(), "concat_cols needs at least one input");
        let (m, _) = dims2(self.shape(parts[0]), "concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (mp, np) = dims2(self.shape(p), "concat_cols")?;
            if mp != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            total += np;
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let np = self.nodes[p.0].shape[1];
                data.extend_from_slice(&self.nodes[p.0].data[i * np..(i + 1) * np]);
            }
        }
        let rg = parts.iter().any(|&p| self.req(p));
        Ok(self.push(
            data,
            vec![m, total],
            rg,
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
        ))
    }

    /// Row-wise softmax with per-row max subtraction. `-inf` entries are
    /// permitted (they produce exact zeros, used for causal masking); NaN or
    /// `+inf` are rejected, as is a row of all `-inf`.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = dims2(self.shape(x), "softmax_rows")?;
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mut mx = f64::NEG_INFINITY;
            for &v in row {
                if v.is_nan() || v == f64::INFINITY {
                    return Err(TensorError::NonFinite("softmax_rows"));
                }
                mx = mx.max(v);
            }
            if mx == f64::NEG_INFINITY {
                return Err(TensorError::Degenerate(format!(
                    "softmax_rows: row {i} has no finite entry"
                )));
            }
            let out = &mut data[i * n..(i + 1) * n];
            let mut s = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                let e = (v - mx).exp();
                *o = e;
                s += e;
            }
            for o in out.iter_mut() {
                *o /= s;
            }
        }
        let rg = self.req(x);
        Ok(self.push(data, vec![m, n], rg, Op::SoftmaxRows(x.0)))
    }

    /// Row-wise log-softmax (same domain rules as [`Tape::softmax_rows`]).
    pub fn log_softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = dims2(self.shape(x), "log_softmax_rows")?;
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mut mx = f64::NEG_INFINITY;
            for &v in row {
                if v.is_nan() || v == f64::INFINITY {
                    return Err(TensorError::NonFinite("log_softmax_rows"));
                }
                mx = mx.max(v);
            }
            if mx == f64::NEG_INFINITY {
                return Err(TensorError::Degenerate(format!(
                    "log_softmax_rows: row {i} has no finite entry"
                )));
            }
            let mut s = 0.0;
            for &v in row {
                s += (v - mx).exp();
            }
            let lse = mx + s.ln();
            for (o, &v) in data[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let rg = self.req(x);
        Ok(self.push(data, vec![m, n], rg, Op::LogSoftmaxRows(x.0)))
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| gelu_val(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.req(x);
        self.push(data, shape, rg, Op::Gelu(x.0))
    }

    /// Row-wise layer normalization with affine parameters over the last
    /// dimension: `y = gamma * (x - mean) / sqrt(var + eps) + beta`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let (m, n) = dims2(self.shape(x), "layer_norm")?;
        if self.nodes[gamma.0].data.len() != n || self.nodes[beta.0].data.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: vec![m, n],
                rhs: self.nodes[gamma.0].shape.clone(),
            });
        }
        let src = &self.nodes[x.0].data;
        let g = &self.nodes[gamma.0].data;
        let b = &self.nodes[beta.0].data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                data[i * n + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let rg = self.req(x) || self.req(gamma) || self.req(beta);
        Ok(self.push(
            data,
            vec![m, n],
            rg,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
        ))
    }

    /// Elementwise square root; inputs must be nonnegative (and positive
    /// wherever a gradient is needed).
    pub fn sqrt(&mut self, x: TensorId) -> Result<TensorId> {
        if self.nodes[x.0].data.iter().any(|&v| v < 0.0 || v.is_nan()) {
            return Err(TensorError::NonFinite("sqrt"));
        }
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v.sqrt()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.req(x);
        Ok(self.push(data, shape, rg, Op::Sqrt(x.0)))
    }

    /// Elementwise `log(1 + exp(x))`, computed overflow-free.
    pub fn softplus(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| softplus_val(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.req(x);
        self.push(data, shape, rg, Op::Softplus(x.0))
    }

    /// Sum of all entries, sequential order, shape `[1]`.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.req(x);
        self.push(vec![s], vec![1], rg, Op::Sum(x.0))
    }

    /// Per-row sums of a 2-d tensor, shape `[m, 1]`.
    pub fn sum_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = dims2(self.shape(x), "sum_rows")?;
        let src = &self.nodes[x.0].data;
        let data: Vec<f64> = (0..m).map(|i| src[i * n..(i + 1) * n].iter().sum()).collect();
        let rg = self.req(x);
        Ok(self.push(data, vec![m, 1], rg, Op::SumRows(x.0)))
    }

    /// Mean cross-entropy of `logits` rows against integer `targets`, taken
    /// over unmasked positions. Targets at masked positions are ignored.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<TensorId> {
        let (m, n) = dims2(self.shape(logits), "cross_entropy")?;
        if targets.len() != m || mask.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![m, n],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let active = mask.iter().filter(|&&b| b).count();
        if active == 0 {
            return Err(TensorError::Degenerate(
                "cross_entropy: every position is masked".into(),
            ));
        }
        // Masked target ids may be arbitrary; clamp them to a valid column so
        // only unmasked ids are validated.
        let mut cols = Vec::with_capacity(m);
        for i in 0..m {
            if mask[i] {
                if targets[i] >= n {
                    return Err(TensorError::IndexOutOfRange {
                        op: "cross_entropy",
                        index: targets[i],
                        bound: n,
                    });
                }
                cols.push(targets[i]);
            } else {
                cols.push(0);
            }
        }
        let lsm = self.log_softmax_rows(logits)?;
        let picked = self.gather_per_row(lsm, &cols)?;
        let mvec: Vec<f64> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let mconst = self.constant(mvec, vec![m, 1]);
        let masked = self.mul(picked, mconst)?;
        let total = self.sum(masked);
        Ok(self.scale(total, -1.0 / active as f64))
    }

    /// Reverse-mode sweep from a scalar root. Gradients of this pass are
    /// accumulated into each node's `grad`, so calling twice doubles them.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.nodes[root.0].data.len() != 1 {
            return Err(TensorError::NonScalarRoot(self.nodes[root.0].shape.clone()));
        }
        let n_nodes = self.nodes.len();
        let mut pass: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.data.len()]).collect();
        pass[root.0][0] = 1.0;

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if pass[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let g = std::mem::take(&mut pass[i]);
                    for (dst, &gv) in pass[a].iter_mut().zip(&g) {
                        *dst += gv;
                    }
                    for (dst, &gv) in pass[b].iter_mut().zip(&g) {
                        *dst += gv;
                    }
                    pass[i] = g;
                }
                Op::Sub(a, b) => {
                    let g = std::mem::take(&mut pass[i]);
                    for (dst, &gv) in pass[a].iter_mut().zip(&g) {
                        *dst += gv;
                    }
                    for (dst, &gv) in pass[b].iter_mut().zip(&g) {
                        *dst -= gv;
                    }
                    pass[i] = g;
                }
                Op::Mul(a, b) => {
                    let g = std::mem::take(&mut pass[i]);
                    for j in 0..g.len() {
                        let (da, db) = (self.nodes[b].data[j] * g[j], self.nodes[a].data[j] * g[j]);
                        pass[a][j] += da;
                        pass[b][j] += db;
                    }
                    pass[i] = g;
                }
                Op::Scale(a, c) => {
                    let g = std::mem::take(&mut pass[i]);
                    for (dst, &gv) in pass[a].iter_mut().zip(&g) {
                        *dst += c * gv;
                    }
                    pass[i] = g;
                }
                Op::AddScalar(a) => {
                    let g = std::mem::take(&mut pass[i]);
                    for (dst, &gv) in pass[a].iter_mut().zip(&g) {
                        *dst += gv;
                    }
                    pass[i] = g;
                }
                Op::MatMul(a, b) => {
                    let g = std::mem::take(&mut pass[i]);
                    let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                    let n = self.nodes[b].shape[1];
                    matmul_bt_acc(&mut pass[a], &g, &self.nodes[b].data, m, n, k);
                    matmul_at_acc(&mut pass[b], &self.nodes[a].data, &g, m, k, n);
                    pass[i] = g;
                }
                Op::Transpose(a) => {
                    let g = std::mem::take(&mut pass[i]);
                    let (n, m) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    for r in 0..n {
                        for c in 0..m {
                            pass[a][c * n + r] += g[r * m + c];
                        }
                    }
                    pass[i] = g;
                }
                Op::Reshape(a) => {
                    let g = std::mem::take(&mut pass[i]);
                    for (dst, &gv) in pass[a].iter_mut().zip(&g) {
                        *dst += gv;
                    }
                    pass[i] = g;
                }
                Op::GatherRows(a, ref ids) => {
                    let g = std::mem::take(&mut pass[i]);
                    let d = self.nodes[a].shape[1];
                    for (t, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            pass[a][id * d + j] += g[t * d + j];
                        }
                    }
                    pass[i] = g;
                }
                Op::GatherPerRow(a, ref cols) => {
                    let g = std::mem::take(&mut pass[i]);
                    let n = self.nodes[a].shape[1];
                    for (r, &c) in cols.iter().enumerate() {
                        pass[a][r * n + c] += g[r];
                    }
                    pass[i] = g;
                }
                Op::SliceRows(a, start) => {
                    let g = std::mem::take(&mut pass[i]);
                    let n = self.nodes[a].shape[1];
                    for (j, &gv) in g.iter().enumerate() {
                        pass[a][start * n + j] += gv;
                    }
                    pass[i] = g;
                }
                Op::SliceCols(a, start) => {
                    let g = std::mem::take(&mut pass[i]);
                    let n = self.nodes[a].shape[1];
                    let (m, w) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    for r in 0..m {
                        for c in 0..w {
                            pass[a][r * n + start + c] += g[r * w + c];
                        }
                    }
                    pass[i] = g;
                }
                Op::ConcatCols(ref parts) => {
                    let g = std::mem::take(&mut pass[i]);
                    let m = self.nodes[i].shape[0];
                    let total = self.nodes[i].shape[1];
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p].shape[1];
                        for r in 0..m {
                            for c in 0..w {
                                pass[p][r * w + c] += g[r * total + offset + c];
                            }
                        }
                        offset += w;
                    }
                    pass[i] = g;
                }
                Op::SoftmaxRows(a) => {
                    let g = std::mem::take(&mut pass[i]);
                    let (m, n) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let y = &self.nodes[i].data;
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        for c in 0..n {
                            pass[a][r * n + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                    pass[i] = g;
                }
                Op::LogSoftmaxRows(a) => {
                    let g = std::mem::take(&mut pass[i]);
                    let (m, n) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let y = &self.nodes[i].data;
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let gsum: f64 = gr.iter().sum();
                        for c in 0..n {
                            let p = y[r * n + c].exp();
                            pass[a][r * n + c] += gr[c] - p * gsum;
                        }
                    }
                    pass[i] = g;
                }
                Op::Gelu(a) => {
                    let g = std::mem::take(&mut pass[i]);
                    for (j, &gv) in g.iter().enumerate() {
                        pass[a][j] += gv * gelu_grad(self.nodes[a].data[j]);
                    }
                    pass[i] = g;
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let g = std::mem::take(&mut pass[i]);
                    let (m, n) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let xd = &self.nodes[x].data;
                    let gd = &self.nodes[gamma].data;
                    for r in 0..m {
                        let row = &xd[r * n..(r + 1) * n];
                        let mean = row.iter().sum::<f64>() / n as f64;
                        let var =
                            row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gr = &g[r * n..(r + 1) * n];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for c in 0..n {
                            let xhat = (row[c] - mean) * inv;
                            let dxhat = gr[c] * gd[c];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                            pass[gamma][c] += gr[c] * xhat;
                            pass[beta][c] += gr[c];
                        }
                        for c in 0..n {
                            let xhat = (row[c] - mean) * inv;
                            let dxhat = gr[c] * gd[c];
                            pass[x][r * n + c] += inv
                                * (dxhat - sum_dxhat / n as f64 - xhat * sum_dxhat_xhat / n as f64);
                        }
                    }
                    pass[i] = g;
                }
                Op::Sqrt(a) => {
                    let g = std::mem::take(&mut pass[i]);
                    for (j, &gv) in g.iter().enumerate() {
                        pass[a][j] += gv * 0.5 / self.nodes[i].data[j];
                    }
                    pass[i] = g;
                }
                Op::Softplus(a) => {
                    let g = std::mem::take(&mut pass[i]);
                    for (j, &gv) in g.iter().enumerate() {
                        pass[a][j] += gv * sigmoid_val(self.nodes[a].data[j]);
                    }
                    pass[i] = g;
                }
                Op::Sum(a) => {
                    let g0 = pass[i][0];
                    for dst in pass[a].iter_mut() {
                        *dst += g0;
                    }
                }
                Op::SumRows(a) => {
                    let g = std::mem::take(&mut pass[i]);
                    let n = self.nodes[a].shape[1];
                    for (r, &gv) in g.iter().enumerate() {
                        for c in 0..n {
                            pass[a][r * n + c] += gv;
                        }
                    }
                    pass[i] = g;
                }
            }
        }

        for i in 0..n_nodes {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let len = self.nodes[i].data.len();
            let grad = self.nodes[i].grad.get_or_insert_with(|| vec![0.0; len]);
            for (dst, &gv) in grad.iter_mut().zip(&pass[i]) {
                *dst += gv;
            }
        }
        Ok(())
    }
}

/// Finite-difference utilities; independent of the tape's backward pass and
/// shared by unit and acceptance tests.
pub mod gradcheck {
    /// Central finite difference of a scalar function of one coordinate.
    pub fn central_diff<F: FnMut(f64) -> f64>(x0: f64, h: f64, mut f: F) -> f64 {
        (f(x0 + h) - f(x0 - h)) / (2.0 * h)
    }

    /// Relative error with an absolute floor, suitable for gradients that may
    /// legitimately be near zero.
    pub fn rel_err(got: f64, want: f64) -> f64 {
        (got - want).abs() / want.abs().max(got.abs()).max(1e-6)
    }
}
