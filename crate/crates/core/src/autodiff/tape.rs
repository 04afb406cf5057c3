use std::fmt;
use std::str::FromStr;

use super::tensor::{gemm_nn, gemm_nt, gemm_tn, gemm_view, View};
use super::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation families, used to name ops in errors and for fault injection
/// in gradient self-checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    MatMulNt,
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    MulScalar,
    AddScalar,
    SubScalar,
    AddRow,
    Relu,
    Tanh,
    Sum,
    Mean,
    Softmax,
    LayerNorm,
    SliceCols,
    SliceRows,
    ConcatCols,
    ConcatRows,
    Attention,
}

impl OpKind {
    pub const ALL: [OpKind; 23] = [
        OpKind::MatMul,
        OpKind::MatMulNt,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Scale,
        OpKind::MulScalar,
        OpKind::AddScalar,
        OpKind::SubScalar,
        OpKind::AddRow,
        OpKind::Relu,
        OpKind::Tanh,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::SliceCols,
        OpKind::SliceRows,
        OpKind::ConcatCols,
        OpKind::ConcatRows,
        OpKind::Attention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::MatMulNt => "matmul_nt",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale => "scale",
            OpKind::MulScalar => "mul_scalar",
            OpKind::AddScalar => "add_scalar",
            OpKind::SubScalar => "sub_scalar",
            OpKind::AddRow => "add_row",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::SliceCols => "slice_cols",
            OpKind::SliceRows => "slice_rows",
            OpKind::ConcatCols => "concat_cols",
            OpKind::ConcatRows => "concat_rows",
            OpKind::Attention => "attention",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown op '{s}'"))
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    AddScalar(Var, Var),
    SubScalar(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    Tanh(Var),
    Sum(Var),
    Mean(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        /// Softmax weights, one `q_len × kv_len` block per (block, head).
        weights: Vec<f64>,
    },
}

/// Layout of an [`Tape::attention`] call.
#[derive(Debug, Clone, Copy)]
struct AttentionShape {
    blocks: usize,
    heads: usize,
    q_len: usize,
    kv_len: usize,
    d: usize,
}

impl AttentionShape {
    fn dh(&self) -> usize {
        self.d / self.heads
    }

    /// Columns of head `h` in block `b` of a `len`-row-per-block input.
    fn head(&self, b: usize, h: usize, len: usize) -> View {
        View::strided(b * len * self.d + h * self.dh(), len, self.dh(), self.d)
    }

    fn weights(&self, b: usize, h: usize) -> View {
        View::dense((b * self.heads + h) * self.q_len * self.kv_len, self.q_len, self.kv_len)
    }
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulNt(..) => OpKind::MatMulNt,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Scale(..) => OpKind::Scale,
            Op::MulScalar(..) => OpKind::MulScalar,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::SubScalar(..) => OpKind::SubScalar,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Relu(..) => OpKind::Relu,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::Attention { .. } => OpKind::Attention,
        })
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order and replays them backwards.
///
/// Nodes are appended as they are computed, so inputs always precede their
/// consumers. Gradients are only propagated through nodes that depend on a
/// leaf registered with `requires_grad`.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    fault: Option<OpKind>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Multiplies the upstream gradient of every `kind` op by 1.5 during
    /// backward. Only useful to prove that a gradient check can fail.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated for `v` by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Clears gradients so backward may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var, TensorError> {
        let kind = op.kind().expect("non-leaf op");
        if !value.is_finite() {
            return Err(TensorError::NonFinite(kind.name()));
        }
        let requires_grad = inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::Rank {
                op,
                expected: 2,
                shape: s.to_vec(),
            });
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn scalar_operand(&self, op: &'static str, a: Var, s: Var) -> Result<(), TensorError> {
        if self.value(s).numel() != 1 {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(s).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.matrix_dims("matmul_nt", a)?;
        let (n, k2) = self.matrix_dims("matmul_nt", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                left: vec![m, k],
                right: vec![n, k2],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (m, n) = self.matrix_dims("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a))
    }

    fn zip_with(
        &mut self,
        op: Op,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, TensorError> {
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with(Op::Add(a, b), "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with(Op::Sub(a, b), "sub", a, b, |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with(Op::Mul(a, b), "mul", a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with(Op::Div(a, b), "div", a, b, |x, y| x / y)
    }

    /// Multiplication by a fixed constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    /// `a * s` where `s` is a one-element tensor on the tape.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        self.scalar_operand("mul_scalar", a, s)?;
        let c = self.value(s).item();
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::MulScalar(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        self.scalar_operand("add_scalar", a, s)?;
        let c = self.value(s).item();
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a, s))
    }

    pub fn sub_scalar(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        self.scalar_operand("sub_scalar", a, s)?;
        let c = self.value(s).item();
        let out = self.value(a).map(|x| x - c);
        self.push(out, Op::SubScalar(a, s))
    }

    /// Adds a `[d]` bias to every row of a `[T×d]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (t, d) = self.matrix_dims("add_row", x)?;
        if self.value(bias).numel() != d || self.value(bias).rank() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: vec![t, d],
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(d) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        self.push(Tensor::new(vec![t, d], out)?, Op::AddRow(x, bias))
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let v = self.value(x);
        if axis >= v.rank() {
            return Err(TensorError::AxisOutOfRange {
                op: "softmax",
                axis,
                rank: v.rank(),
            });
        }
        let (outer, len, inner) = axis_split(v.shape(), axis);
        let src = v.data();
        let mut out = vec![0.0; src.len()];
        if inner == 1 {
            // Contiguous rows: the common case, kept free of index arithmetic.
            for (row, dst) in src.chunks_exact(len).zip(out.chunks_exact_mut(len)) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (o, &x) in dst.iter_mut().zip(row) {
                    *o = (x - max).exp();
                    total += *o;
                }
                for o in dst.iter_mut() {
                    *o /= total;
                }
            }
            let out = Tensor::new(v.shape().to_vec(), out)?;
            return self.push(out, Op::Softmax { x, axis });
        }
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| src[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for a in 0..len {
                    let e = (src[idx(a)] - max).exp();
                    out[idx(a)] = e;
                    total += e;
                }
                for a in 0..len {
                    out[idx(a)] /= total;
                }
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        self.push(out, Op::Softmax { x, axis })
    }

    /// Per-row normalisation with biased variance, then `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        if eps <= 0.0 {
            return Err(TensorError::InvalidArgument {
                op: "layer_norm",
                reason: format!("eps must be positive, got {eps}"),
            });
        }
        let (t, d) = self.matrix_dims("layer_norm", x)?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: vec![t, d],
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normalized = vec![0.0; t * d];
        let mut inv_std = vec![0.0; t];
        let mut out = vec![0.0; t * d];
        for r in 0..t {
            let row = &src[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let xh = (row[c] - mu) * is;
                normalized[r * d + c] = xh;
                out[r * d + c] = xh * g[c] + b[c];
            }
        }
        let out = Tensor::new(vec![t, d], out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        )
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (t, d) = self.matrix_dims("slice_cols", x)?;
        if len == 0 || start + len > d {
            return Err(TensorError::ColumnRange {
                op: "slice_cols",
                start,
                end: start + len,
                cols: d,
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(t * len);
        for r in 0..t {
            out.extend_from_slice(&src[r * d + start..r * d + start + len]);
        }
        self.push(Tensor::new(vec![t, len], out)?, Op::SliceCols { x, start })
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (t, d) = self.matrix_dims("slice_rows", x)?;
        if len == 0 || start + len > t {
            return Err(TensorError::InvalidArgument {
                op: "slice_rows",
                reason: format!("row range {start}..{} exceeds {t} rows", start + len),
            });
        }
        let out = self.value(x).data()[start * d..(start + len) * d].to_vec();
        self.push(Tensor::new(vec![len, d], out)?, Op::SliceRows { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat_cols",
            reason: "no inputs".into(),
        })?;
        let (t, _) = self.matrix_dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (tp, dp) = self.matrix_dims("concat_cols", p)?;
            if tp != t {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(dp);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(t * total);
        for r in 0..t {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.push(Tensor::new(vec![t, total], out)?, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat_rows",
            reason: "no inputs".into(),
        })?;
        let (_, d) = self.matrix_dims("concat_rows", first)?;
        let mut rows = 0;
        for &p in parts {
            let (tp, dp) = self.matrix_dims("concat_rows", p)?;
            if dp != d {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            rows += tp;
        }
        let mut out = Vec::with_capacity(rows * d);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::new(vec![rows, d], out)?, Op::ConcatRows(parts.to_vec()))
    }

    /// Multi-head attention `softmax(Q·Kᵀ)·V` without projections or
    /// scaling. The rows of `q` form `blocks` equal sequences, as do the
    /// shared rows of `k` and `v`; block `b` of `q` attends only to block `b`
    /// of `k`/`v`. Columns split into `heads` equal groups, each attended
    /// separately and written back to the same columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, blocks: usize, heads: usize) -> Result<Var, TensorError> {
        let (nq, d) = self.matrix_dims("attention", q)?;
        let (nk, dk) = self.matrix_dims("attention", k)?;
        if self.shape(v) != [nk, dk] || dk != d {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                left: vec![nq, d],
                right: self.shape(v).to_vec(),
            });
        }
        if blocks == 0 || heads == 0 || nq % blocks != 0 || nk % blocks != 0 || d % heads != 0 {
            return Err(TensorError::InvalidArgument {
                op: "attention",
                reason: format!("{nq}×{d} queries and {nk} keys do not split into {blocks} blocks of {heads} heads"),
            });
        }
        let shape = AttentionShape {
            blocks,
            heads,
            q_len: nq / blocks,
            kv_len: nk / blocks,
            d,
        };
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut weights = vec![0.0; blocks * heads * shape.q_len * shape.kv_len];
        let mut out = vec![0.0; nq * d];
        for b in 0..blocks {
            for h in 0..heads {
                let wv = shape.weights(b, h);
                gemm_view(
                    qv,
                    shape.head(b, h, shape.q_len),
                    kv,
                    shape.head(b, h, shape.kv_len).t(),
                    &mut weights,
                    wv,
                );
                let block = &mut weights[wv.offset..wv.offset + shape.q_len * shape.kv_len];
                for row in block.chunks_exact_mut(shape.kv_len) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x - max).exp();
                        total += *x;
                    }
                    row.iter_mut().for_each(|x| *x /= total);
                }
                gemm_view(
                    &weights,
                    wv,
                    vv,
                    shape.head(b, h, shape.kv_len),
                    &mut out,
                    shape.head(b, h, shape.q_len),
                );
            }
        }
        self.push(
            Tensor::new(vec![nq, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                shape,
                weights,
            },
        )
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = self.grads[i].take() else {
                continue;
            };
            if self.fault.is_some() && self.nodes[i].op.kind() == self.fault {
                g.iter_mut().for_each(|v| *v *= 1.5);
            }
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: &Var, f: impl FnOnce(&mut [f64], &[Node])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot, &self.nodes);
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let out_shape = self.nodes[i].value.shape().to_vec();
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, n) = (out_shape[0], out_shape[1]);
                let k = self.nodes[a.0].value.shape()[1];
                // dA = dY · Bᵀ, dB = Aᵀ · dY
                self.accumulate(a, |ga, nodes| gemm_nt(g, nodes[b.0].value.data(), ga, m, n, k));
                self.accumulate(b, |gb, nodes| gemm_tn(nodes[a.0].value.data(), g, gb, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                // Y = A·Bᵀ: dA = dY·B, dB = dYᵀ·A
                let (m, n) = (out_shape[0], out_shape[1]);
                let k = self.nodes[a.0].value.shape()[1];
                self.accumulate(a, |ga, nodes| gemm_nn(g, nodes[b.0].value.data(), ga, m, n, k));
                self.accumulate(b, |gb, nodes| gemm_tn(g, nodes[a.0].value.data(), gb, m, n, k));
            }
            Op::Transpose(a) => {
                let (n, m) = (out_shape[0], out_shape[1]);
                self.accumulate(a, |ga, _| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(a, |ga, _| add_into(ga, g));
                self.accumulate(b, |gb, _| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(a, |ga, _| add_into(ga, g));
                self.accumulate(b, |gb, _| gb.iter_mut().zip(g).for_each(|(o, &v)| *o -= v));
            }
            Op::Mul(a, b) => {
                self.accumulate(a, |ga, nodes| {
                    let bv = nodes[b.0].value.data();
                    for ((o, &gv), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gv * y;
                    }
                });
                self.accumulate(b, |gb, nodes| {
                    let av = nodes[a.0].value.data();
                    for ((o, &gv), &x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gv * x;
                    }
                });
            }
            Op::Div(a, b) => {
                self.accumulate(a, |ga, nodes| {
                    let bv = nodes[b.0].value.data();
                    for ((o, &gv), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gv / y;
                    }
                });
                self.accumulate(b, |gb, nodes| {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    for (((o, &gv), &x), &y) in gb.iter_mut().zip(g).zip(av).zip(bv) {
                        *o -= gv * x / (y * y);
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(a, |ga, _| ga.iter_mut().zip(g).for_each(|(o, &v)| *o += v * c));
            }
            Op::MulScalar(a, s) => {
                let c = self.nodes[s.0].value.item();
                self.accumulate(a, |ga, _| ga.iter_mut().zip(g).for_each(|(o, &v)| *o += v * c));
                self.accumulate(s, |gs, nodes| {
                    let av = nodes[a.0].value.data();
                    gs[0] += g.iter().zip(av).map(|(&gv, &x)| gv * x).sum::<f64>();
                });
            }
            Op::AddScalar(a, s) => {
                self.accumulate(a, |ga, _| add_into(ga, g));
                self.accumulate(s, |gs, _| gs[0] += g.iter().sum::<f64>());
            }
            Op::SubScalar(a, s) => {
                self.accumulate(a, |ga, _| add_into(ga, g));
                self.accumulate(s, |gs, _| gs[0] -= g.iter().sum::<f64>());
            }
            Op::AddRow(x, bias) => {
                let d = out_shape[1];
                self.accumulate(x, |gx, _| add_into(gx, g));
                self.accumulate(bias, |gb, _| {
                    for row in g.chunks_exact(d) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Relu(a) => {
                self.accumulate(a, |ga, nodes| {
                    let av = nodes[a.0].value.data();
                    for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(av) {
                        if x > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                self.accumulate(a, |ga, nodes| {
                    let y = nodes[i].value.data();
                    for ((o, &gv), &yv) in ga.iter_mut().zip(g).zip(y) {
                        *o += gv * (1.0 - yv * yv);
                    }
                });
            }
            Op::Sum(a) => {
                self.accumulate(a, |ga, _| ga.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel() as f64;
                self.accumulate(a, |ga, _| ga.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                weights,
            } => {
                let sh = *shape;
                // dV = Pᵀ·G. dS = P ⊙ (dP − rowsum(dP ⊙ P)) with dP = G·Vᵀ;
                // then dQ = dS·K and dK = dSᵀ·Q.
                self.accumulate(v, |gv, _| {
                    for b in 0..sh.blocks {
                        for h in 0..sh.heads {
                            gemm_view(
                                weights,
                                sh.weights(b, h).t(),
                                g,
                                sh.head(b, h, sh.q_len),
                                gv,
                                sh.head(b, h, sh.kv_len),
                            );
                        }
                    }
                });
                let needs_scores = self.nodes[q.0].requires_grad || self.nodes[k.0].requires_grad;
                if needs_scores {
                    let mut ds = vec![0.0; weights.len()];
                    let vv = self.nodes[v.0].value.data();
                    for b in 0..sh.blocks {
                        for h in 0..sh.heads {
                            let wv = sh.weights(b, h);
                            gemm_view(
                                g,
                                sh.head(b, h, sh.q_len),
                                vv,
                                sh.head(b, h, sh.kv_len).t(),
                                &mut ds,
                                wv,
                            );
                            let range = wv.offset..wv.offset + sh.q_len * sh.kv_len;
                            for (d_row, p_row) in ds[range.clone()]
                                .chunks_exact_mut(sh.kv_len)
                                .zip(weights[range].chunks_exact(sh.kv_len))
                            {
                                let dot: f64 = d_row.iter().zip(p_row).map(|(a, b)| a * b).sum();
                                for (o, &p) in d_row.iter_mut().zip(p_row) {
                                    *o = p * (*o - dot);
                                }
                            }
                        }
                    }
                    self.accumulate(q, |gq, nodes| {
                        let kv = nodes[k.0].value.data();
                        for b in 0..sh.blocks {
                            for h in 0..sh.heads {
                                gemm_view(
                                    &ds,
                                    sh.weights(b, h),
                                    kv,
                                    sh.head(b, h, sh.kv_len),
                                    gq,
                                    sh.head(b, h, sh.q_len),
                                );
                            }
                        }
                    });
                    self.accumulate(k, |gk, nodes| {
                        let qv = nodes[q.0].value.data();
                        for b in 0..sh.blocks {
                            for h in 0..sh.heads {
                                gemm_view(
                                    &ds,
                                    sh.weights(b, h).t(),
                                    qv,
                                    sh.head(b, h, sh.q_len),
                                    gk,
                                    sh.head(b, h, sh.kv_len),
                                );
                            }
                        }
                    });
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(&out_shape, *axis);
                self.accumulate(x, |gx, nodes| {
                    let y = nodes[i].value.data();
                    if inner == 1 {
                        for ((gx, g), y) in gx
                            .chunks_exact_mut(len)
                            .zip(g.chunks_exact(len))
                            .zip(y.chunks_exact(len))
                        {
                            let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                            for ((o, &gv), &yv) in gx.iter_mut().zip(g).zip(y) {
                                *o += yv * (gv - dot);
                            }
                        }
                        return;
                    }
                    for o in 0..outer {
                        for k in 0..inner {
                            let idx = |a: usize| (o * len + a) * inner + k;
                            let dot: f64 = (0..len).map(|a| g[idx(a)] * y[idx(a)]).sum();
                            for a in 0..len {
                                gx[idx(a)] += y[idx(a)] * (g[idx(a)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let d = out_shape[1];
                self.accumulate(x, |gx, nodes| {
                    let gain_v = nodes[gain.0].value.data();
                    for (r, &is) in inv_std.iter().enumerate() {
                        let xh = &normalized[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut mean_gh = 0.0;
                        let mut mean_gh_xh = 0.0;
                        for c in 0..d {
                            let gh = gr[c] * gain_v[c];
                            mean_gh += gh;
                            mean_gh_xh += gh * xh[c];
                        }
                        mean_gh /= d as f64;
                        mean_gh_xh /= d as f64;
                        for c in 0..d {
                            let gh = gr[c] * gain_v[c];
                            gx[r * d + c] += is * (gh - mean_gh - xh[c] * mean_gh_xh);
                        }
                    }
                });
                self.accumulate(gain, |gg, _| {
                    for (row_g, row_xh) in g.chunks_exact(d).zip(normalized.chunks_exact(d)) {
                        for c in 0..d {
                            gg[c] += row_g[c] * row_xh[c];
                        }
                    }
                });
                self.accumulate(bias, |gb, _| {
                    for row in g.chunks_exact(d) {
                        add_into(gb, row);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (t, len) = (out_shape[0], out_shape[1]);
                let d = self.nodes[x.0].value.shape()[1];
                self.accumulate(x, |gx, _| {
                    for r in 0..t {
                        add_into(&mut gx[r * d + start..r * d + start + len], &g[r * len..(r + 1) * len]);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let d = out_shape[1];
                self.accumulate(x, |gx, _| add_into(&mut gx[start * d..start * d + g.len()], g));
            }
            Op::ConcatCols(parts) => {
                let (t, total) = (out_shape[0], out_shape[1]);
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    self.accumulate(p, |gp, _| {
                        for r in 0..t {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.numel();
                    self.accumulate(p, |gp, _| add_into(gp, &g[offset..offset + n]));
                    offset += n;
                }
            }
        }
        self.nodes[i].op = op;
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::MatMulNt(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::MulScalar(a, b)
        | Op::AddScalar(a, b)
        | Op::SubScalar(a, b)
        | Op::AddRow(a, b) => vec![*a, *b],
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::Relu(a)
        | Op::Tanh(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Softmax { x: a, .. }
        | Op::SliceCols { x: a, .. }
        | Op::SliceRows { x: a, .. } => vec![*a],
        Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.clone(),
        Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
