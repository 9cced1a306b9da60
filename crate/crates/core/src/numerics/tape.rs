//! Reverse-mode differentiation over a closed set of dense ops.
//!
//! A [`Tape`] records every op applied during a forward pass. Values live on
//! the tape (parameters are borrowed, intermediates owned). [`Tape::backward`]
//! replays the record in reverse and returns the gradients of every leaf.

use std::borrow::Cow;

use super::{Scalar, TensorBase};
use crate::error::{bail, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of one depthwise grid convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub input: (usize, usize),
    pub channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub output: (usize, usize),
}

impl ConvGeom {
    pub fn new(
        input: (usize, usize),
        channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        let t = conv_out_len(input.0, kernel.0, stride.0, padding.0)?;
        let f = conv_out_len(input.1, kernel.1, stride.1, padding.1)?;
        Ok(Self {
            input,
            channels,
            kernel,
            stride,
            padding,
            output: (t, f),
        })
    }
}

/// `floor((len + 2·padding − kernel) / stride) + 1`.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 || len == 0 {
        bail!(
            Argument,
            "kernel, stride and length must be positive (len={len}, k={kernel}, s={stride})"
        );
    }
    if len + 2 * padding < kernel {
        bail!(
            Argument,
            "kernel {kernel} exceeds padded input {len}+2·{padding}"
        );
    }
    Ok((len + 2 * padding - kernel) / stride + 1)
}

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Transpose(usize),
    Gelu(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    MeanRows(usize),
    Sum(usize),
    GatherRows {
        x: usize,
        idx: Vec<usize>,
    },
    ScatterRows {
        x: usize,
        idx: Vec<usize>,
    },
    TakeAlongRows {
        x: usize,
        idx: Vec<usize>,
    },
    ConcatCols(Vec<usize>),
    SliceCols {
        x: usize,
        start: usize,
    },
    Reshape(usize),
    Conv2d {
        x: usize,
        kernel: usize,
        geom: ConvGeom,
    },
    L2Normalize {
        x: usize,
        norms: Vec<T>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Transpose(..) => "transpose",
            Op::Gelu(..) => "gelu",
            Op::Softmax(..) => "softmax_lastdim",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MeanRows(..) => "mean_rows",
            Op::Sum(..) => "sum",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::TakeAlongRows { .. } => "take_along_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::Reshape(..) => "reshape",
            Op::Conv2d { .. } => "conv2d_grid",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Transpose(x)
            | Op::Gelu(x)
            | Op::Softmax(x)
            | Op::MeanRows(x)
            | Op::Sum(x)
            | Op::Reshape(x) => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::GatherRows { x, .. }
            | Op::ScatterRows { x, .. }
            | Op::TakeAlongRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::L2Normalize { x, .. } => vec![*x],
            Op::ConcatCols(xs) => xs.clone(),
            Op::Conv2d { x, kernel, .. } => vec![*x, *kernel],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, TensorBase<T>>,
    op: Op<T>,
    tracked: bool,
}

/// Gradients of the leaves of a tape, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf, or `None` when it was untracked or unreachable.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Recording of one forward pass.
pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf whose gradient is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: TensorBase<T>) -> Var {
        let tracked = tensor.requires_grad();
        self.push_leaf(Cow::Owned(tensor), tracked)
    }

    /// Records an owned leaf with explicit tracking.
    pub fn input(&mut self, tensor: TensorBase<T>, tracked: bool) -> Var {
        self.push_leaf(Cow::Owned(tensor), tracked)
    }

    /// Records an untracked owned leaf.
    pub fn constant(&mut self, tensor: TensorBase<T>) -> Var {
        self.push_leaf(Cow::Owned(tensor), false)
    }

    /// Records a borrowed leaf without copying it.
    pub fn borrowed(&mut self, tensor: &'a TensorBase<T>, tracked: bool) -> Var {
        self.push_leaf(Cow::Borrowed(tensor), tracked)
    }

    fn push_leaf(&mut self, value: Cow<'a, TensorBase<T>>, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: TensorBase<T>, op: Op<T>) -> Var {
        let inputs = op.inputs();
        let tracked = inputs.iter().any(|&i| self.nodes[i].tracked);
        if cfg!(debug_assertions)
            && !value.is_finite()
            && inputs.iter().all(|&i| self.nodes[i].value.is_finite())
        {
            panic!("{} produced a non-finite value from finite inputs", op.name());
        }
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &TensorBase<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn matrix(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        let shape = self.shape(v);
        if shape.len() != 2 {
            bail!(Shape, "{op} expects a rank-2 operand, got {shape:?}");
        }
        Ok((shape[0], shape[1]))
    }

    // ── linear algebra ────────────────────────────────────────────────

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            bail!(
                Shape,
                "matmul inner extents differ: {:?} · {:?}",
                self.shape(a),
                self.shape(b)
            );
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.data(a),
            (k as isize, 1),
            self.data(b),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let value = TensorBase::from_vec(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul(a.0, b.0)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix(x, "transpose")?;
        let src = self.data(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = TensorBase::from_vec(&[c, r], out)?;
        Ok(self.push(value, Op::Transpose(x.0)))
    }

    // ── elementwise ───────────────────────────────────────────────────

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            bail!(
                Shape,
                "{op} operands differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            );
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let value = TensorBase::from_vec(self.shape(a), data)?;
        Ok(self.push(value, Op::Add(a.0, b.0)))
    }

    /// Adds a vector to every last-axis slice of `x` (bias broadcast).
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).last_dim();
        if self.value(bias).numel() != cols {
            bail!(
                Shape,
                "add_row bias {:?} does not match last extent of {:?}",
                self.shape(bias),
                self.shape(x)
            );
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &w)| v + w))
            .collect();
        let value = TensorBase::from_vec(self.shape(x), data)?;
        Ok(self.push(value, Op::AddRow(x.0, bias.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let value = TensorBase::from_vec(self.shape(a), data)?;
        Ok(self.push(value, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::of(factor);
        let value = self.value(x).map(|v| v * f);
        Ok(self.push(value, Op::Scale(x.0, f)))
    }

    /// `x / divisor`, elementwise.
    pub fn div_scalar(&mut self, x: Var, divisor: f64) -> Result<Var> {
        if divisor == 0.0 || !divisor.is_finite() {
            bail!(Argument, "division by {divisor}");
        }
        let d = T::of(divisor);
        let value = self.value(x).map(|v| v / d);
        Ok(self.push(value, Op::Scale(x.0, T::one() / d)))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(gelu_fwd);
        Ok(self.push(value, Op::Gelu(x.0)))
    }

    // ── normalisation ─────────────────────────────────────────────────

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let value = TensorBase::from_vec(t.shape(), out)?;
        Ok(self.push(value, Op::Softmax(x.0)))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 || eps.is_nan() {
            bail!(Argument, "layer_norm eps must be positive, got {eps}");
        }
        let cols = self.value(x).last_dim();
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            bail!(
                Shape,
                "layer_norm affine {:?}/{:?} does not match last extent of {:?}",
                self.shape(gamma),
                self.shape(beta),
                self.shape(x)
            );
        }
        let n = T::of(cols as f64);
        let eps = T::of(eps);
        let g = self.data(gamma);
        let bt = self.data(beta);
        let src = self.data(x);
        let rows = src.len() / cols;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + bt[c];
            }
        }
        let value = TensorBase::from_vec(self.shape(x), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
        ))
    }

    /// Divides every last-axis slice by its Euclidean norm (floored at `eps`).
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let cols = t.last_dim();
        let eps = T::of(eps);
        let mut norms = Vec::with_capacity(t.outer_len());
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            norms.push(norm);
            row.iter_mut().for_each(|v| *v = *v / norm);
        }
        let value = TensorBase::from_vec(t.shape(), out)?;
        Ok(self.push(value, Op::L2Normalize { x: x.0, norms }))
    }

    // ── reductions ────────────────────────────────────────────────────

    /// Mean over rows: `[r×c] → [1×c]` (token mean pooling).
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.matrix(x, "mean_rows")?;
        let src = self.data(x);
        let inv = T::one() / T::of(rows as f64);
        let mut out = vec![T::zero(); cols];
        for row in src.chunks(cols) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let value = TensorBase::from_vec(&[1, cols], out)?;
        Ok(self.push(value, Op::MeanRows(x.0)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().copied().sum::<T>();
        Ok(self.push(TensorBase::scalar(s), Op::Sum(x.0)))
    }

    /// Mean softmax cross-entropy of `[B×C]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.matrix(logits, "cross_entropy")?;
        if labels.len() != b {
            bail!(Shape, "cross_entropy got {} labels for {b} rows", labels.len());
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            bail!(Argument, "label {bad} out of range for {c} classes");
        }
        let mut probs = self.data(logits).to_vec();
        // The loss itself is accumulated in double precision.
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[label].as_f64();
            softmax_in_place(row);
        }
        let loss = T::of(loss / b as f64);
        Ok(self.push(
            TensorBase::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    // ── indexing and layout ───────────────────────────────────────────

    /// Selects rows of a matrix: `out[i] = x[idx[i]]` (embedding gather).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix(x, "gather_rows")?;
        if idx.is_empty() {
            bail!(Argument, "gather_rows needs at least one index");
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            bail!(Argument, "gather_rows index {bad} out of {rows} rows");
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let value = TensorBase::from_vec(&[idx.len(), cols], out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x: x.0,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Places row `i` of `x` at row `idx[i]` of a zero `[rows×c]` matrix.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let (n, cols) = self.matrix(x, "scatter_rows")?;
        if idx.len() != n {
            bail!(Shape, "scatter_rows got {} indices for {n} rows", idx.len());
        }
        let mut seen = vec![false; rows];
        for &i in idx {
            if i >= rows || std::mem::replace(&mut seen[i], true) {
                bail!(Argument, "scatter_rows index {i} out of range or repeated");
            }
        }
        let src = self.data(x);
        let mut out = vec![T::zero(); rows * cols];
        for (r, &i) in idx.iter().enumerate() {
            out[i * cols..(i + 1) * cols].copy_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        let value = TensorBase::from_vec(&[rows, cols], out)?;
        Ok(self.push(
            value,
            Op::ScatterRows {
                x: x.0,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Per-row column gather: `out[r, j] = x[r, idx[r·m + j]]` for `m` columns.
    pub fn take_along_rows(&mut self, x: Var, idx: &[usize], m: usize) -> Result<Var> {
        let (rows, cols) = self.matrix(x, "take_along_rows")?;
        if m == 0 || idx.len() != rows * m {
            bail!(
                Shape,
                "take_along_rows expects {rows}×{m} indices, got {}",
                idx.len()
            );
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            bail!(Argument, "take_along_rows index {bad} out of {cols} columns");
        }
        let src = self.data(x);
        let out = idx
            .iter()
            .enumerate()
            .map(|(p, &j)| src[(p / m) * cols + j])
            .collect();
        let value = TensorBase::from_vec(&[rows, m], out)?;
        Ok(self.push(
            value,
            Op::TakeAlongRows {
                x: x.0,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            bail!(Argument, "concat_cols needs at least one operand");
        };
        let (rows, _) = self.matrix(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.matrix(x, "concat_cols")?;
            if r != rows {
                bail!(Shape, "concat_cols row counts differ: {rows} vs {r}");
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.data(x)[r * w..(r + 1) * w]);
            }
        }
        let value = TensorBase::from_vec(&[rows, total], out)?;
        Ok(self.push(value, Op::ConcatCols(xs.iter().map(|v| v.0).collect())))
    }

    /// Columns `[start, start + len)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.matrix(x, "slice_cols")?;
        if len == 0 || start + len > cols {
            bail!(Argument, "slice_cols [{start}, {}) outside {cols} columns", start + len);
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let value = TensorBase::from_vec(&[rows, len], out)?;
        Ok(self.push(value, Op::SliceCols { x: x.0, start }))
    }

    /// Same data, new extents (covers reshape-to-grid and flatten-from-grid).
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x.0)))
    }

    // ── convolution ───────────────────────────────────────────────────

    /// Depthwise 2-D convolution of a `[T×F×C]` grid with a `[kt×kf×C]` kernel.
    pub fn conv2d_grid(
        &mut self,
        x: Var,
        kernel: Var,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 3 || ks.len() != 3 || xs[2] != ks[2] {
            bail!(
                Shape,
                "conv2d_grid expects [T×F×C] input and [kt×kf×C] kernel, got {xs:?} and {ks:?}"
            );
        }
        let geom = ConvGeom::new((xs[0], xs[1]), xs[2], (ks[0], ks[1]), stride, padding)?;
        let out = conv_forward(&geom, self.data(x), self.data(kernel));
        let value = TensorBase::from_vec(&[geom.output.0, geom.output.1, geom.channels], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x: x.0,
                kernel: kernel.0,
                geom,
            },
        ))
    }

    // ── reverse pass ──────────────────────────────────────────────────

    /// Back-propagates from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            bail!(
                Argument,
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            );
        }
        self.backward_from(loss, &[T::one()])
    }

    /// Vector-Jacobian product seeded with `seed` at `output`.
    pub fn backward_from(&self, output: Var, seed: &[T]) -> Result<Gradients<T>> {
        if seed.len() != self.value(output).numel() {
            bail!(
                Shape,
                "seed of length {} for output {:?}",
                seed.len(),
                self.shape(output)
            );
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[output.0].tracked {
            grads[output.0] = Some(seed.to_vec());
        }
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let tracked = |j: usize| nodes[j].tracked;
        let val = |j: usize| nodes[j].value.data();
        let out = val(i);
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                let n = nodes[*b].value.shape()[1];
                if tracked(*a) {
                    let ga = slot(grads, *a, m * k);
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        (n as isize, 1),
                        val(*b),
                        (1, n as isize),
                        T::one(),
                        ga,
                        (k as isize, 1),
                    );
                }
                if tracked(*b) {
                    let gb = slot(grads, *b, k * n);
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        val(*a),
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        T::one(),
                        gb,
                        (n as isize, 1),
                    );
                }
            }
            Op::Add(a, b) => {
                for &j in &[*a, *b] {
                    if tracked(j) {
                        axpy(slot(grads, j, g.len()), g, T::one());
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if tracked(*x) {
                    axpy(slot(grads, *x, g.len()), g, T::one());
                }
                if tracked(*bias) {
                    let cols = nodes[*bias].value.numel();
                    let gb = slot(grads, *bias, cols);
                    for row in g.chunks(cols) {
                        axpy(gb, row, T::one());
                    }
                }
            }
            Op::Mul(a, b) => {
                if tracked(*a) {
                    let ga = slot(grads, *a, g.len());
                    for ((d, &gv), &bv) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *d += gv * bv;
                    }
                }
                if tracked(*b) {
                    let gb = slot(grads, *b, g.len());
                    for ((d, &gv), &av) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *d += gv * av;
                    }
                }
            }
            Op::Scale(x, f) => axpy(slot(grads, *x, g.len()), g, *f),
            Op::Transpose(x) => {
                let (r, c) = (nodes[*x].value.shape()[0], nodes[*x].value.shape()[1]);
                let gx = slot(grads, *x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Gelu(x) => {
                let gx = slot(grads, *x, g.len());
                for ((d, &gv), &xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                    *d += gv * gelu_grad(xv);
                }
            }
            Op::Softmax(x) => {
                let cols = nodes[i].value.last_dim();
                let gx = slot(grads, *x, g.len());
                for ((dx, gy), y) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                    let dot = gy.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>();
                    for c in 0..cols {
                        dx[c] += y[c] * (gy[c] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = nodes[*gamma].value.numel();
                let gam = val(*gamma);
                if tracked(*gamma) {
                    let gg = slot(grads, *gamma, cols);
                    for (gy, h) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            gg[c] += gy[c] * h[c];
                        }
                    }
                }
                if tracked(*beta) {
                    let gb = slot(grads, *beta, cols);
                    for gy in g.chunks(cols) {
                        axpy(gb, gy, T::one());
                    }
                }
                if tracked(*x) {
                    let n = T::of(cols as f64);
                    let gx = slot(grads, *x, g.len());
                    let mut dh = vec![T::zero(); cols];
                    for (r, ((dx, gy), h)) in gx
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(xhat.chunks(cols))
                        .enumerate()
                    {
                        for c in 0..cols {
                            dh[c] = gy[c] * gam[c];
                        }
                        let mean_dh = dh.iter().copied().sum::<T>() / n;
                        let mean_dh_h = dh.iter().zip(h).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for c in 0..cols {
                            dx[c] += rstd[r] * (dh[c] - mean_dh - h[c] * mean_dh_h);
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let cols = nodes[i].value.last_dim();
                let gx = slot(grads, *x, g.len());
                for (r, ((dx, gy), y)) in gx
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(out.chunks(cols))
                    .enumerate()
                {
                    let dot = gy.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>();
                    for c in 0..cols {
                        dx[c] += (gy[c] - y[c] * dot) / norms[r];
                    }
                }
            }
            Op::MeanRows(x) => {
                let cols = g.len();
                let inv = T::one() / T::of((nodes[*x].value.numel() / cols) as f64);
                let gx = slot(grads, *x, nodes[*x].value.numel());
                for row in gx.chunks_mut(cols) {
                    axpy(row, g, inv);
                }
            }
            Op::Sum(x) => {
                let gx = slot(grads, *x, nodes[*x].value.numel());
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = nodes[*logits].value.last_dim();
                let scale = g[0] / T::of(labels.len() as f64);
                let gl = slot(grads, *logits, probs.len());
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == label { T::one() } else { T::zero() };
                        gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let cols = nodes[*x].value.last_dim();
                let gx = slot(grads, *x, nodes[*x].value.numel());
                for (r, &src) in idx.iter().enumerate() {
                    axpy(&mut gx[src * cols..(src + 1) * cols], &g[r * cols..(r + 1) * cols], T::one());
                }
            }
            Op::ScatterRows { x, idx } => {
                let cols = nodes[*x].value.last_dim();
                let gx = slot(grads, *x, nodes[*x].value.numel());
                for (r, &dst) in idx.iter().enumerate() {
                    axpy(&mut gx[r * cols..(r + 1) * cols], &g[dst * cols..(dst + 1) * cols], T::one());
                }
            }
            Op::TakeAlongRows { x, idx } => {
                let cols = nodes[*x].value.last_dim();
                let m = nodes[i].value.last_dim();
                let gx = slot(grads, *x, nodes[*x].value.numel());
                for (p, &j) in idx.iter().enumerate() {
                    gx[(p / m) * cols + j] += g[p];
                }
            }
            Op::ConcatCols(xs) => {
                let rows = nodes[i].value.shape()[0];
                let total = nodes[i].value.shape()[1];
                let mut offset = 0;
                for &x in xs {
                    let w = nodes[x].value.last_dim();
                    if tracked(x) {
                        let gx = slot(grads, x, rows * w);
                        for r in 0..rows {
                            axpy(
                                &mut gx[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                                T::one(),
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let cols = nodes[*x].value.last_dim();
                let len = nodes[i].value.last_dim();
                let gx = slot(grads, *x, nodes[*x].value.numel());
                for (r, gy) in g.chunks(len).enumerate() {
                    axpy(&mut gx[r * cols + start..r * cols + start + len], gy, T::one());
                }
            }
            Op::Reshape(x) => axpy(slot(grads, *x, g.len()), g, T::one()),
            Op::Conv2d { x, kernel, geom } => {
                if tracked(*x) {
                    let gx = slot(grads, *x, nodes[*x].value.numel());
                    conv_backward_input(geom, g, val(*kernel), gx);
                }
                if tracked(*kernel) {
                    let gk = slot(grads, *kernel, nodes[*kernel].value.numel());
                    conv_backward_kernel(geom, g, val(*x), gk);
                }
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], j: usize, len: usize) -> &mut [T] {
    grads[j].get_or_insert_with(|| vec![T::zero(); len])
}

#[inline]
fn axpy<T: Scalar>(dst: &mut [T], src: &[T], alpha: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = T::one() / total;
    row.iter_mut().for_each(|v| *v *= inv);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu_fwd<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// Calls `f(out_index, in_index, kernel_index)` for every in-bounds tap.
#[inline]
fn for_each_tap(geom: &ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    let (t_in, f_in) = geom.input;
    let (kt, kf) = geom.kernel;
    let (st, sf) = geom.stride;
    let (pt, pf) = geom.padding;
    let (t_out, f_out) = geom.output;
    for ot in 0..t_out {
        for a in 0..kt {
            let it = (ot * st + a) as isize - pt as isize;
            if it < 0 || it as usize >= t_in {
                continue;
            }
            for of in 0..f_out {
                for b in 0..kf {
                    let jf = (of * sf + b) as isize - pf as isize;
                    if jf < 0 || jf as usize >= f_in {
                        continue;
                    }
                    f(ot * f_out + of, it as usize * f_in + jf as usize, a * kf + b);
                }
            }
        }
    }
}

fn conv_forward<T: Scalar>(geom: &ConvGeom, x: &[T], k: &[T]) -> Vec<T> {
    let c = geom.channels;
    let mut out = vec![T::zero(); geom.output.0 * geom.output.1 * c];
    for_each_tap(geom, |o, i, t| {
        let dst = &mut out[o * c..(o + 1) * c];
        let src = &x[i * c..(i + 1) * c];
        let w = &k[t * c..(t + 1) * c];
        for ch in 0..c {
            dst[ch] += w[ch] * src[ch];
        }
    });
    out
}

fn conv_backward_input<T: Scalar>(geom: &ConvGeom, g: &[T], k: &[T], gx: &mut [T]) {
    let c = geom.channels;
    for_each_tap(geom, |o, i, t| {
        let dst = &mut gx[i * c..(i + 1) * c];
        let go = &g[o * c..(o + 1) * c];
        let w = &k[t * c..(t + 1) * c];
        for ch in 0..c {
            dst[ch] += w[ch] * go[ch];
        }
    });
}

fn conv_backward_kernel<T: Scalar>(geom: &ConvGeom, g: &[T], x: &[T], gk: &mut [T]) {
    let c = geom.channels;
    for_each_tap(geom, |o, i, t| {
        let dst = &mut gk[t * c..(t + 1) * c];
        let go = &g[o * c..(o + 1) * c];
        let src = &x[i * c..(i + 1) * c];
        for ch in 0..c {
            dst[ch] += src[ch] * go[ch];
        }
    });
}
