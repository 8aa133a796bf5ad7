//! Reverse-mode autodiff over a recorded operation list.
//!
//! Forward calls append nodes in topological order (every operand index is
//! smaller than the result index), so the backward pass is a single reverse
//! sweep that visits each node once and pushes its upstream gradient into
//! its operands.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::kernels;
use crate::tensor::Tensor;

/// Probabilities are floored at this value before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Var(u32);

impl Var {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Borrowed matrix view of a node's value.
#[derive(Debug, Clone, Copy)]
pub struct MatView<'a, S> {
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [S],
}

enum Value<'p, S> {
    Borrowed(&'p [S]),
    Owned(Vec<S>),
}

impl<S> Value<'_, S> {
    fn as_slice(&self) -> &[S] {
        match self {
            Value::Borrowed(s) => s,
            Value::Owned(v) => v,
        }
    }
}

enum Op<S> {
    Input,
    MatMul(Var, Var),
    /// `a * b^T`.
    MatMulTb(Var, Var),
    /// Elementwise sum; rhs may be a single row broadcast over lhs rows.
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    /// `ln(max(x, LOG_FLOOR))`.
    LogFloor(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Mean(Var),
    MeanRows(Var),
    Sum(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Row {
        x: Var,
        index: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    Pick {
        x: Var,
        row: usize,
        col: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
    },
}

struct Node<'p, S> {
    rows: usize,
    cols: usize,
    value: Value<'p, S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss w.r.t. `v`, if `v` required one and was reached.
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.idx()).and_then(|g| g.as_deref())
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// Records a forward computation and differentiates it in reverse.
pub struct Tape<'p, S: Scalar> {
    nodes: Vec<Node<'p, S>>,
}

impl<'p, S: Scalar> Default for Tape<'p, S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, S: Scalar> Tape<'p, S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Value<'p, S>, op: Op<S>) -> Result<Var> {
        debug_assert_eq!(rows * cols, value.as_slice().len());
        let needs_grad = match &op {
            Op::Input => false,
            _ => self.operands_need_grad(&op),
        };
        if self.nodes.len() > u32::MAX as usize {
            return Err(Error::Contract("tape overflow".into()));
        }
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() as u32 - 1))
    }

    fn operands_need_grad(&self, op: &Op<S>) -> bool {
        let needs = |v: &Var| self.nodes[v.idx()].needs_grad;
        match op {
            Op::Input => false,
            Op::MatMul(a, b) | Op::MatMulTb(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                needs(a) || needs(b)
            }
            Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::LogFloor(x)
            | Op::Softmax { x, .. }
            | Op::Mean(x)
            | Op::MeanRows(x)
            | Op::Sum(x)
            | Op::Row { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Pick { x, .. } => needs(x),
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.iter().any(needs),
            Op::LayerNorm { x, gain, bias } => needs(x) || needs(gain) || needs(bias),
        }
    }

    /// Record a borrowed tensor as an input node. Its `requires_grad` flag
    /// decides whether gradients flow back to it.
    pub fn leaf(&mut self, t: &'p Tensor<S>) -> Result<Var> {
        let (rows, cols) = t.mat_dims()?;
        let v = self.push(rows, cols, Value::Borrowed(t.data()), Op::Input)?;
        self.nodes[v.idx()].needs_grad = t.requires_grad();
        Ok(v)
    }

    /// Record an owned constant (never receives gradient).
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<S>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(Error::Contract(format!(
                "constant of {} elements declared as {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        self.push(rows, cols, Value::Owned(data), Op::Input)
    }

    pub fn scalar_const(&mut self, x: S) -> Var {
        self.push(1, 1, Value::Owned(vec![x]), Op::Input)
            .expect("1x1 constant")
    }

    pub fn value(&self, v: Var) -> MatView<'_, S> {
        let n = &self.nodes[v.idx()];
        MatView {
            rows: n.rows,
            cols: n.cols,
            data: n.value.as_slice(),
        }
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.idx()];
        (n.rows, n.cols)
    }

    fn data(&self, v: Var) -> &[S] {
        self.nodes[v.idx()].value.as_slice()
    }

    fn dim_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        Error::dimension(op, &[ar, ac], &[br, bc])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.dim_err("matmul", a, b));
        }
        let out = kernels::matmul(self.data(a), m, k, self.data(b), n);
        self.push(m, n, Value::Owned(out), Op::MatMul(a, b))
    }

    /// `a * b^T`; `a` is m*k, `b` is n*k.
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(self.dim_err("matmul_tb", a, b));
        }
        let out = kernels::matmul_tb(self.data(a), m, k, self.data(b), n);
        self.push(m, n, Value::Owned(out), Op::MatMulTb(a, b))
    }

    /// Elementwise sum. `b` may be a single row, broadcast over the rows of
    /// `a` (bias addition).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        if bc != ac || (br != ar && br != 1) {
            return Err(self.dim_err("add", a, b));
        }
        let bd = self.data(b);
        let out: Vec<S> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[if br == 1 { i % ac } else { i }])
            .collect();
        self.push(ar, ac, Value::Owned(out), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(self.dim_err("sub", a, b));
        }
        let (r, c) = self.dims(a);
        let out: Vec<S> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x - y)
            .collect();
        self.push(r, c, Value::Owned(out), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(self.dim_err("mul", a, b));
        }
        let (r, c) = self.dims(a);
        let out: Vec<S> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        self.push(r, c, Value::Owned(out), Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let (r, cl) = self.dims(x);
        let out: Vec<S> = self.data(x).iter().map(|&v| v * c).collect();
        self.push(r, cl, Value::Owned(out), Op::Scale(x, c))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let out: Vec<S> = self.data(x).iter().map(|&v| kernels::gelu(v)).collect();
        self.push(r, c, Value::Owned(out), Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let out: Vec<S> = self.data(x).iter().map(|&v| v.tanh()).collect();
        self.push(r, c, Value::Owned(out), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let out: Vec<S> = self.data(x).iter().map(|&v| kernels::sigmoid(v)).collect();
        self.push(r, c, Value::Owned(out), Op::Sigmoid(x))
    }

    /// `ln(max(x, 1e-12))`: total on all of the reals, so log of a sampled
    /// probability can never produce a non-finite loss.
    pub fn log_floor(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let floor = S::from_real(LOG_FLOOR);
        let out: Vec<S> = self
            .data(x)
            .iter()
            .map(|&v| if v > floor { v.ln() } else { floor.ln() })
            .collect();
        self.push(r, c, Value::Owned(out), Op::LogFloor(x))
    }

    /// Softmax along `axis` (1 normalizes each row, 0 each column). Rejects
    /// non-finite inputs so a diverging run fails loudly here rather than
    /// propagating NaN attention weights.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if axis > 1 {
            return Err(Error::Contract(format!("softmax axis {axis} out of range")));
        }
        if self.data(x).iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("softmax", "non-finite input"));
        }
        let out = kernels::softmax_axis(self.data(x), r, c, axis);
        self.push(r, c, Value::Owned(out), Op::Softmax { x, axis })
    }

    /// Mean over all elements, a 1x1 node.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = S::from_usize_exact(self.data(x).len());
        let mut acc = S::zero();
        for &v in self.data(x) {
            acc = acc + v;
        }
        self.push(1, 1, Value::Owned(vec![acc / n]), Op::Mean(x))
    }

    /// Column-wise mean over rows: r*c collapses to 1*c.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let rn = S::from_usize_exact(r);
        let mut out = vec![S::zero(); c];
        for row in 0..r {
            for (o, &v) in out.iter_mut().zip(&self.data(x)[row * c..(row + 1) * c]) {
                *o = *o + v;
            }
        }
        out.iter_mut().for_each(|o| *o = *o / rn);
        self.push(1, c, Value::Owned(out), Op::MeanRows(x))
    }

    /// Sum over all elements, a 1x1 node.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut acc = S::zero();
        for &v in self.data(x) {
            acc = acc + v;
        }
        self.push(1, 1, Value::Owned(vec![acc]), Op::Sum(x))
    }

    /// Stack equal-width nodes vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of zero parts".into()))?;
        let (_, c) = self.dims(first);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pc != c {
                return Err(self.dim_err("concat_rows", first, p));
            }
            rows += pr;
            out.extend_from_slice(self.data(p));
        }
        self.push(rows, c, Value::Owned(out), Op::ConcatRows(parts.to_vec()))
    }

    /// Stack equal-height nodes side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of zero parts".into()))?;
        let (r, _) = self.dims(first);
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        let total: usize = widths.iter().sum();
        for &p in parts {
            if self.dims(p).0 != r {
                return Err(self.dim_err("concat_cols", first, p));
            }
        }
        let mut out = vec![S::zero(); r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let d = self.data(p);
            for row in 0..r {
                out[row * total + offset..row * total + offset + w]
                    .copy_from_slice(&d[row * w..(row + 1) * w]);
            }
            offset += w;
        }
        self.push(r, total, Value::Owned(out), Op::ConcatCols(parts.to_vec()))
    }

    /// Extract one row as a 1*c node.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if index >= r {
            return Err(Error::Contract(format!("row {index} of a {r}-row node")));
        }
        let out = self.data(x)[index * c..(index + 1) * c].to_vec();
        self.push(1, c, Value::Owned(out), Op::Row { x, index })
    }

    /// Extract a contiguous column range.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > c {
            return Err(Error::Contract(format!(
                "column slice {}..{} of a {}-column node",
                start,
                start + len,
                c
            )));
        }
        let d = self.data(x);
        let mut out = Vec::with_capacity(r * len);
        for row in 0..r {
            out.extend_from_slice(&d[row * c + start..row * c + start + len]);
        }
        self.push(r, len, Value::Owned(out), Op::SliceCols { x, start, len })
    }

    /// Extract one element as a 1x1 node.
    pub fn pick(&mut self, x: Var, row: usize, col: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if row >= r || col >= c {
            return Err(Error::Contract(format!(
                "pick ({row},{col}) of a {r}x{c} node"
            )));
        }
        let v = self.data(x)[row * c + col];
        self.push(1, 1, Value::Owned(vec![v]), Op::Pick { x, row, col })
    }

    /// Per-row layer normalization with learned gain and bias (both 1*c).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.dims(gain) != (1, c) {
            return Err(self.dim_err("layer_norm gain", x, gain));
        }
        if self.dims(bias) != (1, c) {
            return Err(self.dim_err("layer_norm bias", x, bias));
        }
        let eps = S::from_real(LAYER_NORM_EPS);
        let xd = self.data(x);
        let mut out = vec![S::zero(); r * c];
        for row in 0..r {
            let (mean, var) = kernels::row_moments(xd, c, row);
            let inv = S::one() / (var + eps).sqrt();
            for col in 0..c {
                let xhat = (xd[row * c + col] - mean) * inv;
                out[row * c + col] = xhat * self.data(gain)[col] + self.data(bias)[col];
            }
        }
        self.push(r, c, Value::Owned(out), Op::LayerNorm { x, gain, bias })
    }

    /// Reverse sweep from a 1x1 loss node. Visits each recorded operation at
    /// most once; every input whose tensor required gradients ends up with
    /// an entry in the returned [`Gradients`].
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.dims(loss) != (1, 1) {
            let (r, c) = self.dims(loss);
            return Err(Error::Contract(format!(
                "backward from a {r}x{c} node; losses must be 1x1"
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.idx()] = Some(vec![S::one()]);

        for idx in (0..=loss.idx()).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad && !matches!(node.op, Op::Input) {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Input) {
                continue;
            }
            let d = match grads[idx].take() {
                Some(d) => d,
                None => continue,
            };
            self.push_to_operands(idx, &d, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn add_grad(&self, grads: &mut [Option<Vec<S>>], v: Var, contrib: impl IntoIterator<Item = S>) {
        if !self.nodes[v.idx()].needs_grad {
            return;
        }
        let n = &self.nodes[v.idx()];
        let slot = grads[v.idx()].get_or_insert_with(|| vec![S::zero(); n.rows * n.cols]);
        for (g, c) in slot.iter_mut().zip(contrib) {
            *g = *g + c;
        }
    }

    fn push_to_operands(&self, idx: usize, d: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Input => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let (_, n) = self.dims(*b);
                // dA = d B^T, dB = A^T d.
                let da = kernels::matmul_tb(d, m, n, self.data(*b), k);
                self.add_grad(grads, *a, da);
                let db = kernels::matmul_ta(self.data(*a), m, k, d, n);
                self.add_grad(grads, *b, db);
            }
            Op::MatMulTb(a, b) => {
                let (m, k) = self.dims(*a);
                let (n, _) = self.dims(*b);
                // out = A B^T: dA = d B, dB = d^T A.
                let da = kernels::matmul(d, m, n, self.data(*b), k);
                self.add_grad(grads, *a, da);
                let db = kernels::matmul_ta(d, m, n, self.data(*a), k);
                self.add_grad(grads, *b, db);
            }
            Op::Add(a, b) => {
                self.add_grad(grads, *a, d.iter().copied());
                let (br, bc) = self.dims(*b);
                if br == node.rows {
                    self.add_grad(grads, *b, d.iter().copied());
                } else {
                    // Broadcast row: gradient is the column sum.
                    let mut db = vec![S::zero(); bc];
                    for (i, &g) in d.iter().enumerate() {
                        db[i % bc] = db[i % bc] + g;
                    }
                    self.add_grad(grads, *b, db);
                }
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, d.iter().copied());
                self.add_grad(grads, *b, d.iter().map(|&g| -g));
            }
            Op::Mul(a, b) => {
                let db: Vec<S> = d.iter().zip(self.data(*a)).map(|(&g, &x)| g * x).collect();
                let da: Vec<S> = d.iter().zip(self.data(*b)).map(|(&g, &x)| g * x).collect();
                self.add_grad(grads, *a, da);
                self.add_grad(grads, *b, db);
            }
            Op::Scale(x, c) => {
                self.add_grad(grads, *x, d.iter().map(|&g| g * *c));
            }
            Op::Gelu(x) => {
                let dx = d
                    .iter()
                    .zip(self.data(*x))
                    .map(|(&g, &v)| g * kernels::gelu_grad(v));
                self.add_grad(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let out = node.value.as_slice();
                let dx = d
                    .iter()
                    .zip(out)
                    .map(|(&g, &t)| g * (S::one() - t * t));
                self.add_grad(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let out = node.value.as_slice();
                let dx = d
                    .iter()
                    .zip(out)
                    .map(|(&g, &s)| g * s * (S::one() - s));
                self.add_grad(grads, *x, dx);
            }
            Op::LogFloor(x) => {
                let floor = S::from_real(LOG_FLOOR);
                let dx = d.iter().zip(self.data(*x)).map(|(&g, &v)| {
                    if v > floor {
                        g / v
                    } else {
                        S::zero()
                    }
                });
                self.add_grad(grads, *x, dx);
            }
            Op::Softmax { x, axis } => {
                let s = node.value.as_slice();
                let (r, c) = (node.rows, node.cols);
                let mut dx = vec![S::zero(); r * c];
                // Per lane: dx = s * (d - <d, s>).
                let lane = |dx: &mut [S], idxs: &mut dyn Iterator<Item = usize>| {
                    let idxs: Vec<usize> = idxs.collect();
                    let mut dot = S::zero();
                    for &i in &idxs {
                        dot = dot + d[i] * s[i];
                    }
                    for &i in &idxs {
                        dx[i] = s[i] * (d[i] - dot);
                    }
                };
                if *axis == 1 {
                    for row in 0..r {
                        lane(&mut dx, &mut (row * c..(row + 1) * c));
                    }
                } else {
                    for col in 0..c {
                        lane(&mut dx, &mut (0..r).map(|row| row * c + col));
                    }
                }
                self.add_grad(grads, *x, dx);
            }
            Op::Mean(x) => {
                let n = self.data(*x).len();
                let g = d[0] / S::from_usize_exact(n);
                self.add_grad(grads, *x, std::iter::repeat(g).take(n));
            }
            Op::MeanRows(x) => {
                let (r, c) = self.dims(*x);
                let rn = S::from_usize_exact(r);
                let dx = (0..r * c).map(|i| d[i % c] / rn);
                self.add_grad(grads, *x, dx);
            }
            Op::Sum(x) => {
                let n = self.data(*x).len();
                self.add_grad(grads, *x, std::iter::repeat(d[0]).take(n));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.dims(p);
                    let span = pr * pc;
                    self.add_grad(grads, p, d[offset..offset + span].iter().copied());
                    offset += span;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.cols;
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.dims(p);
                    let dx = (0..pr * pc).map(|i| d[(i / pc) * total + offset + i % pc]);
                    self.add_grad(grads, p, dx);
                    offset += pc;
                }
            }
            Op::Row { x, index } => {
                let (r, c) = self.dims(*x);
                let dx = (0..r * c).map(|i| {
                    if i / c == *index {
                        d[i % c]
                    } else {
                        S::zero()
                    }
                });
                self.add_grad(grads, *x, dx);
            }
            Op::SliceCols { x, start, len } => {
                let (r, c) = self.dims(*x);
                let dx = (0..r * c).map(|i| {
                    let col = i % c;
                    if col >= *start && col < start + len {
                        d[(i / c) * len + (col - start)]
                    } else {
                        S::zero()
                    }
                });
                self.add_grad(grads, *x, dx);
            }
            Op::Pick { x, row, col } => {
                let (r, c) = self.dims(*x);
                let target = row * c + col;
                let dx = (0..r * c).map(|i| if i == target { d[0] } else { S::zero() });
                self.add_grad(grads, *x, dx);
            }
            Op::LayerNorm { x, gain, bias } => {
                let (r, c) = self.dims(*x);
                let cn = S::from_usize_exact(c);
                let eps = S::from_real(LAYER_NORM_EPS);
                let xd = self.data(*x);
                let gd = self.data(*gain);
                let mut dx = vec![S::zero(); r * c];
                let mut dgain = vec![S::zero(); c];
                let mut dbias = vec![S::zero(); c];
                for row in 0..r {
                    let (mean, var) = kernels::row_moments(xd, c, row);
                    let inv = S::one() / (var + eps).sqrt();
                    // dxhat = d * gain; dx = (dxhat - mean(dxhat)
                    //   - xhat * mean(dxhat * xhat)) * inv.
                    let mut m1 = S::zero();
                    let mut m2 = S::zero();
                    for col in 0..c {
                        let i = row * c + col;
                        let xhat = (xd[i] - mean) * inv;
                        let dxhat = d[i] * gd[col];
                        m1 = m1 + dxhat;
                        m2 = m2 + dxhat * xhat;
                        dgain[col] = dgain[col] + d[i] * xhat;
                        dbias[col] = dbias[col] + d[i];
                    }
                    m1 = m1 / cn;
                    m2 = m2 / cn;
                    for col in 0..c {
                        let i = row * c + col;
                        let xhat = (xd[i] - mean) * inv;
                        dx[i] = (d[i] * gd[col] - m1 - xhat * m2) * inv;
                    }
                }
                self.add_grad(grads, *x, dx);
                self.add_grad(grads, *gain, dgain);
                self.add_grad(grads, *bias, dbias);
            }
        }
    }
}
