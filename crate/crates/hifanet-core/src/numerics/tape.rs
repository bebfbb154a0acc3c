//! Reverse-mode automatic differentiation on a per-forward tape.
//!
//! Every forward pass records its operations into a fresh [`Tape`]; calling
//! [`Tape::backward`] walks the tape in reverse and accumulates parameter
//! gradients into the bound [`ParamStore`]. Tapes are confined to one thread;
//! independent passes may run concurrently with their own tapes.
//!
//! Node values are matrices (scalars are 1x1, vectors single rows); the
//! model assembles everything it needs from matrix ops, slices and concats.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{NumericsError, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf { param: Option<usize> },
    Matmul(Var, Var),
    /// `a * b^T` without materializing the transpose.
    MatmulNT(Var, Var),
    Add(Var, Var),
    /// `a[m,n] + bias[1,n]` broadcast over rows.
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    MeanRows(Var),
    MeanCols(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    GatherRows { a: Var, idx: Vec<usize> },
    SumAll(Var),
    Reshape(Var),
    /// Mean cross-entropy of row-wise logits against integer labels, with
    /// the row softmax cached for the backward pass.
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    /// Whether any parameter leaf is reachable from this node; gradient
    /// propagation skips nodes (and inputs) that cannot influence one.
    needs_grad: bool,
}

/// Records forward operations and replays them in reverse for gradients.
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: alloc::string::String) -> NumericsError {
    NumericsError::ShapeMismatch { op, detail }
}

/// Column-block width for the accumulator kept on the stack; wide enough
/// for one cache-friendly streak, small enough to stay in registers/L1.
const MM_BLOCK: usize = 64;

/// `c += a[m,k] * b[k,n]`, row-major. Accumulates each output block in a
/// stack buffer so the inner loop vectorizes without aliasing stalls.
fn mm_nn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let mut j0 = 0;
        while j0 < n {
            let jw = MM_BLOCK.min(n - j0);
            let mut acc = [0.0f64; MM_BLOCK];
            for (kk, &av) in a_row.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let b_row = &b[kk * n + j0..kk * n + j0 + jw];
                for (x, &bv) in acc[..jw].iter_mut().zip(b_row) {
                    *x += av * bv;
                }
            }
            for (cv, &x) in c[i * n + j0..i * n + j0 + jw].iter_mut().zip(&acc[..jw]) {
                *cv += x;
            }
            j0 += jw;
        }
    }
}

/// `c += a[m,k] * b[n,k]^T`.
fn mm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut dot = 0.0;
            for (av, bv) in a_row.iter().zip(b_row) {
                dot += av * bv;
            }
            c[i * n + j] += dot;
        }
    }
}

/// `c += a[k,m]^T * b[k,n]`, via a scratch transpose of `a` so the main
/// loop runs the cache-friendly row-major kernel.
fn mm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let mut at = alloc::vec![0.0f64; k * m];
    for kk in 0..k {
        let a_row = &a[kk * m..(kk + 1) * m];
        for (i, &av) in a_row.iter().enumerate() {
            at[i * k + kk] = av;
        }
    }
    mm_nn_acc(&at, b, c, m, k, n);
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let needs_grad = match &op {
            Op::Leaf { param } => param.is_some(),
            Op::Matmul(a, b) | Op::MatmulNT(a, b) | Op::Add(a, b) | Op::AddRow(a, b) => {
                self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad
            }
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::SoftmaxRows(a)
            | Op::Transpose(a)
            | Op::MeanRows(a)
            | Op::MeanCols(a)
            | Op::SliceRows { a, .. }
            | Op::SliceCols { a, .. }
            | Op::GatherRows { a, .. }
            | Op::SumAll(a)
            | Op::Reshape(a)
            | Op::CrossEntropy { logits: a, .. } => self.nodes[a.0].needs_grad,
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => {
                parts.iter().any(|p| self.nodes[p.0].needs_grad)
            }
        };
        self.nodes.push(Node { rows, cols, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Value of a node as (data, rows, cols).
    pub fn value(&self, v: Var) -> (&[f64], usize, usize) {
        let n = &self.nodes[v.0];
        (&n.value, n.rows, n.cols)
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar_value(&self, v: Var) -> Result<f64, NumericsError> {
        let n = &self.nodes[v.0];
        if n.rows * n.cols != 1 {
            return Err(NumericsError::NotScalar);
        }
        Ok(n.value[0])
    }

    /// Constant input (not differentiated).
    pub fn leaf_matrix(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        self.push(rows, cols, data, Op::Leaf { param: None })
    }

    pub fn leaf_tensor(&mut self, t: &Tensor) -> Result<Var, NumericsError> {
        let (rows, cols) = t.matrix_dims()?;
        Ok(self.push(rows, cols, t.data().to_vec(), Op::Leaf { param: None }))
    }

    /// Binds a named parameter from `store` as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, NumericsError> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.into()))?;
        let (_, tensor) = store.by_index(idx);
        let (rows, cols) = tensor.matrix_dims()?;
        Ok(self.push(rows, cols, tensor.data().to_vec(), Op::Leaf { param: Some(idx) }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, ka) = self.dims(a);
        let (kb, n) = self.dims(b);
        if ka != kb {
            return Err(shape_err("matmul", format!("{m}x{ka} * {kb}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        mm_nn_acc(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out, m, ka, n);
        Ok(self.push(m, n, out, Op::Matmul(a, b)))
    }

    /// `a * b^T`; `b` is given row-major as [n, k].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, ka) = self.dims(a);
        let (n, kb) = self.dims(b);
        if ka != kb {
            return Err(shape_err("matmul-nt", format!("{m}x{ka} * ({n}x{kb})^T")));
        }
        let mut out = vec![0.0; m * n];
        mm_nt_acc(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out, m, ka, n);
        Ok(self.push(m, n, out, Op::MatmulNT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.dims(a);
        if self.dims(b) != (m, n) {
            return Err(shape_err("add", format!("{:?} vs {:?}", self.dims(a), self.dims(b))));
        }
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(m, n, out, Op::Add(a, b)))
    }

    /// Adds a `[1, n]` bias row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.dims(a);
        let (br, bn) = self.dims(bias);
        if br != 1 || bn != n {
            return Err(shape_err("add-row", format!("{m}x{n} + {br}x{bn}")));
        }
        let bias_vals = &self.nodes[bias.0].value;
        let mut out = Vec::with_capacity(m * n);
        for row in self.nodes[a.0].value.chunks_exact(n) {
            for (x, b) in row.iter().zip(bias_vals) {
                out.push(x + b);
            }
        }
        Ok(self.push(m, n, out, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let (m, n) = self.dims(a);
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        self.push(m, n, out, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        self.push(m, n, out, Op::Relu(a))
    }

    /// Numerically stable softmax along the requested axis (1 = within each
    /// row, 0 = within each column).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        match axis {
            1 => Ok(self.softmax_rows(a)),
            0 => {
                let t = self.transpose(a);
                let s = self.softmax_rows(t);
                Ok(self.transpose(s))
            }
            _ => Err(shape_err("softmax", format!("axis {axis} out of range"))),
        }
    }

    fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let mut out = Vec::with_capacity(m * n);
        for row in self.nodes[a.0].value.chunks_exact(n) {
            let max = row.iter().fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            let exps: Vec<f64> = row.iter().map(|&x| libm::exp(x - max)).collect();
            let sum: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|e| e / sum));
        }
        self.push(m, n, out, Op::SoftmaxRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let src = &self.nodes[a.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(n, m, out, Op::Transpose(a))
    }

    /// Mean along `axis`: 0 collapses rows to `[1, n]`, 1 collapses columns
    /// to `[m, 1]`.
    pub fn mean_over_axis(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        let (m, n) = self.dims(a);
        match axis {
            0 => {
                let mut out = vec![0.0; n];
                for row in self.nodes[a.0].value.chunks_exact(n) {
                    for (o, &x) in out.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                for o in out.iter_mut() {
                    *o /= m as f64;
                }
                Ok(self.push(1, n, out, Op::MeanRows(a)))
            }
            1 => {
                let mut out = Vec::with_capacity(m);
                for row in self.nodes[a.0].value.chunks_exact(n) {
                    out.push(row.iter().sum::<f64>() / n as f64);
                }
                Ok(self.push(m, 1, out, Op::MeanCols(a)))
            }
            _ => Err(shape_err("mean", format!("axis {axis} out of range"))),
        }
    }

    /// Concatenation along `axis` (0 stacks rows, 1 joins columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, NumericsError> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no parts".into()));
        }
        match axis {
            0 => {
                let (_, n) = self.dims(parts[0]);
                let mut rows = 0;
                let mut out = Vec::new();
                for &p in parts {
                    let (pm, pn) = self.dims(p);
                    if pn != n {
                        return Err(shape_err("concat", format!("column mismatch {pn} vs {n}")));
                    }
                    rows += pm;
                    out.extend_from_slice(&self.nodes[p.0].value);
                }
                Ok(self.push(rows, n, out, Op::ConcatRows(parts.to_vec())))
            }
            1 => {
                let (m, _) = self.dims(parts[0]);
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|&p| {
                        let (pm, pn) = self.dims(p);
                        if pm != m {
                            0
                        } else {
                            pn
                        }
                    })
                    .collect();
                if widths.iter().any(|&w| w == 0) {
                    return Err(shape_err("concat", "row mismatch".into()));
                }
                let total: usize = widths.iter().sum();
                let mut out = Vec::with_capacity(m * total);
                for row in 0..m {
                    for (&p, &w) in parts.iter().zip(&widths) {
                        let src = &self.nodes[p.0].value[row * w..(row + 1) * w];
                        out.extend_from_slice(src);
                    }
                }
                Ok(self.push(m, total, out, Op::ConcatCols(parts.to_vec())))
            }
            _ => Err(shape_err("concat", format!("axis {axis} out of range"))),
        }
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, rows: usize) -> Result<Var, NumericsError> {
        let (m, n) = self.dims(a);
        if start + rows > m {
            return Err(shape_err("slice-rows", format!("{start}+{rows} > {m}")));
        }
        let out = self.nodes[a.0].value[start * n..(start + rows) * n].to_vec();
        Ok(self.push(rows, n, out, Op::SliceRows { a, start }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, cols: usize) -> Result<Var, NumericsError> {
        let (m, n) = self.dims(a);
        if start + cols > n {
            return Err(shape_err("slice-cols", format!("{start}+{cols} > {n}")));
        }
        let mut out = Vec::with_capacity(m * cols);
        for row in self.nodes[a.0].value.chunks_exact(n) {
            out.extend_from_slice(&row[start..start + cols]);
        }
        Ok(self.push(m, cols, out, Op::SliceCols { a, start }))
    }

    /// Gathers rows of `a` by index; duplicate indices are allowed.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let (m, n) = self.dims(a);
        if idx.iter().any(|&i| i >= m) {
            return Err(shape_err("gather-rows", format!("index out of {m} rows")));
        }
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&self.nodes[a.0].value[i * n..(i + 1) * n]);
        }
        Ok(self.push(idx.len(), n, out, Op::GatherRows { a, idx: idx.to_vec() }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total: f64 = self.nodes[a.0].value.iter().sum();
        self.push(1, 1, vec![total], Op::SumAll(a))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, NumericsError> {
        let (m, n) = self.dims(a);
        if m * n != rows * cols {
            return Err(shape_err("reshape", format!("{m}x{n} -> {rows}x{cols}")));
        }
        let out = self.nodes[a.0].value.clone();
        Ok(self.push(rows, cols, out, Op::Reshape(a)))
    }

    /// `y = x * w + b` over the trailing dimension.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Mean over rows of `-log softmax(logits)[label]`, computed with
    /// log-sum-exp for stability.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, NumericsError> {
        let (m, c) = self.dims(logits);
        if labels.len() != m {
            return Err(shape_err("cross-entropy", format!("{} labels for {m} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(NumericsError::LabelOutOfRange { label: bad, classes: c });
        }
        let mut probs = Vec::with_capacity(m * c);
        let mut loss = 0.0;
        for (row, &label) in self.nodes[logits.0].value.chunks_exact(c).zip(labels) {
            let max = row.iter().fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            let exps: Vec<f64> = row.iter().map(|&x| libm::exp(x - max)).collect();
            let sum: f64 = exps.iter().sum();
            loss -= row[label] - max - libm::log(sum);
            probs.extend(exps.iter().map(|e| e / sum));
        }
        loss /= m as f64;
        Ok(self.push(1, 1, vec![loss], Op::CrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    /// Walks the tape in reverse from `loss`, accumulating `d loss / d theta`
    /// into the gradient buffers of `store`. Parameters the loss does not
    /// reach keep (or get) zero-filled buffers.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<(), NumericsError> {
        let n = &self.nodes[loss.0];
        if n.rows * n.cols != 1 {
            return Err(NumericsError::NotScalar);
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|node| vec![0.0; node.rows * node.cols])
            .collect();
        grads[loss.0][0] = 1.0;

        for i in (0..=loss.0).rev() {
            // Leaves keep their gradient for the store shipment below;
            // subtrees that reach no parameter are skipped entirely.
            if matches!(self.nodes[i].op, Op::Leaf { .. }) || !self.nodes[i].needs_grad {
                continue;
            }
            if grads[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let (rows, cols) = (self.nodes[i].rows, self.nodes[i].cols);
            // Take the node's gradient out so input grads can be borrowed mutably.
            let dy = core::mem::take(&mut grads[i]);
            match &self.nodes[i].op {
                Op::Leaf { .. } => {}
                Op::Matmul(a, b) => {
                    let (m, k) = self.dims(*a);
                    let (_, nn) = self.dims(*b);
                    if self.nodes[a.0].needs_grad {
                        mm_nt_acc(&dy, &self.nodes[b.0].value, &mut grads[a.0], m, nn, k);
                    }
                    if self.nodes[b.0].needs_grad {
                        mm_tn_acc(&self.nodes[a.0].value, &dy, &mut grads[b.0], k, m, nn);
                    }
                }
                Op::MatmulNT(a, b) => {
                    let (m, k) = self.dims(*a);
                    let (nn, _) = self.dims(*b);
                    if self.nodes[a.0].needs_grad {
                        mm_nn_acc(&dy, &self.nodes[b.0].value, &mut grads[a.0], m, nn, k);
                    }
                    if self.nodes[b.0].needs_grad {
                        mm_tn_acc(&dy, &self.nodes[a.0].value, &mut grads[b.0], nn, m, k);
                    }
                }
                Op::Add(a, b) => {
                    for (g, &d) in grads[a.0].iter_mut().zip(&dy) {
                        *g += d;
                    }
                    for (g, &d) in grads[b.0].iter_mut().zip(&dy) {
                        *g += d;
                    }
                }
                Op::AddRow(a, bias) => {
                    for (g, &d) in grads[a.0].iter_mut().zip(&dy) {
                        *g += d;
                    }
                    let gb = &mut grads[bias.0];
                    for row in dy.chunks_exact(cols) {
                        for (g, &d) in gb.iter_mut().zip(row) {
                            *g += d;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    for (g, &d) in grads[a.0].iter_mut().zip(&dy) {
                        *g += c * d;
                    }
                }
                Op::Relu(a) => {
                    let x = &self.nodes[a.0].value;
                    for ((g, &d), &xv) in grads[a.0].iter_mut().zip(&dy).zip(x) {
                        if xv > 0.0 {
                            *g += d;
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[i].value;
                    let ga = &mut grads[a.0];
                    for r in 0..rows {
                        let y_row = &y[r * cols..(r + 1) * cols];
                        let d_row = &dy[r * cols..(r + 1) * cols];
                        let dot: f64 = y_row.iter().zip(d_row).map(|(&yv, &dv)| yv * dv).sum();
                        let g_row = &mut ga[r * cols..(r + 1) * cols];
                        for ((g, &yv), &dv) in g_row.iter_mut().zip(y_row).zip(d_row) {
                            *g += yv * (dv - dot);
                        }
                    }
                }
                Op::Transpose(a) => {
                    let ga = &mut grads[a.0];
                    // This node is [rows, cols] = [n, m] of the source.
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[c * rows + r] += dy[r * cols + c];
                        }
                    }
                }
                Op::MeanRows(a) => {
                    let (am, _) = self.dims(*a);
                    let inv = 1.0 / am as f64;
                    let ga = &mut grads[a.0];
                    for row in ga.chunks_exact_mut(cols) {
                        for (g, &d) in row.iter_mut().zip(&dy) {
                            *g += d * inv;
                        }
                    }
                }
                Op::MeanCols(a) => {
                    let (_, an) = self.dims(*a);
                    let inv = 1.0 / an as f64;
                    let ga = &mut grads[a.0];
                    for (row, &d) in ga.chunks_exact_mut(an).zip(&dy) {
                        for g in row {
                            *g += d * inv;
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let (pm, pn) = self.dims(p);
                        let chunk = &dy[offset..offset + pm * pn];
                        for (g, &d) in grads[p.0].iter_mut().zip(chunk) {
                            *g += d;
                        }
                        offset += pm * pn;
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut col_offset = 0;
                    for p in parts {
                        let (pm, pn) = self.dims(p);
                        let gp = &mut grads[p.0];
                        for r in 0..pm {
                            let src = &dy[r * cols + col_offset..r * cols + col_offset + pn];
                            for (g, &d) in gp[r * pn..(r + 1) * pn].iter_mut().zip(src) {
                                *g += d;
                            }
                        }
                        col_offset += pn;
                    }
                }
                Op::SliceRows { a, start } => {
                    let (_, an) = self.dims(*a);
                    let ga = &mut grads[a.0];
                    for (g, &d) in ga[start * an..start * an + dy.len()].iter_mut().zip(&dy) {
                        *g += d;
                    }
                }
                Op::SliceCols { a, start } => {
                    let (_, an) = self.dims(*a);
                    let start = *start;
                    let ga = &mut grads[a.0];
                    for r in 0..rows {
                        let src = &dy[r * cols..(r + 1) * cols];
                        for (g, &d) in ga[r * an + start..r * an + start + cols].iter_mut().zip(src)
                        {
                            *g += d;
                        }
                    }
                }
                Op::GatherRows { a, idx } => {
                    let idx = idx.clone();
                    let ga = &mut grads[a.0];
                    for (r, &src_row) in idx.iter().enumerate() {
                        let d_row = &dy[r * cols..(r + 1) * cols];
                        for (g, &d) in
                            ga[src_row * cols..(src_row + 1) * cols].iter_mut().zip(d_row)
                        {
                            *g += d;
                        }
                    }
                }
                Op::SumAll(a) => {
                    let d = dy[0];
                    for g in grads[a.0].iter_mut() {
                        *g += d;
                    }
                }
                Op::Reshape(a) => {
                    for (g, &d) in grads[a.0].iter_mut().zip(&dy) {
                        *g += d;
                    }
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let (m, c) = self.dims(*logits);
                    let d = dy[0] / m as f64;
                    let gl = &mut grads[logits.0];
                    for r in 0..m {
                        let p_row = &probs[r * c..(r + 1) * c];
                        let g_row = &mut gl[r * c..(r + 1) * c];
                        for (g, &p) in g_row.iter_mut().zip(p_row) {
                            *g += d * p;
                        }
                        g_row[labels[r]] -= d;
                    }
                }
            }
        }

        // Ship leaf gradients into the store; every parameter ends up with a
        // buffer even when the loss never touched it.
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(idx) } = node.op {
                let grad = &grads[i];
                let tensor = store.by_index_mut(idx);
                for (g, &d) in tensor.grad_mut().iter_mut().zip(grad) {
                    *g += d;
                }
            }
        }
        for (_, tensor) in store.iter_mut() {
            if !tensor.has_grad() {
                tensor.grad_mut();
            }
        }
        Ok(())
    }
}
