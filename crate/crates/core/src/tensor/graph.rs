use std::collections::HashMap;

use super::{Mode, ParamId, ParamStore};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        /// `b` is a single row broadcast over the rows of `a`.
        broadcast: bool,
    },
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SoftmaxRows(Var),
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
        width: usize,
        c_in: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mask: Vec<bool>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        /// Whether the statistics came from this batch (and so carry gradient).
        batch: bool,
        count: usize,
    },
    CrossEntropy {
        logits: Var,
        gold: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

/// Column statistics of one batch-norm call in training mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub count: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// A single-use computation tape.
///
/// Nodes are appended in evaluation order, so every parent index is smaller
/// than its child's and the reverse sweep in [`Graph::backward`] is a valid
/// topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    norm_stats: Vec<(NormBuffers, BatchStats)>,
}

/// Running-statistic buffers of one normalisation layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NormBuffers {
    pub mean: ParamId,
    pub var: ParamId,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            grad: Vec::new(),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    fn dims(&self, v: Var) -> [usize; 2] {
        let n = &self.nodes[v.0];
        [n.rows, n.cols]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward sweep; all zeros if none reached `v`.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        let n = &self.nodes[v.0];
        if n.grad.is_empty() {
            vec![0.0; n.value.len()]
        } else {
            n.grad.clone()
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Var> {
        if rows == 0 || cols == 0 || rows * cols != values.len() {
            return Err(Error::dim("constant", &[rows, cols], &[values.len()]));
        }
        Ok(self.push(rows, cols, values, Op::Leaf))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(rows, cols, vec![0.0; rows * cols], Op::Leaf)
    }

    /// Leaf for a stored parameter, folded to a matrix (last extent = columns).
    /// Repeated requests for the same parameter return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let (rows, cols) = p.value.matrix_dims();
        let v = self.push(rows, cols, p.value.values().to_vec(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ([m, k], [k2, n]) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(Error::dim("matmul", &[m, k], &[k2, n]));
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &y) in row.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        Ok(self.push(m, n, out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let [m, n] = self.dims(a);
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        self.push(n, m, out, Op::Transpose(a))
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        let broadcast = if da == db {
            false
        } else if db[0] == 1 && db[1] == da[1] {
            true
        } else {
            let name = match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
            };
            return Err(Error::dim(name, &da, &db));
        };
        let cols = da[1];
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let out = av
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = if broadcast { bv[i % cols] } else { bv[i] };
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                }
            })
            .collect();
        Ok(self.push(da[0], da[1], out, Op::Binary { kind, a, b, broadcast }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// `scale * a`.
    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 1.0)
    }

    fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let [m, n] = self.dims(a);
        let out = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| scale * x + shift)
            .collect();
        self.push(m, n, out, Op::Affine(a, scale))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let [m, n] = self.dims(a);
        let out = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        self.push(m, n, out, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat_cols", &[], &[]))?;
        let rows = self.dims(first)[0];
        if let Some(&bad) = parts.iter().find(|&&p| self.dims(p)[0] != rows) {
            return Err(Error::dim("concat_cols", &self.dims(first), &self.dims(bad)));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p)[1]).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let n = &self.nodes[p.0];
                out.extend_from_slice(&n.value[r * n.cols..(r + 1) * n.cols]);
            }
        }
        Ok(self.push(rows, total, out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let [m, n] = self.dims(a);
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_cols", &[m, n], &[start, len]));
        }
        let av = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&av[r * n + start..r * n + start + len]);
        }
        Ok(self.push(m, len, out, Op::SliceCols(a, start)))
    }

    /// Rows of `a` selected (with repetition) by `indices`; the embedding lookup.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let [m, n] = self.dims(a);
        if indices.is_empty() {
            return Err(Error::dim("gather_rows", &[m, n], &[0]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::dim("gather_rows", &[m, n], &[bad]));
        }
        let av = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            out.extend_from_slice(&av[i * n..(i + 1) * n]);
        }
        Ok(self.push(
            indices.len(),
            n,
            out,
            Op::GatherRows(a, indices.to_vec()),
        ))
    }

    /// Stack equally wide matrices on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows", &[], &[]))?;
        let cols = self.dims(first)[1];
        if let Some(&bad) = parts.iter().find(|&&r| self.dims(r)[1] != cols) {
            return Err(Error::dim("concat_rows", &self.dims(first), &self.dims(bad)));
        }
        let mut out = Vec::new();
        for &r in parts {
            out.extend_from_slice(&self.nodes[r.0].value);
        }
        let rows = parts.iter().map(|&p| self.dims(p)[0]).sum();
        Ok(self.push(rows, cols, out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.masked_softmax_rows(a, None)
            .expect("unmasked softmax has no shape constraints")
    }

    /// Row softmax where columns with `key_mask[j] == false` get weight 0.
    /// A row with no admissible column is all zeros.
    pub fn masked_softmax_rows(&mut self, a: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let [m, n] = self.dims(a);
        if let Some(mask) = key_mask {
            if mask.len() != n {
                return Err(Error::dim("masked_softmax_rows", &[m, n], &[mask.len()]));
            }
        }
        let keep = |j: usize| key_mask.is_none_or(|mask| mask[j]);
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &av[r * n..(r + 1) * n];
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for j in (0..n).filter(|&j| keep(j)) {
                let e = (row[j] - max).exp();
                out[r * n + j] = e;
                total += e;
            }
            out[r * n..(r + 1) * n].iter_mut().for_each(|v| *v /= total);
        }
        Ok(self.push(m, n, out, Op::SoftmaxRows(a)))
    }

    /// 1-D convolution along rows with "same" zero padding. The kernel is a
    /// `[width, c_in, c_out]` parameter folded to `(width * c_in) x c_out`.
    /// For even widths the extra padding goes on the left.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var, width: usize) -> Result<Var> {
        let [s, c_in] = self.dims(x);
        let [kr, c_out] = self.dims(kernel);
        if width == 0 || kr != width * c_in {
            return Err(Error::dim("conv1d", &[s, c_in], &[width, kr / width.max(1), c_out]));
        }
        if self.dims(bias) != [1, c_out] {
            return Err(Error::dim("conv1d bias", &[1, c_out], &self.dims(bias)));
        }
        let pad_left = width / 2;
        let xv = &self.nodes[x.0].value;
        let kv = &self.nodes[kernel.0].value;
        let bv = &self.nodes[bias.0].value;
        let mut out = vec![0.0; s * c_out];
        for t in 0..s {
            let row = &mut out[t * c_out..(t + 1) * c_out];
            row.copy_from_slice(bv);
            for k in 0..width {
                let src = t as isize + k as isize - pad_left as isize;
                if src < 0 || src >= s as isize {
                    continue;
                }
                let src = src as usize;
                for ci in 0..c_in {
                    let xval = xv[src * c_in + ci];
                    let krow = &kv[(k * c_in + ci) * c_out..(k * c_in + ci + 1) * c_out];
                    for (o, &w) in row.iter_mut().zip(krow) {
                        *o += xval * w;
                    }
                }
            }
        }
        Ok(self.push(
            s,
            c_out,
            out,
            Op::Conv1d {
                x,
                kernel,
                bias,
                width,
                c_in,
            },
        ))
    }

    /// Batch normalisation over the rows marked valid in `mask`.
    ///
    /// In training mode with at least two valid rows, columns are normalised
    /// with the batch mean and (biased) variance and those statistics are
    /// returned. Otherwise `running_mean` / `running_var` are used. Rows
    /// outside the mask come out as zero.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mask: &[bool],
        running_mean: &[f64],
        running_var: &[f64],
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let [s, n] = self.dims(x);
        if mask.len() != s {
            return Err(Error::dim("batch_norm mask", &[s, n], &[mask.len()]));
        }
        for v in [gamma, beta] {
            if self.dims(v) != [1, n] {
                return Err(Error::dim("batch_norm affine", &[1, n], &self.dims(v)));
            }
        }
        if running_mean.len() != n || running_var.len() != n {
            return Err(Error::dim("batch_norm running", &[n], &[running_mean.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        let xv = &self.nodes[x.0].value;
        let use_batch = mode == Mode::Train && count >= 2;
        if mode == Mode::Train && !use_batch {
            log::warn!("batch_norm: {count} valid rows in training mode, using running statistics");
        }
        let (mean, var) = if use_batch {
            let mut mean = vec![0.0; n];
            for r in (0..s).filter(|&r| mask[r]) {
                for c in 0..n {
                    mean[c] += xv[r * n + c];
                }
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            let mut var = vec![0.0; n];
            for r in (0..s).filter(|&r| mask[r]) {
                for c in 0..n {
                    let d = xv[r * n + c] - mean[c];
                    var[c] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= count as f64);
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let mut xhat = vec![0.0; s * n];
        let mut out = vec![0.0; s * n];
        for r in (0..s).filter(|&r| mask[r]) {
            for c in 0..n {
                let h = (xv[r * n + c] - mean[c]) * inv_std[c];
                xhat[r * n + c] = h;
                out[r * n + c] = gv[c] * h + bv[c];
            }
        }
        let stats = use_batch.then_some(BatchStats { count, mean, var });
        let v = self.push(
            s,
            n,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mask: mask.to_vec(),
                xhat,
                inv_std,
                batch: use_batch,
                count,
            },
        );
        Ok((v, stats))
    }

    /// Mean over masked-in rows of `-log softmax(logits)[gold]`. With no
    /// masked-in rows the loss is 0 and no gradient flows.
    pub fn cross_entropy_masked(
        &mut self,
        logits: Var,
        gold: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let [s, c] = self.dims(logits);
        if gold.len() != s || mask.len() != s {
            return Err(Error::dim("cross_entropy", &[s, c], &[gold.len(), mask.len()]));
        }
        if let Some(&bad) = gold.iter().find(|&&g| g >= c) {
            return Err(Error::dim("cross_entropy class", &[c], &[bad]));
        }
        let lv = &self.nodes[logits.0].value;
        let mut probs = vec![0.0; s * c];
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..s {
            let row = &lv[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            if mask[r] {
                total += lse - row[gold[r]];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::CrossEntropy {
                logits,
                gold: gold.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].value.iter().sum();
        self.push(1, 1, vec![total], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let m = n.value.iter().sum::<f64>() / n.value.len() as f64;
        self.push(1, 1, vec![m], Op::Mean(a))
    }

    pub fn record_norm_stats(&mut self, buffers: NormBuffers, stats: BatchStats) {
        self.norm_stats.push((buffers, stats));
    }

    /// Batch statistics observed during a training-mode forward, keyed by the
    /// buffers of the normalisation layer that produced them.
    pub fn norm_stats(&self) -> &[(NormBuffers, BatchStats)] {
        &self.norm_stats
    }

    /// Reverse sweep from a scalar node. Node gradients are reset first, so a
    /// graph can be swept more than once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let [m, n] = self.dims(loss);
        if m * n != 1 {
            return Err(Error::dim("backward", &[m, n], &[1, 1]));
        }
        for node in &mut self.nodes {
            node.grad.clear();
        }
        self.nodes[loss.0].grad = vec![1.0];
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if node.grad.is_empty() {
                continue;
            }
            propagate(before, node);
        }
        Ok(())
    }

    /// Add the gradients of every parameter leaf into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (&id, &v) in &self.params {
            let node = &self.nodes[v.0];
            if node.grad.is_empty() {
                continue;
            }
            let p = store.get_mut(id);
            for (g, &d) in p.grad.iter_mut().zip(&node.grad) {
                *g += d;
            }
        }
    }
}

fn grad_mut(nodes: &mut [Node], v: Var) -> &mut [f64] {
    let node = &mut nodes[v.0];
    if node.grad.is_empty() {
        node.grad = vec![0.0; node.value.len()];
    }
    &mut node.grad
}

/// Push `node.grad` to the parents of `node`. All parents live in `nodes`.
fn propagate(nodes: &mut [Node], node: &Node) {
    let dy = &node.grad;
    let y = &node.value;
    match &node.op {
        Op::Leaf | Op::Param => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].rows, nodes[a.0].cols);
            let n = nodes[b.0].cols;
            // dA = dC * B^T
            let bv = nodes[b.0].value.clone();
            let da = grad_mut(nodes, *a);
            for i in 0..m {
                for p in 0..k {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += dy[i * n + j] * bv[p * n + j];
                    }
                    da[i * k + p] += acc;
                }
            }
            // dB = A^T * dC
            let av = nodes[a.0].value.clone();
            let db = grad_mut(nodes, *b);
            for i in 0..m {
                for p in 0..k {
                    let x = av[i * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        db[p * n + j] += x * dy[i * n + j];
                    }
                }
            }
        }
        Op::Transpose(a) => {
            let (m, n) = (nodes[a.0].rows, nodes[a.0].cols);
            let da = grad_mut(nodes, *a);
            for i in 0..m {
                for j in 0..n {
                    da[i * n + j] += dy[j * m + i];
                }
            }
        }
        Op::Binary {
            kind,
            a,
            b,
            broadcast,
        } => {
            let cols = node.cols;
            let bidx = |i: usize| if *broadcast { i % cols } else { i };
            match kind {
                BinaryKind::Add | BinaryKind::Sub => {
                    let sign = if *kind == BinaryKind::Add { 1.0 } else { -1.0 };
                    let da = grad_mut(nodes, *a);
                    da.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                    let db = grad_mut(nodes, *b);
                    for (i, d) in dy.iter().enumerate() {
                        db[bidx(i)] += sign * d;
                    }
                }
                BinaryKind::Mul => {
                    let av = nodes[a.0].value.clone();
                    let bv = nodes[b.0].value.clone();
                    let da = grad_mut(nodes, *a);
                    for (i, d) in dy.iter().enumerate() {
                        da[i] += d * bv[bidx(i)];
                    }
                    let db = grad_mut(nodes, *b);
                    for (i, d) in dy.iter().enumerate() {
                        db[bidx(i)] += d * av[i];
                    }
                }
            }
        }
        Op::Affine(a, scale) => {
            let da = grad_mut(nodes, *a);
            da.iter_mut().zip(dy).for_each(|(g, d)| *g += scale * d);
        }
        Op::Sigmoid(a) => {
            let da = grad_mut(nodes, *a);
            for i in 0..dy.len() {
                da[i] += dy[i] * y[i] * (1.0 - y[i]);
            }
        }
        Op::Tanh(a) => {
            let da = grad_mut(nodes, *a);
            for i in 0..dy.len() {
                da[i] += dy[i] * (1.0 - y[i] * y[i]);
            }
        }
        Op::Relu(a) => {
            let av = nodes[a.0].value.clone();
            let da = grad_mut(nodes, *a);
            for i in 0..dy.len() {
                if av[i] > 0.0 {
                    da[i] += dy[i];
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.cols;
            let mut offset = 0;
            for p in parts {
                let w = nodes[p.0].cols;
                let dp = grad_mut(nodes, *p);
                for r in 0..node.rows {
                    for c in 0..w {
                        dp[r * w + c] += dy[r * total + offset + c];
                    }
                }
                offset += w;
            }
        }
        Op::SliceCols(a, start) => {
            let n = nodes[a.0].cols;
            let len = node.cols;
            let da = grad_mut(nodes, *a);
            for r in 0..node.rows {
                for c in 0..len {
                    da[r * n + start + c] += dy[r * len + c];
                }
            }
        }
        Op::GatherRows(a, indices) => {
            let n = node.cols;
            let da = grad_mut(nodes, *a);
            for (r, &i) in indices.iter().enumerate() {
                for c in 0..n {
                    da[i * n + c] += dy[r * n + c];
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for v in parts {
                let dv = grad_mut(nodes, *v);
                let len = dv.len();
                for (d, g) in dv.iter_mut().zip(&dy[offset..offset + len]) {
                    *d += g;
                }
                offset += len;
            }
        }
        Op::SoftmaxRows(a) => {
            let n = node.cols;
            let da = grad_mut(nodes, *a);
            for r in 0..node.rows {
                let yr = &y[r * n..(r + 1) * n];
                let dr = &dy[r * n..(r + 1) * n];
                let dot: f64 = yr.iter().zip(dr).map(|(p, d)| p * d).sum();
                for j in 0..n {
                    da[r * n + j] += yr[j] * (dr[j] - dot);
                }
            }
        }
        Op::Conv1d {
            x,
            kernel,
            bias,
            width,
            c_in,
        } => {
            let (s, c_out, c_in, width) = (node.rows, node.cols, *c_in, *width);
            let pad_left = width / 2;
            let xv = nodes[x.0].value.clone();
            let kv = nodes[kernel.0].value.clone();
            let db = grad_mut(nodes, *bias);
            for t in 0..s {
                for co in 0..c_out {
                    db[co] += dy[t * c_out + co];
                }
            }
            let mut dk = vec![0.0; kv.len()];
            let mut dx = vec![0.0; xv.len()];
            for t in 0..s {
                let drow = &dy[t * c_out..(t + 1) * c_out];
                for k in 0..width {
                    let src = t as isize + k as isize - pad_left as isize;
                    if src < 0 || src >= s as isize {
                        continue;
                    }
                    let src = src as usize;
                    for ci in 0..c_in {
                        let base = (k * c_in + ci) * c_out;
                        let xval = xv[src * c_in + ci];
                        let mut acc = 0.0;
                        for co in 0..c_out {
                            dk[base + co] += xval * drow[co];
                            acc += kv[base + co] * drow[co];
                        }
                        dx[src * c_in + ci] += acc;
                    }
                }
            }
            grad_mut(nodes, *kernel)
                .iter_mut()
                .zip(&dk)
                .for_each(|(g, d)| *g += d);
            grad_mut(nodes, *x)
                .iter_mut()
                .zip(&dx)
                .for_each(|(g, d)| *g += d);
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            mask,
            xhat,
            inv_std,
            batch,
            count,
        } => {
            let (s, n) = (node.rows, node.cols);
            let gv = nodes[gamma.0].value.clone();
            let valid: Vec<usize> = (0..s).filter(|&r| mask[r]).collect();
            let mut dgamma = vec![0.0; n];
            let mut dbeta = vec![0.0; n];
            let mut sum_dxhat = vec![0.0; n];
            let mut sum_dxhat_xhat = vec![0.0; n];
            for &r in &valid {
                for c in 0..n {
                    let d = dy[r * n + c];
                    let h = xhat[r * n + c];
                    dgamma[c] += d * h;
                    dbeta[c] += d;
                    let dh = d * gv[c];
                    sum_dxhat[c] += dh;
                    sum_dxhat_xhat[c] += dh * h;
                }
            }
            let dx = grad_mut(nodes, *x);
            let cnt = *count as f64;
            for &r in &valid {
                for c in 0..n {
                    let dh = dy[r * n + c] * gv[c];
                    dx[r * n + c] += if *batch {
                        inv_std[c] / cnt
                            * (cnt * dh - sum_dxhat[c] - xhat[r * n + c] * sum_dxhat_xhat[c])
                    } else {
                        dh * inv_std[c]
                    };
                }
            }
            grad_mut(nodes, *gamma)
                .iter_mut()
                .zip(&dgamma)
                .for_each(|(g, d)| *g += d);
            grad_mut(nodes, *beta)
                .iter_mut()
                .zip(&dbeta)
                .for_each(|(g, d)| *g += d);
        }
        Op::CrossEntropy {
            logits,
            gold,
            mask,
            probs,
            count,
        } => {
            if *count == 0 {
                return;
            }
            let c = nodes[logits.0].cols;
            let scale = dy[0] / *count as f64;
            let dl = grad_mut(nodes, *logits);
            for (r, &g) in gold.iter().enumerate() {
                if !mask[r] {
                    continue;
                }
                for j in 0..c {
                    let target = if j == g { 1.0 } else { 0.0 };
                    dl[r * c + j] += scale * (probs[r * c + j] - target);
                }
            }
        }
        Op::Sum(a) => {
            let da = grad_mut(nodes, *a);
            da.iter_mut().for_each(|g| *g += dy[0]);
        }
        Op::Mean(a) => {
            let da = grad_mut(nodes, *a);
            let k = dy[0] / da.len() as f64;
            da.iter_mut().for_each(|g| *g += k);
        }
    }
}
