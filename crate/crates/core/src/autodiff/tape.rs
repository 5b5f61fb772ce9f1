//! Eager reverse-mode tape.
//!
//! Every operation computes its value immediately and, when recording, appends
//! a node holding its inputs and whatever it needs for the backward rule.
//! `backward` walks the nodes in exact reverse recording order.

use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::{AutodiffError, Tensor};
use crate::lane_graph::SparseBool;

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    SparseMatMul(Arc<SparseBool>, Var),
    Relu(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    SmoothL1 { pred: Var, target: Vec<f64>, delta: f64 },
    BceWithLogits { logits: Var, target: Vec<f64> },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Values are kept for every node; backward rules only
/// when recording is on.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
    params: Vec<Var>,
    relu_mask: Vec<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zeros when it did not influence the output.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; tape.value(v).numel()], <[f64]>::to_vec)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize), AutodiffError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(AutodiffError::Invalid { op, msg: format!("expected a 2-D tensor, got shape {s:?}") }),
    }
}

/// `c = op(a) * op(b) + beta * c` where `op(a)` is `m x k` and `op(b)` is
/// `k x n`. A transposed operand is stored in the transposed layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements (checked above
    // in debug builds, guaranteed by every caller) and the strides address
    // only those elements.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), recording: true, params: Vec::new(), relu_mask: Vec::new() }
    }

    /// A tape that records values only; `backward` yields no gradients.
    pub fn no_grad() -> Self {
        Tape { nodes: Vec::new(), recording: false, params: Vec::new(), relu_mask: Vec::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs_grad: bool) -> Var {
        let requires_grad = self.recording && inputs_grad;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        let rg = self.recording;
        self.nodes.push(Node { value: Arc::new(t), op: Op::Leaf, requires_grad: rg });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: Arc::new(t), op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Binds every parameter of `store` as a gradient-receiving leaf. The
    /// tensors are shared, not copied.
    pub fn bind(&mut self, store: &ParamStore) {
        self.params = store
            .shared_tensors()
            .map(|t| {
                let rg = self.recording;
                self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: rg });
                Var(self.nodes.len() - 1)
            })
            .collect();
    }

    /// Leaf bound to parameter `id` by [`Tape::bind`].
    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.index()]
    }

    /// Per-parameter gradients in store order, zero-filled for unused ones.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Vec<f64>> {
        self.params.iter().map(|&v| grads.get_or_zeros(self, v)).collect()
    }

    /// Activation pattern of every ReLU evaluated so far (`input > 0`), kept
    /// whether or not the tape records. Used to detect finite-difference
    /// probes that straddle a kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.relu_mask.clone()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = require_2d("matmul", ta)?;
        let (k2, n) = require_2d("matmul", tb)?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, AutodiffError> {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * s).collect())?;
        let rg = self.requires_grad(a);
        Ok(self.push(t, Op::Scale(a, s), rg))
    }

    /// `x[m, n] + b` with `b` of shape `[n]` or `[1, n]` added to every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var, AutodiffError> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (m, n) = require_2d("add_row", tx)?;
        if tb.numel() != n || tb.rows() != 1 {
            return Err(shape_err("add_row", tx, tb));
        }
        let bias = tb.data();
        let mut data = tx.data().to_vec();
        for r in 0..m {
            for (v, bb) in data[r * n..(r + 1) * n].iter_mut().zip(bias) {
                *v += bb;
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(b);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::AddRow(x, b), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = parts.first().ok_or(AutodiffError::Invalid { op: "concat_cols", msg: "no inputs".into() })?;
        let rows = require_2d("concat_cols", self.value(*first))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = require_2d("concat_cols", self.value(p))?;
            if r != rows {
                return Err(shape_err("concat_cols", self.value(*first), self.value(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(Tensor::new(vec![rows, total], data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = parts.first().ok_or(AutodiffError::Invalid { op: "concat_rows", msg: "no inputs".into() })?;
        let cols = require_2d("concat_rows", self.value(*first))?.1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = require_2d("concat_rows", self.value(p))?;
            if c != cols {
                return Err(shape_err("concat_rows", self.value(*first), self.value(p)));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Output row `j` is input row `idx[j]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, AutodiffError> {
        let tx = self.value(x);
        let (m, n) = require_2d("gather_rows", tx)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(AutodiffError::Invalid { op: "gather_rows", msg: format!("index {bad} out of range for {m} rows") });
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(tx.row(i));
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(vec![idx.len(), n], data)?, Op::GatherRows(x, idx.to_vec()), rg))
    }

    /// Output has `out_rows` rows; input row `j` is summed into row `idx[j]`.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], out_rows: usize) -> Result<Var, AutodiffError> {
        let tx = self.value(x);
        let (m, n) = require_2d("scatter_add_rows", tx)?;
        if m != idx.len() {
            return Err(AutodiffError::Invalid {
                op: "scatter_add_rows",
                msg: format!("{m} rows but {} indices", idx.len()),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= out_rows) {
            return Err(AutodiffError::Invalid {
                op: "scatter_add_rows",
                msg: format!("index {bad} out of range for {out_rows} rows"),
            });
        }
        let mut data = vec![0.0; out_rows * n];
        for (j, &i) in idx.iter().enumerate() {
            for (o, v) in data[i * n..(i + 1) * n].iter_mut().zip(tx.row(j)) {
                *o += v;
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(vec![out_rows, n], data)?, Op::ScatterAddRows(x, idx.to_vec()), rg))
    }

    /// `adj * x` for a boolean adjacency: row `p` is the sum of rows `q` of
    /// `x` with `adj[p][q]` set.
    pub fn sparse_matmul(&mut self, adj: Arc<SparseBool>, x: Var) -> Result<Var, AutodiffError> {
        let tx = self.value(x);
        let (m, n) = require_2d("sparse_matmul", tx)?;
        if adj.size() != m {
            return Err(AutodiffError::ShapeMismatch {
                op: "sparse_matmul",
                lhs: vec![adj.size(), adj.size()],
                rhs: tx.shape().to_vec(),
            });
        }
        let mut data = vec![0.0; m * n];
        for p in 0..m {
            let out = &mut data[p * n..(p + 1) * n];
            for &q in adj.row(p) {
                for (o, v) in out.iter_mut().zip(tx.row(q as usize)) {
                    *o += v;
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::SparseMatMul(adj, x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|&v| v.max(0.0)).collect())?;
        let mask = tx.data().iter().map(|&v| v > 0.0).collect::<Vec<_>>();
        self.relu_mask.extend(mask);
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::Relu(x), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|&v| sigmoid(v)).collect())?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::Sigmoid(x), rg))
    }

    /// Row-wise layer normalization with per-channel affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, AutodiffError> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (m, n) = require_2d("layer_norm", tx)?;
        if tg.numel() != n || tb.numel() != n {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        let op = Op::LayerNorm { x, gamma, beta, xhat, inv_std };
        Ok(self.push(Tensor::new(vec![m, n], out)?, op, rg))
    }

    /// Elementwise smooth-L1 (Huber with transition `delta`) against a
    /// constant target.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor, delta: f64) -> Result<Var, AutodiffError> {
        let tp = self.value(pred);
        if tp.numel() != target.numel() {
            return Err(shape_err("smooth_l1", tp, target));
        }
        let data = tp
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| {
                let e = (p - t).abs();
                if e < delta {
                    0.5 * e * e / delta
                } else {
                    e - 0.5 * delta
                }
            })
            .collect();
        let t = Tensor::new(tp.shape().to_vec(), data)?;
        let rg = self.requires_grad(pred);
        Ok(self.push(t, Op::SmoothL1 { pred, target: target.data().to_vec(), delta }, rg))
    }

    /// Elementwise binary cross-entropy on logits against constant targets.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor) -> Result<Var, AutodiffError> {
        let tl = self.value(logits);
        if tl.numel() != target.numel() {
            return Err(shape_err("bce_with_logits", tl, target));
        }
        let data = tl.data().iter().zip(target.data()).map(|(&x, &y)| bce_logit(x, y)).collect();
        let t = Tensor::new(tl.shape().to_vec(), data)?;
        let rg = self.requires_grad(logits);
        Ok(self.push(t, Op::BceWithLogits { logits, target: target.data().to_vec() }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = self.value(x).data().iter().sum();
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let tx = self.value(x);
        if tx.numel() == 0 {
            return Err(AutodiffError::Invalid { op: "mean", msg: "empty tensor".into() });
        }
        let s = tx.data().iter().sum::<f64>() / tx.numel() as f64;
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    /// Column means of `[m, n]`, shape `[1, n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let tx = self.value(x);
        let (m, n) = require_2d("mean_rows", tx)?;
        if m == 0 {
            return Err(AutodiffError::Invalid { op: "mean_rows", msg: "no rows".into() });
        }
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(tx.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::new(vec![1, n], out)?, Op::MeanRows(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.requires_grad(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// 1-D convolution over the rows (time) of `x: [T, C_in]` with kernel
    /// `k`, symmetric zero padding `pad` and `stride`.
    ///
    /// `weight` is `[k * C_in, C_out]` (tap-major), `bias` is `[C_out]`.
    /// Built from gather + matmul so only those backward rules are involved.
    pub fn conv1d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var, AutodiffError> {
        let (t, c_in) = require_2d("conv1d", self.value(x))?;
        let (wk, _) = require_2d("conv1d", self.value(weight))?;
        if wk != k * c_in || stride == 0 || k == 0 {
            return Err(shape_err("conv1d", self.value(x), self.value(weight)));
        }
        let padded_len = t + 2 * pad;
        if padded_len < k {
            return Err(AutodiffError::Invalid { op: "conv1d", msg: format!("sequence length {t} shorter than kernel {k}") });
        }
        let out_len = (padded_len - k) / stride + 1;
        let zeros = self.constant(Tensor::zeros(&[1, c_in]));
        // Row `t` of the source is padded row `t + pad`; row index `t` is the
        // zero row.
        let src = self.concat_rows(&[x, zeros])?;
        let idx: Vec<usize> = (0..out_len)
            .flat_map(|o| (0..k).map(move |j| o * stride + j))
            .map(|p| if p >= pad && p - pad < t { p - pad } else { t })
            .collect();
        let cols = self.gather_rows(src, &idx)?;
        let cols = self.reshape(cols, &[out_len, k * c_in])?;
        let y = self.matmul(cols, weight)?;
        self.add_row(y, bias)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !self.requires_grad(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backward_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.requires_grad(v) {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; self.value(v).numel()]))
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(m, n, k, g, false, tb.data(), true, ga, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(k, m, n, ta.data(), true, g, false, gb, 1.0);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(o, d)| *o += d);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, d), y) in ga.iter_mut().zip(g).zip(tb.data()) {
                        *o += d * y;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((o, d), x) in gb.iter_mut().zip(g).zip(ta.data()) {
                        *o += d * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, d)| *o += d * s);
                }
            }
            Op::AddRow(x, b) => {
                let n = self.value(*b).numel();
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, d)| *o += d);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(o, d)| *o += d);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut off = 0;
                for &v in parts {
                    let w = self.value(v).cols();
                    if let Some(gv) = self.slot(grads, v) {
                        for r in 0..rows {
                            let src = &g[r * total + off..r * total + off + w];
                            gv[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(o, d)| *o += d);
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &v in parts {
                    let len = self.value(v).numel();
                    if let Some(gv) = self.slot(grads, v) {
                        gv.iter_mut().zip(&g[off..off + len]).for_each(|(o, d)| *o += d);
                    }
                    off += len;
                }
            }
            Op::GatherRows(x, idx) => {
                let n = node.value.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (j, &i) in idx.iter().enumerate() {
                        let src = &g[j * n..(j + 1) * n];
                        gx[i * n..(i + 1) * n].iter_mut().zip(src).for_each(|(o, d)| *o += d);
                    }
                }
            }
            Op::ScatterAddRows(x, idx) => {
                let n = node.value.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (j, &i) in idx.iter().enumerate() {
                        let src = &g[i * n..(i + 1) * n];
                        gx[j * n..(j + 1) * n].iter_mut().zip(src).for_each(|(o, d)| *o += d);
                    }
                }
            }
            Op::SparseMatMul(adj, x) => {
                let n = node.value.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for pr in 0..adj.size() {
                        let src = &g[pr * n..(pr + 1) * n];
                        for &q in adj.row(pr) {
                            let q = q as usize;
                            gx[q * n..(q + 1) * n].iter_mut().zip(src).for_each(|(o, d)| *o += d);
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for ((o, d), v) in gx.iter_mut().zip(g).zip(tx.data()) {
                        if *v > 0.0 {
                            *o += d;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((o, d), s) in gx.iter_mut().zip(g).zip(y) {
                        *o += d * s * (1.0 - s);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let n = node.value.cols();
                let m = node.value.rows();
                let gam = self.value(*gamma).data();
                if let Some(gg) = self.slot(grads, *gamma) {
                    for r in 0..m {
                        for c in 0..n {
                            gg[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for r in 0..m {
                        for c in 0..n {
                            gb[c] += g[r * n + c];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let nf = n as f64;
                    let mut dxhat = vec![0.0; n];
                    for r in 0..m {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..n {
                            let d = g[r * n + c] * gam[c];
                            dxhat[c] = d;
                            sum_d += d;
                            sum_dx += d * xhat[r * n + c];
                        }
                        for c in 0..n {
                            gx[r * n + c] += inv_std[r] / nf * (nf * dxhat[c] - sum_d - xhat[r * n + c] * sum_dx);
                        }
                    }
                }
            }
            Op::SmoothL1 { pred, target, delta } => {
                let tp = self.value(*pred);
                if let Some(gp) = self.slot(grads, *pred) {
                    for (((o, d), v), t) in gp.iter_mut().zip(g).zip(tp.data()).zip(target) {
                        let e = v - t;
                        let de = if e.abs() < *delta { e / delta } else { e.signum() };
                        *o += d * de;
                    }
                }
            }
            Op::BceWithLogits { logits, target } => {
                let tl = self.value(*logits);
                if let Some(gl) = self.slot(grads, *logits) {
                    for (((o, d), x), y) in gl.iter_mut().zip(g).zip(tl.data()).zip(target) {
                        *o += d * (sigmoid(*x) - y);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                let cnt = self.value(*x).numel() as f64;
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0] / cnt);
                }
            }
            Op::MeanRows(x) => {
                let tx = self.value(*x);
                let (m, n) = (tx.rows(), tx.cols());
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..m {
                        for c in 0..n {
                            gx[r * n + c] += g[c] / m as f64;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, d)| *o += d);
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable BCE of a logit `x` against target `y`.
pub fn bce_logit(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}
