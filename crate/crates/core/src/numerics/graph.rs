//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records operations as they execute and replays them in
//! reverse to accumulate gradients. Graphs are rebuilt for every forward
//! pass; `backward` may run at most once per graph.
//!
//! Every op validates input shapes (mismatch is a fatal configuration
//! error naming both shapes) and checks its output for NaN/inf so that
//! numerical bugs surface at the op that produced them instead of being
//! masked by clipping.

use crate::error::{Error, Result};
use crate::numerics::linalg;
use crate::numerics::tensor::Tensor;

/// Probabilities are floored at this value before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    RowBroadcastAdd(NodeId, NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Sqrt(NodeId),
    Log(NodeId),
    SoftmaxLast(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    RowSums(NodeId),
    SquaredDiffMean(NodeId, NodeId),
    GatherRows(NodeId, Vec<usize>),
    Pick(NodeId, Vec<(usize, usize)>),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    MinConst(NodeId, f64),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Reshape(NodeId),
    RowScale(NodeId, NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], addressed by node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for `id`, or zeros of the given shape when the node was
    /// unreachable from the loss.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match &self.grads[id.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

/// Append-only operation record. Topological order equals append order;
/// backward visits nodes in reverse append order exactly once.
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor as a leaf; `requires_grad` is taken from the tensor.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let rg = t.requires_grad();
        self.push_unchecked(Op::Leaf, t, rg)
    }

    /// Insert a tensor as a constant leaf regardless of its grad flag.
    pub fn constant(&mut self, mut t: Tensor) -> NodeId {
        t.set_requires_grad(false);
        self.push_unchecked(Op::Leaf, t, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, op: Op, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push_unchecked(op, value, requires_grad))
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    // ── Elementwise and arithmetic ops ──────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("add", Op::Add(a, b), t, self.rg(&[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("sub", Op::Sub(a, b), t, self.rg(&[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("mul", Op::Mul(a, b), t, self.rg(&[a, b]))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("div", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x / y);
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("div", Op::Div(a, b), t, self.rg(&[a, b]))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.value(a).data().iter().map(|&x| -x).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("neg", Op::Neg(a), t, self.rg(&[a]))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let data = self.value(a).data().iter().map(|&x| c * x).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("scale", Op::Scale(a, c), t, self.rg(&[a]))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.value(a).data().iter().map(|&x| x.tanh()).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("tanh", Op::Tanh(a), t, self.rg(&[a]))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("relu", Op::Relu(a), t, self.rg(&[a]))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.value(a).data().iter().map(|&x| x.sqrt()).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("sqrt", Op::Sqrt(a), t, self.rg(&[a]))
    }

    /// Natural log with inputs floored at [`LOG_FLOOR`] so that vanishing
    /// probabilities keep the loss finite.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| x.max(LOG_FLOOR).ln())
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("log", Op::Log(a), t, self.rg(&[a]))
    }

    /// Elementwise min(x, c); the clip used by the attack loss.
    pub fn min_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let data = self.value(a).data().iter().map(|&x| x.min(c)).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("min_const", Op::MinConst(a, c), t, self.rg(&[a]))
    }

    // ── Matrix ops ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let mut out = vec![0.0; m * n];
        linalg::matmul(va.data(), vb.data(), m, k, n, &mut out);
        let t = Tensor::matrix(m, n, out)?;
        self.push("matmul", Op::Matmul(a, b), t, self.rg(&[a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        if v.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                left: v.shape().to_vec(),
                right: vec![],
            });
        }
        let (r, c) = (v.rows(), v.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v.data()[i * c + j];
            }
        }
        let t = Tensor::matrix(c, r, out)?;
        self.push("transpose", Op::Transpose(a), t, self.rg(&[a]))
    }

    /// Add a row vector `b` (shape `[c]`) to every row of matrix `a` (`r x c`).
    pub fn row_broadcast_add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 1 || va.cols() != vb.cols() {
            return Err(Error::ShapeMismatch {
                op: "row_broadcast_add",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let (r, c) = (va.rows(), va.cols());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(va.data()[i * c + j] + vb.data()[j]);
            }
        }
        let t = Tensor::matrix(r, c, out)?;
        self.push(
            "row_broadcast_add",
            Op::RowBroadcastAdd(a, b),
            t,
            self.rg(&[a, b]),
        )
    }

    /// Scale each row of matrix `a` by the matching entry of vector `v`.
    pub fn row_scale(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (va, vv) = (self.value(a), self.value(v));
        if va.shape().len() != 2 || vv.shape().len() != 1 || va.rows() != vv.cols() {
            return Err(Error::ShapeMismatch {
                op: "row_scale",
                left: va.shape().to_vec(),
                right: vv.shape().to_vec(),
            });
        }
        let (r, c) = (va.rows(), va.cols());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let s = vv.data()[i];
            out.extend(va.row(i).iter().map(|&x| x * s));
        }
        let t = Tensor::matrix(r, c, out)?;
        self.push("row_scale", Op::RowScale(a, v), t, self.rg(&[a, v]))
    }

    /// Rows rescaled to unit Euclidean norm.
    pub fn row_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let sq = self.mul(a, a)?;
        let norms_sq = self.row_sums(sq)?;
        let norms = self.sqrt(norms_sq)?;
        let ones = self.constant(Tensor::new(
            vec![self.value(a).rows()],
            vec![1.0; self.value(a).rows()],
        )?);
        let inv = self.div(ones, norms)?;
        self.row_scale(a, inv)
    }

    /// Softmax over the last axis (per row for matrices).
    pub fn softmax_last(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let c = v.cols();
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|e| e / z));
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push("softmax", Op::SoftmaxLast(a), t, self.rg(&[a]))
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push("mean", Op::Mean(a), Tensor::scalar(m), self.rg(&[a]))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().sum::<f64>();
        self.push("sum", Op::Sum(a), Tensor::scalar(s), self.rg(&[a]))
    }

    /// Per-row sums of a matrix: `(r x c) -> [r]`.
    pub fn row_sums(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        if v.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "row_sums",
                left: v.shape().to_vec(),
                right: vec![],
            });
        }
        let c = v.cols();
        let out: Vec<f64> = v.data().chunks(c).map(|row| row.iter().sum()).collect();
        let t = Tensor::vector(out);
        self.push("row_sums", Op::RowSums(a), t, self.rg(&[a]))
    }

    /// Mean over all entries of the squared difference of two same-shaped
    /// tensors.
    pub fn squared_diff_mean(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("squared_diff_mean", a, b)?;
        let n = self.value(a).numel() as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        self.push(
            "squared_diff_mean",
            Op::SquaredDiffMean(a, b),
            Tensor::scalar(s / n),
            self.rg(&[a, b]),
        )
    }

    // ── Indexing ────────────────────────────────────────────────────────

    /// Gather rows of a matrix by index (duplicates allowed).
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let v = self.value(a);
        if v.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                left: v.shape().to_vec(),
                right: vec![indices.len()],
            });
        }
        let (r, c) = (v.rows(), v.cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::Data(format!(
                "gather_rows index {bad} out of range for {r} rows"
            )));
        }
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(v.row(i));
        }
        let t = Tensor::matrix(indices.len(), c, out)?;
        self.push(
            "gather_rows",
            Op::GatherRows(a, indices.to_vec()),
            t,
            self.rg(&[a]),
        )
    }

    /// Pick individual elements `(row, col)` of a matrix into a vector.
    pub fn pick(&mut self, a: NodeId, coords: &[(usize, usize)]) -> Result<NodeId> {
        let v = self.value(a);
        let (r, c) = (v.rows(), v.cols());
        if let Some(&(i, j)) = coords.iter().find(|&&(i, j)| i >= r || j >= c) {
            return Err(Error::Data(format!(
                "pick index ({i},{j}) out of range for {r}x{c}"
            )));
        }
        let out: Vec<f64> = coords.iter().map(|&(i, j)| v.data()[i * c + j]).collect();
        let t = Tensor::vector(out);
        self.push("pick", Op::Pick(a, coords.to_vec()), t, self.rg(&[a]))
    }

    pub fn slice_cols(&mut self, a: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let v = self.value(a);
        if v.shape().len() != 2 || hi > v.cols() || lo >= hi {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                left: v.shape().to_vec(),
                right: vec![lo, hi],
            });
        }
        let (r, c) = (v.rows(), v.cols());
        let w = hi - lo;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&v.data()[i * c + lo..i * c + hi]);
        }
        let t = Tensor::matrix(r, w, out)?;
        self.push("slice_cols", Op::SliceCols(a, lo, hi), t, self.rg(&[a]))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let r = self.value(parts[0]).rows();
        for &p in parts {
            if self.value(p).shape().len() != 2 || self.value(p).rows() != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::matrix(r, total, out)?;
        let rg = self.rg(parts);
        self.push("concat_cols", Op::ConcatCols(parts.to_vec()), t, rg)
    }

    /// View the same row-major data under a new shape.
    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a);
        if shape.iter().product::<usize>() != v.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: v.shape().to_vec(),
                right: shape,
            });
        }
        let t = Tensor::new(shape, v.data().to_vec())?;
        self.push("reshape", Op::Reshape(a), t, self.rg(&[a]))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let c = self.value(parts[0]).cols();
        for &p in parts {
            if self.value(p).shape().len() != 2 || self.value(p).cols() != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut out = Vec::with_capacity(total * c);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::matrix(total, c, out)?;
        let rg = self.rg(parts);
        self.push("concat_rows", Op::ConcatRows(parts.to_vec()), t, rg)
    }

    // ── Normalization ───────────────────────────────────────────────────

    /// Per-row layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let c = v.cols();
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: v.shape().to_vec(),
                right: self.value(gamma).shape().to_vec(),
            });
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks(c) {
            let (mu, istd) = row_moments(row);
            for j in 0..c {
                out.push((row[j] - mu) * istd * g[j] + b[j]);
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            Op::LayerNorm { x, gamma, beta },
            t,
            self.rg(&[x, gamma, beta]),
        )
    }

    // ── Composites ──────────────────────────────────────────────────────

    /// Scaled dot-product attention: `softmax(q k^T / sqrt(d)) v`.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId> {
        let d = self.value(k).cols() as f64;
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scaled = self.scale(scores, 1.0 / d.sqrt())?;
        let weights = self.softmax_last(scaled)?;
        self.matmul(weights, v)
    }

    /// Mean cross-entropy of `logits` (`n x classes`) against per-row
    /// targets, skipping rows whose index is not listed in `rows`.
    pub fn cross_entropy_mean(
        &mut self,
        logits: NodeId,
        targets: &[(usize, usize)],
    ) -> Result<NodeId> {
        let probs = self.softmax_last(logits)?;
        let picked = self.pick(probs, targets)?;
        let logp = self.log(picked)?;
        let m = self.mean(logp)?;
        self.neg(m)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns gradients for every
    /// `requires_grad` node reachable from the loss; a second call on the
    /// same graph is rejected.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        self.backward_done = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let tensors = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].requires_grad).map(|data| {
                    Tensor::new(self.nodes[i].value.shape().to_vec(), data)
                        .expect("gradient shape matches value shape")
                })
            })
            .collect();
        Ok(Gradients { grads: tensors })
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn add_grad(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, contrib: &[f64]) {
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.numel()]);
        linalg::axpy(1.0, contrib, slot);
    }

    fn accumulate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    self.add_grad(grads, *a, g);
                }
                if self.needs(*b) {
                    self.add_grad(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    self.add_grad(grads, *a, g);
                }
                if self.needs(*b) {
                    let neg: Vec<f64> = g.iter().map(|&v| -v).collect();
                    self.add_grad(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let da = zip_slices(g, self.value(*b).data(), |gv, bv| gv * bv);
                    self.add_grad(grads, *a, &da);
                }
                if self.needs(*b) {
                    let db = zip_slices(g, self.value(*a).data(), |gv, av| gv * av);
                    self.add_grad(grads, *b, &db);
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let da = zip_slices(g, bv, |gv, b| gv / b);
                    self.add_grad(grads, *a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(&gv, (&a, &b))| -gv * a / (b * b))
                        .collect();
                    self.add_grad(grads, *b, &db);
                }
            }
            Op::Neg(a) => {
                if self.needs(*a) {
                    let da: Vec<f64> = g.iter().map(|&v| -v).collect();
                    self.add_grad(grads, *a, &da);
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    let da: Vec<f64> = g.iter().map(|&v| c * v).collect();
                    self.add_grad(grads, *a, &da);
                }
            }
            Op::Tanh(a) => {
                if self.needs(*a) {
                    let da = zip_slices(g, y.data(), |gv, yv| gv * (1.0 - yv * yv));
                    self.add_grad(grads, *a, &da);
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let da = zip_slices(g, self.value(*a).data(), |gv, xv| {
                        if xv > 0.0 {
                            gv
                        } else {
                            0.0
                        }
                    });
                    self.add_grad(grads, *a, &da);
                }
            }
            Op::Sqrt(a) => {
                if self.needs(*a) {
                    let da = zip_slices(g, y.data(), |gv, yv| gv / (2.0 * yv));
                    self.add_grad(grads, *a, &da);
                }
            }
            Op::Log(a) => {
                if self.needs(*a) {
                    let da = zip_slices(g, self.value(*a).data(), |gv, xv| {
                        if xv > LOG_FLOOR {
                            gv / xv
                        } else {
                            0.0
                        }
                    });
                    self.add_grad(grads, *a, &da);
                }
            }
            Op::MinConst(a, c) => {
                if self.needs(*a) {
                    let da = zip_slices(g, self.value(*a).data(), |gv, xv| {
                        if xv <= *c {
                            gv
                        } else {
                            0.0
                        }
                    });
                    self.add_grad(grads, *a, &da);
                }
            }
            Op::Matmul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.needs(*a) {
                    // dA = g @ B^T
                    let mut da = vec![0.0; m * k];
                    linalg::matmul_bt_acc(g, vb.data(), m, n, k, &mut da);
                    self.add_grad(grads, *a, &da);
                }
                if self.needs(*b) {
                    // dB = A^T @ g
                    let mut db = vec![0.0; k * n];
                    linalg::matmul_at_acc(va.data(), g, m, k, n, &mut db);
                    self.add_grad(grads, *b, &db);
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    let (r, c) = (y.rows(), y.cols()); // transposed dims
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            da[j * r + i] = g[i * c + j];
                        }
                    }
                    self.add_grad(grads, *a, &da);
                }
            }
            Op::RowBroadcastAdd(a, b) => {
                if self.needs(*a) {
                    self.add_grad(grads, *a, g);
                }
                if self.needs(*b) {
                    let c = self.value(*b).numel();
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        linalg::axpy(1.0, row, &mut db);
                    }
                    self.add_grad(grads, *b, &db);
                }
            }
            Op::SoftmaxLast(a) => {
                if self.needs(*a) {
                    let c = y.cols();
                    let mut da = Vec::with_capacity(g.len());
                    for (grow, yrow) in g.chunks(c).zip(y.data().chunks(c)) {
                        let dot = linalg::dot(grow, yrow);
                        da.extend(grow.iter().zip(yrow).map(|(&gv, &yv)| yv * (gv - dot)));
                    }
                    self.add_grad(grads, *a, &da);
                }
            }
            Op::Mean(a) => {
                if self.needs(*a) {
                    let n = self.value(*a).numel();
                    let da = vec![g[0] / n as f64; n];
                    self.add_grad(grads, *a, &da);
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    let da = vec![g[0]; self.value(*a).numel()];
                    self.add_grad(grads, *a, &da);
                }
            }
            Op::RowSums(a) => {
                if self.needs(*a) {
                    let c = self.value(*a).cols();
                    let mut da = Vec::with_capacity(self.value(*a).numel());
                    for &gv in g {
                        da.extend(std::iter::repeat(gv).take(c));
                    }
                    self.add_grad(grads, *a, &da);
                }
            }
            Op::SquaredDiffMean(a, b) => {
                let n = self.value(*a).numel() as f64;
                let scale = 2.0 * g[0] / n;
                let diff: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(&x, &y2)| scale * (x - y2))
                    .collect();
                if self.needs(*a) {
                    self.add_grad(grads, *a, &diff);
                }
                if self.needs(*b) {
                    let db: Vec<f64> = diff.iter().map(|&v| -v).collect();
                    self.add_grad(grads, *b, &db);
                }
            }
            Op::GatherRows(a, indices) => {
                if self.needs(*a) {
                    let c = self.value(*a).cols();
                    let mut da = vec![0.0; self.value(*a).numel()];
                    for (pos, &src) in indices.iter().enumerate() {
                        linalg::axpy(1.0, &g[pos * c..(pos + 1) * c], &mut da[src * c..(src + 1) * c]);
                    }
                    self.add_grad(grads, *a, &da);
                }
            }
            Op::Pick(a, coords) => {
                if self.needs(*a) {
                    let c = self.value(*a).cols();
                    let mut da = vec![0.0; self.value(*a).numel()];
                    for (pos, &(i, j)) in coords.iter().enumerate() {
                        da[i * c + j] += g[pos];
                    }
                    self.add_grad(grads, *a, &da);
                }
            }
            Op::SliceCols(a, lo, _hi) => {
                if self.needs(*a) {
                    let c = self.value(*a).cols();
                    let w = y.cols();
                    let mut da = vec![0.0; self.value(*a).numel()];
                    for i in 0..y.rows() {
                        linalg::axpy(1.0, &g[i * w..(i + 1) * w], &mut da[i * c + lo..i * c + lo + w]);
                    }
                    self.add_grad(grads, *a, &da);
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let r = self.value(p).rows();
                        let mut dp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            dp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        self.add_grad(grads, p, &dp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let c = y.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.needs(p) {
                        self.add_grad(grads, p, &g[offset * c..(offset + r) * c]);
                    }
                    offset += r;
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    self.add_grad(grads, *a, g);
                }
            }
            Op::RowScale(a, v) => {
                let (av, vv) = (self.value(*a), self.value(*v));
                let c = av.cols();
                if self.needs(*a) {
                    let mut da = Vec::with_capacity(g.len());
                    for (i, grow) in g.chunks(c).enumerate() {
                        let s = vv.data()[i];
                        da.extend(grow.iter().map(|&gv| gv * s));
                    }
                    self.add_grad(grads, *a, &da);
                }
                if self.needs(*v) {
                    let dv: Vec<f64> = g
                        .chunks(c)
                        .zip(av.data().chunks(c))
                        .map(|(grow, arow)| linalg::dot(grow, arow))
                        .collect();
                    self.add_grad(grads, *v, &dv);
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma).data();
                let c = xv.cols();
                let cf = c as f64;
                let mut dx = vec![0.0; xv.numel()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (r, (xrow, grow)) in xv.data().chunks(c).zip(g.chunks(c)).enumerate() {
                    let (mu, istd) = row_moments(xrow);
                    let xhat: Vec<f64> = xrow.iter().map(|&v| (v - mu) * istd).collect();
                    for j in 0..c {
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                    }
                    if self.needs(*x) {
                        let dxhat: Vec<f64> = (0..c).map(|j| grow[j] * gv[j]).collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / cf;
                        let mean_dxhat_xhat =
                            dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<f64>() / cf;
                        let drow = &mut dx[r * c..(r + 1) * c];
                        for j in 0..c {
                            drow[j] = istd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        }
                    }
                }
                if self.needs(*x) {
                    self.add_grad(grads, *x, &dx);
                }
                if self.needs(*gamma) {
                    self.add_grad(grads, *gamma, &dgamma);
                }
                if self.needs(*beta) {
                    self.add_grad(grads, *beta, &dbeta);
                }
            }
        }
    }
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let c = row.len() as f64;
    let mu = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / c;
    (mu, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn zip_slices(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_returns_input() {
        let mut g = Graph::new();
        let eye = g.constant(Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap());
        let a = g.constant(Tensor::matrix(3, 2, (0..6).map(|v| v as f64).collect()).unwrap());
        let out = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(out).data(), g.value(a).data());
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = g.softmax_last(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn squared_diff_mean_of_equal_tensors_is_zero() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let b = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let d = g.squared_diff_mean(a, b).unwrap();
        assert_eq!(g.value(d).item(), 0.0);
    }

    #[test]
    fn grad_of_x_squared_is_two_x() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![3.0]).with_grad());
        let xx = g.mul(x, x).unwrap();
        let loss = g.sum(xx).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn grad_of_sum_is_all_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, -2.0, 0.5]).with_grad());
        let loss = g.sum(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0).with_grad());
        let loss = g.mul(x, x).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::BackwardTwice)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.0).with_grad());
        let orphan = g.leaf(Tensor::vector(vec![5.0, 6.0]).with_grad());
        let loss = g.mul(x, x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(orphan).is_none());
        assert_eq!(grads.get_or_zeros(orphan, &[2]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn attack_loss_clip_arithmetic() {
        // l_mse - min(l_ce, lambda) with l_mse=0.2, l_ce=7.1, lambda=5 -> -4.8
        let mut g = Graph::new();
        let mse = g.constant(Tensor::scalar(0.2));
        let ce = g.constant(Tensor::scalar(7.1));
        let clipped = g.min_const(ce, 5.0).unwrap();
        let loss = g.sub(mse, clipped).unwrap();
        assert!((g.value(loss).item() - (-4.8)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_forward_is_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(1.0));
        let b = g.constant(Tensor::scalar(0.0));
        assert!(matches!(g.div(a, b), Err(Error::NonFinite { op: "div" })));
    }
}
