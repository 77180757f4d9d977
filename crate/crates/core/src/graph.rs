//! Dense tensors and reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive application in topological order;
//! [`Graph::backward`] replays the record in reverse and accumulates
//! gradients additively, so a node used several times receives the sum of
//! its downstream contributions. Graphs are single-writer and contain no
//! parallelism: replaying a forward pass with identical inputs reproduces
//! identical outputs bit for bit.
//!
//! Reductions (sums, means, softmax normalizers, log-sum-exp) accumulate
//! in `f64` even when the element type is `f32`.

use crate::error::{Error, Result};
use crate::scalar::{logsumexp_slice, softmax_slice, softplus_f64, Scalar};

/// Probability floor applied by [`Graph::cross_entropy`].
pub const CROSS_ENTROPY_FLOOR: f64 = 1e-12;

/// A host-side tensor: a shape, row-major data, and an optional gradient
/// buffer of identical shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
    grad: Option<Vec<E>>,
}

impl<E: Scalar> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::InvalidShape(format!(
                "extents must be positive, got {shape:?}"
            )));
        }
        if numel != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} holds {numel} scalars but {} were provided",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![E::ZERO; numel], grad: None }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| E::from_f64(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[E]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<E>>) {
        if let Some(g) = &grad {
            assert_eq!(g.len(), self.data.len(), "gradient shape mismatch");
        }
        self.grad = grad;
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Convert the element type, preserving values through `f64`.
    pub fn cast<F: Scalar>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| F::from_f64(x.to_f64())).collect(),
            grad: None,
        }
    }
}

/// Identity of a tensor within one differentiation graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Transpose { a: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRowBroadcast { a: usize, bias: usize },
    Scale { a: usize, k: f64 },
    GatherRows { a: usize, rows: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    SliceRows { a: usize, from: usize },
    SliceCols { a: usize, from: usize, src_cols: usize },
    ConcatCols { parts: Vec<usize> },
    Softmax { a: usize, axis: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    MaskFill { a: usize, mask: Vec<bool> },
    Log { a: usize },
    Sigmoid { a: usize },
    Gelu { a: usize },
    LogSumExpRows { a: usize },
    Softplus { a: usize },
    Pick { a: usize, index: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    AffineCombine { parts: Vec<usize>, coeffs: Vec<f64> },
    CrossEntropy { probs: usize, target: usize, clamped: bool },
}

struct Node<E> {
    shape: Vec<usize>,
    data: Vec<E>,
    grad: Vec<E>,
    op: Op,
}

/// A topologically ordered record of primitive applications.
pub struct Graph<E> {
    nodes: Vec<Node<E>>,
    warnings: u64,
}

impl<E: Scalar> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => panic!("expected a 1-D or 2-D tensor, got shape {shape:?}"),
    }
}

impl<E: Scalar> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), warnings: 0 }
    }

    /// Count of soft anomalies (e.g. cross-entropy probability clamps).
    pub fn warnings(&self) -> u64 {
        self.warnings
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[E] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: NodeId) -> &[E] {
        &self.nodes[id.0].grad
    }

    /// Value of a scalar node as `f64`.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let n = &self.nodes[id.0];
        assert_eq!(n.data.len(), 1, "node is not scalar");
        n.data[0].to_f64()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<E>, op: Op) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = self.nodes.len();
        self.nodes.push(Node { shape, data, grad: Vec::new(), op });
        NodeId(id)
    }

    // ── Leaves ───────────────────────────────────────────────────────

    pub fn leaf(&mut self, tensor: &Tensor<E>) -> NodeId {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf)
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<E>) -> NodeId {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "leaf shape/data mismatch");
        self.push(shape, data, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, value: f64) -> NodeId {
        self.push(vec![1], vec![E::from_f64(value)], Op::Leaf)
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = dims2(&self.nodes[a.0].shape);
        let (k2, n) = dims2(&self.nodes[b.0].shape);
        assert_eq!(k, k2, "matmul inner dimensions differ: {k} vs {k2}");
        let mut out = vec![E::ZERO; m * n];
        {
            let ad = &self.nodes[a.0].data;
            let bd = &self.nodes[b.0].data;
            matmul_into(ad, bd, m, k, n, &mut out);
        }
        self.push(vec![m, n], out, Op::MatMul { a: a.0, b: b.0 })
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = dims2(&self.nodes[a.0].shape);
        let ad = &self.nodes[a.0].data;
        let mut out = vec![E::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = ad[i * c + j];
            }
        }
        self.push(vec![c, r], out, Op::Transpose { a: a.0 })
    }

    // ── Elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a.0].shape, self.nodes[b.0].shape, "add shape mismatch");
        let data: Vec<E> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a.0].shape, self.nodes[b.0].shape, "sub shape mismatch");
        let data: Vec<E> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a.0].shape, self.nodes[b.0].shape, "mul shape mismatch");
        let data: Vec<E> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::Mul { a: a.0, b: b.0 })
    }

    /// `a[r, c] + bias[c]`, broadcasting the bias over rows.
    pub fn add_row_broadcast(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (r, c) = dims2(&self.nodes[a.0].shape);
        let bias_len = self.nodes[bias.0].data.len();
        assert_eq!(c, bias_len, "bias width {bias_len} does not match {c} columns");
        let mut data = Vec::with_capacity(r * c);
        {
            let ad = &self.nodes[a.0].data;
            let bd = &self.nodes[bias.0].data;
            for i in 0..r {
                for j in 0..c {
                    data.push(ad[i * c + j] + bd[j]);
                }
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::AddRowBroadcast { a: a.0, bias: bias.0 })
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let kk = E::from_f64(k);
        let data: Vec<E> = self.nodes[a.0].data.iter().map(|&x| x * kk).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::Scale { a: a.0, k })
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let data: Vec<E> = self.nodes[a.0].data.iter().map(|&x| x.ln()).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::Log { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let data: Vec<E> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| E::from_f64(stable_sigmoid(x.to_f64())))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::Sigmoid { a: a.0 })
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let data: Vec<E> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| E::from_f64(gelu_f64(x.to_f64())))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::Gelu { a: a.0 })
    }

    /// Elementwise `ln(1 + exp(x))`.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let data: Vec<E> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| E::from_f64(softplus_f64(x.to_f64())))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::Softplus { a: a.0 })
    }

    // ── Structure ────────────────────────────────────────────────────

    /// Gather rows of a 2-D tensor. Repeated indices are allowed; their
    /// gradients accumulate.
    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> NodeId {
        let (r, c) = dims2(&self.nodes[a.0].shape);
        let mut data = Vec::with_capacity(rows.len() * c);
        for &row in rows {
            assert!(row < r, "row {row} out of range for {r} rows");
            data.extend_from_slice(&self.nodes[a.0].data[row * c..(row + 1) * c]);
        }
        self.push(vec![rows.len(), c], data, Op::GatherRows { a: a.0, rows: rows.to_vec() })
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let (_, c) = dims2(&self.nodes[parts[0].0].shape);
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, pc) = dims2(&self.nodes[p.0].shape);
            assert_eq!(pc, c, "concat_rows column mismatch");
            rows += r;
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        self.push(vec![rows, c], data, Op::ConcatRows { parts: parts.iter().map(|p| p.0).collect() })
    }

    pub fn slice_rows(&mut self, a: NodeId, from: usize, to: usize) -> NodeId {
        let (r, c) = dims2(&self.nodes[a.0].shape);
        assert!(from < to && to <= r, "row slice {from}..{to} out of range for {r} rows");
        let data = self.nodes[a.0].data[from * c..to * c].to_vec();
        self.push(vec![to - from, c], data, Op::SliceRows { a: a.0, from })
    }

    pub fn slice_cols(&mut self, a: NodeId, from: usize, to: usize) -> NodeId {
        let (r, c) = dims2(&self.nodes[a.0].shape);
        assert!(from < to && to <= c, "column slice {from}..{to} out of range for {c} columns");
        let w = to - from;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&self.nodes[a.0].data[i * c + from..i * c + to]);
        }
        self.push(vec![r, w], data, Op::SliceCols { a: a.0, from, src_cols: c })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let (r, _) = dims2(&self.nodes[parts[0].0].shape);
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (pr, pc) = dims2(&self.nodes[p.0].shape);
                assert_eq!(pr, r, "concat_cols row mismatch");
                pc
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p.0].data[i * w..(i + 1) * w]);
            }
        }
        self.push(vec![r, total], data, Op::ConcatCols { parts: parts.iter().map(|p| p.0).collect() })
    }

    /// Replace masked entries with `value` (gradient is zero there).
    /// `mask` is row-major over the whole tensor; `true` means replaced.
    pub fn mask_fill(&mut self, a: NodeId, mask: &[bool], value: f64) -> NodeId {
        assert_eq!(mask.len(), self.nodes[a.0].data.len(), "mask length mismatch");
        let v = E::from_f64(value);
        let data: Vec<E> = self.nodes[a.0]
            .data
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { v } else { x })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::MaskFill { a: a.0, mask: mask.to_vec() })
    }

    // ── Normalization and reductions ─────────────────────────────────

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::InvalidShape(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let axis_len = shape[axis];
        if axis_len == 0 {
            return Err(Error::InvalidShape("softmax over an empty axis".into()));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![E::ZERO; self.nodes[a.0].data.len()];
        {
            let ad = &self.nodes[a.0].data;
            let mut lane = vec![E::ZERO; axis_len];
            let mut lane_out = vec![E::ZERO; axis_len];
            for o in 0..outer {
                for i in 0..inner {
                    for k in 0..axis_len {
                        lane[k] = ad[o * axis_len * inner + k * inner + i];
                    }
                    softmax_slice(&lane, &mut lane_out);
                    for k in 0..axis_len {
                        data[o * axis_len * inner + k * inner + i] = lane_out[k];
                    }
                }
            }
        }
        Ok(self.push(shape, data, Op::Softmax { a: a.0, axis }))
    }

    /// Layer normalization over the last axis with learned affine terms.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        let c = *shape.last().expect("layer_norm needs at least one axis");
        assert_eq!(self.nodes[gamma.0].data.len(), c, "gamma width mismatch");
        assert_eq!(self.nodes[beta.0].data.len(), c, "beta width mismatch");
        let rows = self.nodes[x.0].data.len() / c;
        let mut data = vec![E::ZERO; self.nodes[x.0].data.len()];
        {
            let xd = &self.nodes[x.0].data;
            let gd = &self.nodes[gamma.0].data;
            let bd = &self.nodes[beta.0].data;
            for r in 0..rows {
                let row = &xd[r * c..(r + 1) * c];
                let mean: f64 = row.iter().map(|v| v.to_f64()).sum::<f64>() / c as f64;
                let var: f64 =
                    row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / c as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                for j in 0..c {
                    let xhat = (row[j].to_f64() - mean) * inv_std;
                    data[r * c + j] =
                        E::from_f64(xhat * gd[j].to_f64() + bd[j].to_f64());
                }
            }
        }
        self.push(shape, data, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps })
    }

    /// Row-wise `ln(sum(exp(row)))` for a 2-D tensor, output shape `[r, 1]`.
    pub fn logsumexp_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = dims2(&self.nodes[a.0].shape);
        let mut data = Vec::with_capacity(r);
        for i in 0..r {
            let row = &self.nodes[a.0].data[i * c..(i + 1) * c];
            data.push(E::from_f64(logsumexp_slice(row)));
        }
        self.push(vec![r, 1], data, Op::LogSumExpRows { a: a.0 })
    }

    /// Extract one element of a 1-D or 2-D tensor as a scalar node.
    pub fn pick(&mut self, a: NodeId, row: usize, col: usize) -> NodeId {
        let (r, c) = dims2(&self.nodes[a.0].shape);
        assert!(row < r && col < c, "pick ({row}, {col}) out of range for ({r}, {c})");
        let index = row * c + col;
        let v = self.nodes[a.0].data[index];
        self.push(vec![1], vec![v], Op::Pick { a: a.0, index })
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].data.iter().map(|v| v.to_f64()).sum();
        self.push(vec![1], vec![E::from_f64(s)], Op::SumAll { a: a.0 })
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].data.len() as f64;
        let s: f64 = self.nodes[a.0].data.iter().map(|v| v.to_f64()).sum();
        self.push(vec![1], vec![E::from_f64(s / n)], Op::MeanAll { a: a.0 })
    }

    /// Scalar linear combination `sum_i coeffs[i] * parts[i]`, accumulated
    /// in `f64`. All parts must be scalar nodes.
    pub fn affine_combine(&mut self, parts: &[NodeId], coeffs: &[f64]) -> NodeId {
        assert_eq!(parts.len(), coeffs.len());
        let mut acc = 0.0f64;
        for (p, &k) in parts.iter().zip(coeffs) {
            assert_eq!(self.nodes[p.0].data.len(), 1, "affine_combine parts must be scalar");
            acc += k * self.nodes[p.0].data[0].to_f64();
        }
        self.push(
            vec![1],
            vec![E::from_f64(acc)],
            Op::AffineCombine { parts: parts.iter().map(|p| p.0).collect(), coeffs: coeffs.to_vec() },
        )
    }

    /// Mean of scalar nodes.
    pub fn mean_of(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "mean_of needs at least one term");
        let k = 1.0 / parts.len() as f64;
        let coeffs = vec![k; parts.len()];
        self.affine_combine(parts, &coeffs)
    }

    /// `-ln p[target]` for a normalized probability vector.
    ///
    /// A target probability below [`CROSS_ENTROPY_FLOOR`] is clamped to the
    /// floor (the result stays finite) and the graph's warning counter is
    /// incremented.
    pub fn cross_entropy(&mut self, probs: NodeId, target: usize) -> Result<NodeId> {
        let (r, c) = dims2(&self.nodes[probs.0].shape);
        if r != 1 {
            return Err(Error::InvalidShape(
                "cross_entropy expects a single probability row".into(),
            ));
        }
        if target >= c {
            return Err(Error::InvalidArgument(format!(
                "target index {target} out of range for {c} classes"
            )));
        }
        let p = self.nodes[probs.0].data[target].to_f64();
        let clamped = p < CROSS_ENTROPY_FLOOR;
        if clamped {
            self.warnings += 1;
        }
        let loss = -(p.max(CROSS_ENTROPY_FLOOR)).ln();
        Ok(self.push(
            vec![1],
            vec![E::from_f64(loss)],
            Op::CrossEntropy { probs: probs.0, target, clamped },
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node. Populates gradients for
    /// every node the loss depends on; leaves not on a path to the loss
    /// keep zero gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for node in &mut self.nodes {
            node.grad.clear();
            node.grad.resize(node.data.len(), E::ZERO);
        }
        self.nodes[loss.0].grad[0] = E::ONE;

        for i in (0..=loss.0).rev() {
            // Inputs always precede node i, so split off the tail to hold
            // the node itself while mutating input gradients.
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &tail[0];
            if node.grad.iter().all(|g| *g == E::ZERO) {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, k) = dims2(&head[*a].shape);
                    let n = dims2(&head[*b].shape).1;
                    let g = &node.grad;
                    // dA = G @ B^T
                    {
                        let bd = &head[*b].data;
                        let mut bt = vec![E::ZERO; k * n];
                        for p in 0..k {
                            for q in 0..n {
                                bt[q * k + p] = bd[p * n + q];
                            }
                        }
                        let mut da = vec![E::ZERO; m * k];
                        matmul_into(g, &bt, m, n, k, &mut da);
                        accumulate(&mut head[*a].grad, &da);
                    }
                    // dB = A^T @ G
                    {
                        let ad = &head[*a].data;
                        let mut at = vec![E::ZERO; k * m];
                        for p in 0..m {
                            for q in 0..k {
                                at[q * m + p] = ad[p * k + q];
                            }
                        }
                        let mut db = vec![E::ZERO; k * n];
                        matmul_into(&at, g, k, m, n, &mut db);
                        accumulate(&mut head[*b].grad, &db);
                    }
                }
                Op::Transpose { a } => {
                    let (r, c) = dims2(&node.shape);
                    let g = &node.grad;
                    let ga = &mut head[*a].grad;
                    for p in 0..r {
                        for q in 0..c {
                            ga[q * r + p] += g[p * c + q];
                        }
                    }
                }
                Op::Add { a, b } => {
                    let g = node.grad.clone();
                    accumulate(&mut head[*a].grad, &g);
                    accumulate(&mut head[*b].grad, &g);
                }
                Op::Sub { a, b } => {
                    let g = node.grad.clone();
                    accumulate(&mut head[*a].grad, &g);
                    for (gb, &gv) in head[*b].grad.iter_mut().zip(&g) {
                        *gb -= gv;
                    }
                }
                Op::Mul { a, b } => {
                    let g = &node.grad;
                    let bd = head[*b].data.clone();
                    for ((ga, &gv), &bv) in head[*a].grad.iter_mut().zip(g).zip(&bd) {
                        *ga += gv * bv;
                    }
                    let ad = head[*a].data.clone();
                    for ((gb, &gv), &av) in head[*b].grad.iter_mut().zip(g).zip(&ad) {
                        *gb += gv * av;
                    }
                }
                Op::AddRowBroadcast { a, bias } => {
                    let (r, c) = dims2(&node.shape);
                    let g = &node.grad;
                    accumulate(&mut head[*a].grad, g);
                    let gb = &mut head[*bias].grad;
                    for p in 0..r {
                        for q in 0..c {
                            gb[q] += g[p * c + q];
                        }
                    }
                }
                Op::Scale { a, k } => {
                    let kk = E::from_f64(*k);
                    for (ga, &gv) in head[*a].grad.iter_mut().zip(&node.grad) {
                        *ga += gv * kk;
                    }
                }
                Op::GatherRows { a, rows } => {
                    let c = dims2(&head[*a].shape).1;
                    let g = &node.grad;
                    let ga = &mut head[*a].grad;
                    for (out_row, &src_row) in rows.iter().enumerate() {
                        for q in 0..c {
                            ga[src_row * c + q] += g[out_row * c + q];
                        }
                    }
                }
                Op::ConcatRows { parts } => {
                    let g = &node.grad;
                    let mut offset = 0;
                    for &p in parts {
                        let len = head[p].data.len();
                        let slice = &g[offset..offset + len];
                        for (gp, &gv) in head[p].grad.iter_mut().zip(slice) {
                            *gp += gv;
                        }
                        offset += len;
                    }
                }
                Op::SliceRows { a, from } => {
                    let c = dims2(&head[*a].shape).1;
                    let g = &node.grad;
                    let ga = &mut head[*a].grad;
                    for (idx, &gv) in g.iter().enumerate() {
                        ga[from * c + idx] += gv;
                    }
                }
                Op::SliceCols { a, from, src_cols } => {
                    let (r, w) = dims2(&node.shape);
                    let g = &node.grad;
                    let ga = &mut head[*a].grad;
                    for p in 0..r {
                        for q in 0..w {
                            ga[p * src_cols + from + q] += g[p * w + q];
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let (r, total) = dims2(&node.shape);
                    let g = &node.grad;
                    let widths: Vec<usize> =
                        parts.iter().map(|&p| dims2(&head[p].shape).1).collect();
                    let mut col = 0;
                    for (&p, &w) in parts.iter().zip(&widths) {
                        let gp = &mut head[p].grad;
                        for row in 0..r {
                            for q in 0..w {
                                gp[row * w + q] += g[row * total + col + q];
                            }
                        }
                        col += w;
                    }
                }
                Op::Softmax { a, axis } => {
                    let shape = &node.shape;
                    let axis_len = shape[*axis];
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let s = &node.data;
                    let g = &node.grad;
                    let ga = &mut head[*a].grad;
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut dot = 0.0f64;
                            for k in 0..axis_len {
                                let idx = o * axis_len * inner + k * inner + i;
                                dot += g[idx].to_f64() * s[idx].to_f64();
                            }
                            for k in 0..axis_len {
                                let idx = o * axis_len * inner + k * inner + i;
                                ga[idx] += E::from_f64(
                                    s[idx].to_f64() * (g[idx].to_f64() - dot),
                                );
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let c = *node.shape.last().unwrap();
                    let rows = node.data.len() / c;
                    let g = &node.grad;
                    let xd = head[*x].data.clone();
                    let gd = head[*gamma].data.clone();
                    let mut dx = vec![0.0f64; node.data.len()];
                    let mut dgamma = vec![0.0f64; c];
                    let mut dbeta = vec![0.0f64; c];
                    for r in 0..rows {
                        let row = &xd[r * c..(r + 1) * c];
                        let grow = &g[r * c..(r + 1) * c];
                        let mean: f64 =
                            row.iter().map(|v| v.to_f64()).sum::<f64>() / c as f64;
                        let var: f64 = row
                            .iter()
                            .map(|v| (v.to_f64() - mean).powi(2))
                            .sum::<f64>()
                            / c as f64;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> =
                            row.iter().map(|v| (v.to_f64() - mean) * inv_std).collect();
                        let mut dxhat = vec![0.0f64; c];
                        for j in 0..c {
                            let gj = grow[j].to_f64();
                            dgamma[j] += gj * xhat[j];
                            dbeta[j] += gj;
                            dxhat[j] = gj * gd[j].to_f64();
                        }
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        let cf = c as f64;
                        for j in 0..c {
                            dx[r * c + j] = inv_std / cf
                                * (cf * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    for (ga, d) in head[*x].grad.iter_mut().zip(&dx) {
                        *ga += E::from_f64(*d);
                    }
                    for (gg, d) in head[*gamma].grad.iter_mut().zip(&dgamma) {
                        *gg += E::from_f64(*d);
                    }
                    for (gb, d) in head[*beta].grad.iter_mut().zip(&dbeta) {
                        *gb += E::from_f64(*d);
                    }
                }
                Op::MaskFill { a, mask } => {
                    let g = &node.grad;
                    let ga = &mut head[*a].grad;
                    for (idx, (&gv, &m)) in g.iter().zip(mask).enumerate() {
                        if !m {
                            ga[idx] += gv;
                        }
                    }
                }
                Op::Log { a } => {
                    let ad = head[*a].data.clone();
                    for ((ga, &gv), &av) in head[*a].grad.iter_mut().zip(&node.grad).zip(&ad) {
                        *ga += gv / av;
                    }
                }
                Op::Sigmoid { a } => {
                    let s = &node.data;
                    for ((ga, &gv), &sv) in head[*a].grad.iter_mut().zip(&node.grad).zip(s) {
                        *ga += gv * sv * (E::ONE - sv);
                    }
                }
                Op::Gelu { a } => {
                    let ad = head[*a].data.clone();
                    for ((ga, &gv), &av) in head[*a].grad.iter_mut().zip(&node.grad).zip(&ad) {
                        *ga += E::from_f64(gv.to_f64() * gelu_grad_f64(av.to_f64()));
                    }
                }
                Op::LogSumExpRows { a } => {
                    let (r, c) = dims2(&head[*a].shape);
                    let g = &node.grad;
                    let ad = head[*a].data.clone();
                    let ga = &mut head[*a].grad;
                    let mut sm = vec![E::ZERO; c];
                    for p in 0..r {
                        softmax_slice(&ad[p * c..(p + 1) * c], &mut sm);
                        let gp = g[p];
                        for q in 0..c {
                            ga[p * c + q] += gp * sm[q];
                        }
                    }
                }
                Op::Softplus { a } => {
                    let ad = head[*a].data.clone();
                    for ((ga, &gv), &av) in head[*a].grad.iter_mut().zip(&node.grad).zip(&ad) {
                        *ga += E::from_f64(gv.to_f64() * stable_sigmoid(av.to_f64()));
                    }
                }
                Op::Pick { a, index } => {
                    let g = node.grad[0];
                    head[*a].grad[*index] += g;
                }
                Op::SumAll { a } => {
                    let g = node.grad[0];
                    for ga in head[*a].grad.iter_mut() {
                        *ga += g;
                    }
                }
                Op::MeanAll { a } => {
                    let n = head[*a].data.len() as f64;
                    let g = E::from_f64(node.grad[0].to_f64() / n);
                    for ga in head[*a].grad.iter_mut() {
                        *ga += g;
                    }
                }
                Op::AffineCombine { parts, coeffs } => {
                    let g = node.grad[0].to_f64();
                    for (&p, &k) in parts.iter().zip(coeffs) {
                        head[p].grad[0] += E::from_f64(g * k);
                    }
                }
                Op::CrossEntropy { probs, target, clamped } => {
                    // d(-ln p_t)/dp_t = -1/p_t; zero in the clamped region.
                    if !*clamped {
                        let p = head[*probs].data[*target].to_f64();
                        let g = node.grad[0].to_f64();
                        head[*probs].grad[*target] += E::from_f64(-g / p);
                    }
                }
            }
        }
        Ok(())
    }
}

fn matmul_into<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == E::ZERO {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

fn accumulate<E: Scalar>(target: &mut [E], src: &[E]) {
    debug_assert_eq!(target.len(), src.len());
    for (t, &s) in target.iter_mut().zip(src) {
        *t += s;
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_f64(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}
