//! Reverse-mode tape.
//!
//! Nodes are appended during the forward pass, so every node's inputs
//! precede it and a single reverse sweep visits each node exactly once.
//! Gradients of shared subexpressions accumulate by summation.

use super::Tensor;
use crate::cloud::Point3;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    /// Blocked `A_t · B_tᵀ` per block t; used for batched attention scores.
    BmmNt {
        a: NodeId,
        b: NodeId,
        blocks: usize,
    },
    /// Blocked `A_t · B_t` per block t; used for batched attention values.
    BmmNn {
        a: NodeId,
        b: NodeId,
        blocks: usize,
    },
    SoftmaxLastDim(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    BceWithLogits {
        logits: NodeId,
        targets: Vec<f64>,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
    AddRowBias {
        x: NodeId,
        bias: NodeId,
    },
    GatherRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    ScatterAddRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    ConcatCols(NodeId, NodeId),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    Reshape(NodeId),
    /// Symmetric chamfer loss of `pred` (N×3) against a fixed point set.
    /// Nearest-neighbor assignments are frozen at forward time.
    ChamferToFixed {
        pred: NodeId,
        target: Vec<Point3>,
        nn_pred: Vec<usize>,
        nn_target: Vec<usize>,
    },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradient accumulators produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to the given node, if any path to the loss
    /// required it.
    pub fn wrt(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value_tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, false)
    }

    /// Leaf that accumulates a gradient during [`Tape::backward`].
    pub fn param(&mut self, t: &Tensor) -> NodeId {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, true)
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool) -> NodeId {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "op produced mismatched shape");
        assert!(
            data.iter().all(|v| v.is_finite()),
            "op produced a non-finite value"
        );
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            data,
            shape,
            op,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn assert_same_shape(&self, a: NodeId, b: NodeId, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "dimension error: {} operands must have identical shapes",
            what
        );
    }

    // ── Elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.assert_same_shape(a, b, "add");
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        self.push(data, shape, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.assert_same_shape(a, b, "sub");
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        self.push(data, shape, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.assert_same_shape(a, b, "mul");
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        self.push(data, shape, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        assert!(c.is_finite(), "scale factor must be finite");
        let data: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(data, shape, Op::Scale(a, c), ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.value(a).iter().map(|x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(data, shape, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.value(a).iter().map(|x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(data, shape, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.value(a).iter().map(|x| sigmoid(*x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(data, shape, Op::Sigmoid(a), ng)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.value(a).iter().map(|x| x.exp()).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(data, shape, Op::Exp(a), ng)
    }

    // ── Matrix products ─────────────────────────────────────────────

    /// `[m×k] · [k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.len(), 2, "dimension error: matmul lhs must be 2-D");
        assert_eq!(sb.len(), 2, "dimension error: matmul rhs must be 2-D");
        assert_eq!(
            sa[1], sb[0],
            "dimension error: matmul inner dimensions {} vs {}",
            sa[1], sb[0]
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a), self.value(b), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        self.push(data, vec![m, n], Op::MatMul { a, b }, ng)
    }

    /// Blocked transposed product: `a` is `blocks` stacked `[p×d]` blocks,
    /// `b` is `blocks` stacked `[q×d]` blocks; the result stacks the
    /// per-block `A_t · B_tᵀ` of shape `[p×q]`.
    pub fn bmm_nt(&mut self, a: NodeId, b: NodeId, blocks: usize) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa.len(), 2, "dimension error: bmm_nt lhs must be 2-D");
        assert_eq!(sb.len(), 2, "dimension error: bmm_nt rhs must be 2-D");
        assert_eq!(sa[1], sb[1], "dimension error: bmm_nt feature dims differ");
        assert!(blocks > 0 && sa[0] % blocks == 0 && sb[0] % blocks == 0);
        let (p, q, d) = (sa[0] / blocks, sb[0] / blocks, sa[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; blocks * p * q];
        for t in 0..blocks {
            for i in 0..p {
                let arow = &av[(t * p + i) * d..(t * p + i + 1) * d];
                for j in 0..q {
                    let brow = &bv[(t * q + j) * d..(t * q + j + 1) * d];
                    out[(t * p + i) * q + j] = dot(arow, brow);
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out, vec![blocks * p, q], Op::BmmNt { a, b, blocks }, ng)
    }

    /// Blocked product: `a` is `blocks` stacked `[p×q]` blocks, `b` is
    /// `blocks` stacked `[q×d]` blocks; stacks the per-block `A_t · B_t`.
    pub fn bmm_nn(&mut self, a: NodeId, b: NodeId, blocks: usize) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa.len(), 2, "dimension error: bmm_nn lhs must be 2-D");
        assert_eq!(sb.len(), 2, "dimension error: bmm_nn rhs must be 2-D");
        assert!(blocks > 0 && sa[0] % blocks == 0 && sb[0] % blocks == 0);
        let (p, q, d) = (sa[0] / blocks, sb[0] / blocks, sb[1]);
        assert_eq!(sa[1], q, "dimension error: bmm_nn inner dims differ");
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; blocks * p * d];
        for t in 0..blocks {
            for i in 0..p {
                for j in 0..q {
                    let aij = av[(t * p + i) * q + j];
                    if aij == 0.0 {
                        continue;
                    }
                    let brow = &bv[(t * q + j) * d..(t * q + j + 1) * d];
                    let orow = &mut out[(t * p + i) * d..(t * p + i + 1) * d];
                    for (o, bb) in orow.iter_mut().zip(brow) {
                        *o += aij * bb;
                    }
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out, vec![blocks * p, d], Op::BmmNn { a, b, blocks }, ng)
    }

    // ── Normalization and reductions ────────────────────────────────

    /// Numerically stabilized softmax over the last dimension.
    pub fn softmax_lastdim(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().expect("softmax input must have a last dim");
        assert!(n >= 1);
        let av = self.value(a);
        let mut out = vec![0.0; av.len()];
        for (src, dst) in av.chunks(n).zip(out.chunks_mut(n)) {
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        let ng = self.needs(a);
        self.push(out, shape, Op::SoftmaxLastDim(a), ng)
    }

    /// Standardizes each last-dimension slice to mean 0 / variance 1
    /// (eps inside the root), then applies the per-channel affine.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().expect("layer_norm input must have a last dim");
        assert!(c >= 2, "layer_norm needs at least two channels");
        assert_eq!(self.shape(gain), &[c], "dimension error: layer_norm gain");
        assert_eq!(self.shape(bias), &[c], "dimension error: layer_norm bias");
        let xv = self.value(x);
        let gv = self.value(gain).to_vec();
        let bv = self.value(bias).to_vec();
        let mut out = vec![0.0; xv.len()];
        for (src, dst) in xv.chunks(c).zip(out.chunks_mut(c)) {
            let mean = src.iter().sum::<f64>() / c as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..c {
                dst[j] = (src[j] - mean) * inv_std * gv[j] + bv[j];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(out, shape, Op::LayerNorm { x, gain, bias }, ng)
    }

    /// Mean binary cross-entropy from logits, in the log-sum-exp stable
    /// form. `targets` must be 0/1 and is treated as a constant.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[f64]) -> NodeId {
        let n = self.value(logits).len();
        assert!(n >= 1, "bce_with_logits on empty input");
        assert_eq!(targets.len(), n, "dimension error: bce targets");
        assert!(
            targets.iter().all(|&y| y == 0.0 || y == 1.0),
            "bce targets must be binary"
        );
        let zv = self.value(logits);
        let mut total = 0.0;
        for (&z, &y) in zv.iter().zip(targets) {
            total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        }
        let loss = total / n as f64;
        let ng = self.needs(logits);
        self.push(
            vec![loss],
            vec![1],
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            ng,
        )
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).iter().sum();
        let ng = self.needs(a);
        self.push(vec![s], vec![1], Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len();
        assert!(n >= 1, "mean_all on empty input");
        let s: f64 = self.value(a).iter().sum::<f64>() / n as f64;
        let ng = self.needs(a);
        self.push(vec![s], vec![1], Op::MeanAll(a), ng)
    }

    // ── Row-structured ops ──────────────────────────────────────────

    /// `x[N×C] + bias[C]` added to every row.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 2, "dimension error: add_row_bias input");
        let c = shape[1];
        assert_eq!(self.shape(bias), &[c], "dimension error: add_row_bias bias");
        let bv = self.value(bias).to_vec();
        let data: Vec<f64> = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(&bv).map(|(a, b)| a + b).collect::<Vec<_>>())
            .collect();
        let ng = self.needs(x) || self.needs(bias);
        self.push(data, shape, Op::AddRowBias { x, bias }, ng)
    }

    /// Copies the listed rows of a 2-D tensor, in order. Rows may repeat;
    /// backward accumulates into the shared source row.
    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> NodeId {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 2, "dimension error: gather_rows input");
        let (n, c) = (shape[0], shape[1]);
        assert!(rows.iter().all(|&r| r < n), "gather_rows row out of range");
        let xv = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(&xv[r * c..(r + 1) * c]);
        }
        let ng = self.needs(x);
        self.push(
            data,
            vec![rows.len(), c],
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            ng,
        )
    }

    /// Scatter-adds the rows of `x` into a zeroed `[out_rows×C]` tensor;
    /// duplicate targets accumulate.
    pub fn scatter_add_rows(&mut self, x: NodeId, rows: &[usize], out_rows: usize) -> NodeId {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 2, "dimension error: scatter_add_rows input");
        let c = shape[1];
        assert_eq!(rows.len(), shape[0], "one target row per source row");
        assert!(rows.iter().all(|&r| r < out_rows), "scatter target out of range");
        let xv = self.value(x);
        let mut data = vec![0.0; out_rows * c];
        for (i, &r) in rows.iter().enumerate() {
            for j in 0..c {
                data[r * c + j] += xv[i * c + j];
            }
        }
        let ng = self.needs(x);
        self.push(
            data,
            vec![out_rows, c],
            Op::ScatterAddRows {
                x,
                rows: rows.to_vec(),
            },
            ng,
        )
    }

    /// `[N×C1] ++ [N×C2] -> [N×(C1+C2)]` along the channel dimension.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa.len(), 2, "dimension error: concat_cols lhs");
        assert_eq!(sb.len(), 2, "dimension error: concat_cols rhs");
        assert_eq!(sa[0], sb[0], "dimension error: concat_cols row counts");
        let (n, c1, c2) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(n * (c1 + c2));
        for i in 0..n {
            data.extend_from_slice(&av[i * c1..(i + 1) * c1]);
            data.extend_from_slice(&bv[i * c2..(i + 1) * c2]);
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(data, vec![n, c1 + c2], Op::ConcatCols(a, b), ng)
    }

    /// Contiguous row slice `x[start..start+len]` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 2, "dimension error: slice_rows input");
        let (n, c) = (shape[0], shape[1]);
        assert!(start + len <= n, "slice_rows out of range");
        let data = self.value(x)[start * c..(start + len) * c].to_vec();
        let ng = self.needs(x);
        self.push(data, vec![len, c], Op::SliceRows { x, start }, ng)
    }

    /// Shape change over the same data.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.value(x).len(), "dimension error: reshape");
        let data = self.value(x).to_vec();
        let ng = self.needs(x);
        self.push(data, shape, Op::Reshape(x), ng)
    }

    // ── Losses over point sets ──────────────────────────────────────

    /// Symmetric chamfer loss: mean squared nearest distance from each
    /// predicted point to `target` plus the mean from each target point to
    /// the predictions. `pred` must be `[N×3]` with N ≥ 1.
    pub fn chamfer_to_fixed(&mut self, pred: NodeId, target: &[Point3]) -> NodeId {
        let shape = self.shape(pred).to_vec();
        assert_eq!(shape.len(), 2, "dimension error: chamfer pred");
        assert_eq!(shape[1], 3, "dimension error: chamfer pred must be N×3");
        let n = shape[0];
        assert!(n >= 1, "chamfer on empty prediction");
        assert!(!target.is_empty(), "chamfer against empty target");
        let pv = self.value(pred);
        let point = |i: usize| -> Point3 { [pv[i * 3], pv[i * 3 + 1], pv[i * 3 + 2]] };

        let mut nn_pred = vec![0usize; n];
        let mut fwd = 0.0;
        for i in 0..n {
            let p = point(i);
            let (mut best, mut best_j) = (f64::INFINITY, 0);
            for (j, g) in target.iter().enumerate() {
                let d = crate::cloud::dist_sq(p, *g);
                if d < best {
                    best = d;
                    best_j = j;
                }
            }
            nn_pred[i] = best_j;
            fwd += best;
        }
        let mut nn_target = vec![0usize; target.len()];
        let mut bwd = 0.0;
        for (j, g) in target.iter().enumerate() {
            let (mut best, mut best_i) = (f64::INFINITY, 0);
            for i in 0..n {
                let d = crate::cloud::dist_sq(point(i), *g);
                if d < best {
                    best = d;
                    best_i = i;
                }
            }
            nn_target[j] = best_i;
            bwd += best;
        }
        let loss = fwd / n as f64 + bwd / target.len() as f64;
        let ng = self.needs(pred);
        self.push(
            vec![loss],
            vec![1],
            Op::ChamferToFixed {
                pred,
                target: target.to_vec(),
                nn_pred,
                nn_target,
            },
            ng,
        )
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Each node is visited exactly once,
    /// in reverse insertion order.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(
            self.value(root).len(),
            1,
            "backward requires a scalar root"
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, delta: &[f64]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].data.len()]);
        for (a, d) in slot.iter_mut().zip(delta) {
            *a += d;
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accumulate(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let da = zip_map(g, self.value(*b), |x, y| x * y);
                let db = zip_map(g, self.value(*a), |x, y| x * y);
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *b, &db);
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Relu(a) => {
                let da = zip_map(g, self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *a, &da);
            }
            Op::Tanh(a) => {
                let da = zip_map(g, &self.nodes[i].data, |gv, t| gv * (1.0 - t * t));
                self.accumulate(grads, *a, &da);
            }
            Op::Sigmoid(a) => {
                let da = zip_map(g, &self.nodes[i].data, |gv, s| gv * s * (1.0 - s));
                self.accumulate(grads, *a, &da);
            }
            Op::Exp(a) => {
                let da = zip_map(g, &self.nodes[i].data, |gv, e| gv * e);
                self.accumulate(grads, *a, &da);
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                // dA = dC · Bᵀ
                let mut da = vec![0.0; m * k];
                for r in 0..m {
                    let grow = &g[r * n..(r + 1) * n];
                    for p in 0..k {
                        da[r * k + p] = dot(grow, &bv[p * n..(p + 1) * n]);
                    }
                }
                // dB = Aᵀ · dC
                let mut db = vec![0.0; k * n];
                for r in 0..m {
                    let grow = &g[r * n..(r + 1) * n];
                    for p in 0..k {
                        let arp = av[r * k + p];
                        if arp == 0.0 {
                            continue;
                        }
                        let drow = &mut db[p * n..(p + 1) * n];
                        for (d, gg) in drow.iter_mut().zip(grow) {
                            *d += arp * gg;
                        }
                    }
                }
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *b, &db);
            }
            Op::BmmNt { a, b, blocks } => {
                let blocks = *blocks;
                let (p, d) = (self.shape(*a)[0] / blocks, self.shape(*a)[1]);
                let q = self.shape(*b)[0] / blocks;
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for t in 0..blocks {
                    for ii in 0..p {
                        let grow = &g[(t * p + ii) * q..(t * p + ii + 1) * q];
                        let arow = &av[(t * p + ii) * d..(t * p + ii + 1) * d];
                        for j in 0..q {
                            let gij = grow[j];
                            if gij == 0.0 {
                                continue;
                            }
                            let brow = &bv[(t * q + j) * d..(t * q + j + 1) * d];
                            let darow = &mut da[(t * p + ii) * d..(t * p + ii + 1) * d];
                            for (x, y) in darow.iter_mut().zip(brow) {
                                *x += gij * y;
                            }
                            let dbrow = &mut db[(t * q + j) * d..(t * q + j + 1) * d];
                            for (x, y) in dbrow.iter_mut().zip(arow) {
                                *x += gij * y;
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *b, &db);
            }
            Op::BmmNn { a, b, blocks } => {
                let blocks = *blocks;
                let (p, q) = (self.shape(*a)[0] / blocks, self.shape(*a)[1]);
                let d = self.shape(*b)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for t in 0..blocks {
                    for ii in 0..p {
                        let grow = &g[(t * p + ii) * d..(t * p + ii + 1) * d];
                        for j in 0..q {
                            let brow = &bv[(t * q + j) * d..(t * q + j + 1) * d];
                            da[(t * p + ii) * q + j] = dot(grow, brow);
                        }
                        for j in 0..q {
                            let aij = av[(t * p + ii) * q + j];
                            if aij == 0.0 {
                                continue;
                            }
                            let dbrow = &mut db[(t * q + j) * d..(t * q + j + 1) * d];
                            for (x, y) in dbrow.iter_mut().zip(grow) {
                                *x += aij * y;
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *b, &db);
            }
            Op::SoftmaxLastDim(a) => {
                let n = *self.nodes[i].shape.last().unwrap();
                let s = &self.nodes[i].data;
                let mut da = vec![0.0; s.len()];
                for ((srow, grow), drow) in
                    s.chunks(n).zip(g.chunks(n)).zip(da.chunks_mut(n))
                {
                    let inner = dot(srow, grow);
                    for j in 0..n {
                        drow[j] = srow[j] * (grow[j] - inner);
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::LayerNorm { x, gain, bias } => {
                let c = *self.nodes[i].shape.last().unwrap();
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let mut dx = vec![0.0; xv.len()];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                for (slice, (grow, dxrow)) in xv
                    .chunks(c)
                    .zip(g.chunks(c).zip(dx.chunks_mut(c)))
                {
                    let cf = c as f64;
                    let mean = slice.iter().sum::<f64>() / cf;
                    let var =
                        slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cf;
                    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let xhat: Vec<f64> =
                        slice.iter().map(|v| (v - mean) * inv_std).collect();
                    let dxhat: Vec<f64> =
                        grow.iter().zip(&gv[..]).map(|(gg, ga)| gg * ga).collect();
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dot(&dxhat, &xhat);
                    for j in 0..c {
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                        dxrow[j] = inv_std / cf
                            * (cf * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                self.accumulate(grads, *x, &dx);
                self.accumulate(grads, *gain, &dgain);
                self.accumulate(grads, *bias, &dbias);
            }
            Op::BceWithLogits { logits, targets } => {
                let zv = self.value(*logits);
                let n = zv.len() as f64;
                let da: Vec<f64> = zv
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| g[0] * (sigmoid(z) - y) / n)
                    .collect();
                self.accumulate(grads, *logits, &da);
            }
            Op::SumAll(a) => {
                let da = vec![g[0]; self.value(*a).len()];
                self.accumulate(grads, *a, &da);
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).len() as f64;
                let da = vec![g[0] / n; self.value(*a).len()];
                self.accumulate(grads, *a, &da);
            }
            Op::AddRowBias { x, bias } => {
                let c = self.shape(*bias)[0];
                self.accumulate(grads, *x, g);
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *bias, &db);
            }
            Op::GatherRows { x, rows } => {
                let c = self.shape(*x)[1];
                let mut dx = vec![0.0; self.value(*x).len()];
                for (i_out, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        dx[r * c + j] += g[i_out * c + j];
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::ScatterAddRows { x, rows } => {
                let c = self.shape(*x)[1];
                let mut dx = vec![0.0; self.value(*x).len()];
                for (i_src, &r) in rows.iter().enumerate() {
                    dx[i_src * c..(i_src + 1) * c].copy_from_slice(&g[r * c..(r + 1) * c]);
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::ConcatCols(a, b) => {
                let (c1, c2) = (self.shape(*a)[1], self.shape(*b)[1]);
                let n = self.shape(*a)[0];
                let mut da = vec![0.0; n * c1];
                let mut db = vec![0.0; n * c2];
                for r in 0..n {
                    let grow = &g[r * (c1 + c2)..(r + 1) * (c1 + c2)];
                    da[r * c1..(r + 1) * c1].copy_from_slice(&grow[..c1]);
                    db[r * c2..(r + 1) * c2].copy_from_slice(&grow[c1..]);
                }
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *b, &db);
            }
            Op::SliceRows { x, start } => {
                let c = self.shape(*x)[1];
                let mut dx = vec![0.0; self.value(*x).len()];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                self.accumulate(grads, *x, &dx);
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, g);
            }
            Op::ChamferToFixed {
                pred,
                target,
                nn_pred,
                nn_target,
            } => {
                let pv = self.value(*pred);
                let n = nn_pred.len() as f64;
                let m = target.len() as f64;
                let mut dp = vec![0.0; pv.len()];
                for (i_p, &j) in nn_pred.iter().enumerate() {
                    for a in 0..3 {
                        dp[i_p * 3 + a] +=
                            g[0] * 2.0 * (pv[i_p * 3 + a] - target[j][a]) / n;
                    }
                }
                for (j, &i_p) in nn_target.iter().enumerate() {
                    for a in 0..3 {
                        dp[i_p * 3 + a] +=
                            g[0] * 2.0 * (pv[i_p * 3 + a] - target[j][a]) / m;
                    }
                }
                self.accumulate(grads, *pred, &dp);
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Plain `[m×k]·[k×n]` used by the forward pass.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}
