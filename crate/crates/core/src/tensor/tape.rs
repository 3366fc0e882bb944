//! Eager computation record with reverse-mode backward.
//!
//! Each kernel application pushes a node holding its output value, the op
//! kind, and anything the backward rule needs. `backward` replays nodes in
//! reverse insertion order (reverse topological by construction), so gradient
//! accumulation order is fixed and results are bit-reproducible per platform.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    /// [m, n] + [n] broadcast over rows.
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    GatherRows {
        src: NodeId,
        ids: Vec<usize>,
    },
    ConcatRows(NodeId, NodeId),
    MaskedFill {
        x: NodeId,
        mask: Vec<bool>,
    },
    MeanAll(NodeId),
    CrossEntropyRows {
        logits: NodeId,
        targets: Vec<usize>,
    },
    Sigmoid(NodeId),
    Bce {
        probs: NodeId,
        targets: Vec<f32>,
    },
    /// Per-row KL(softmax(logits) || exp(ref_log_probs)), reference fixed.
    KlRows {
        logits: NodeId,
        ref_log_probs: Vec<f32>,
    },
    Reshape(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Vec<f32>,
    shape: Vec<usize>,
    needs_grad: bool,
    op: Op,
    /// Backward stash: softmax probabilities for CE/KL, (mean, invstd) pairs
    /// for layer norm. Empty for ops whose `value` suffices.
    saved: Vec<f32>,
}

/// Topologically ordered record of primitive applications.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

const LN_EPS: f32 = 1e-5;
const BCE_EPS: f32 = 1e-7;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f32] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value_tensor(&self, id: NodeId) -> Tensor {
        Tensor::from_vec(&self.nodes[id.0].shape, self.nodes[id.0].value.clone())
            .expect("node shape is consistent")
    }

    /// Gradient of the last backward pass w.r.t. this node, if it was reached.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, kernel: &'static str, node: Node) -> Result<NodeId> {
        if node.value.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite { kernel });
        }
        self.nodes.push(node);
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── Inputs ───────────────────────────────────────────────────────

    /// Register a tensor as a leaf; gradients flow back iff `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Result<NodeId> {
        self.push(
            "leaf",
            Node {
                value: t.data().to_vec(),
                shape: t.shape().to_vec(),
                needs_grad: t.requires_grad(),
                op: Op::Leaf,
                saved: Vec::new(),
            },
        )
    }

    /// Constant input; no gradient flows back.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f32>) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CoreError::ShapeMismatch {
                kernel: "constant",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        self.push(
            "constant",
            Node {
                value: data,
                shape: shape.to_vec(),
                needs_grad: false,
                op: Op::Leaf,
                saved: Vec::new(),
            },
        )
    }

    pub fn scalar(&mut self, v: f32) -> Result<NodeId> {
        self.constant(&[1], vec![v])
    }

    // ── Kernels ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CoreError::ShapeMismatch {
                kernel: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = matmul_nn(self.value(a), self.value(b), m, k, n);
        let needs_grad = self.needs(a) || self.needs(b);
        self.push(
            "matmul",
            Node {
                value,
                shape: vec![m, n],
                needs_grad,
                op: Op::Matmul(a, b),
                saved: Vec::new(),
            },
        )
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(CoreError::ShapeMismatch {
                kernel: "transpose",
                lhs: sa,
                rhs: vec![],
            });
        }
        let (m, n) = (sa[0], sa[1]);
        let value = transpose_2d(self.value(a), m, n);
        let needs_grad = self.needs(a);
        self.push(
            "transpose",
            Node {
                value,
                shape: vec![n, m],
                needs_grad,
                op: Op::Transpose(a),
                saved: Vec::new(),
            },
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(CoreError::ShapeMismatch {
                kernel: "add",
                lhs: sa,
                rhs: sb,
            });
        }
        let value: Vec<f32> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let needs_grad = self.needs(a) || self.needs(b);
        self.push(
            "add",
            Node {
                value,
                shape: sa,
                needs_grad,
                op: Op::Add(a, b),
                saved: Vec::new(),
            },
        )
    }

    /// Bias add: `[m, n] + [n]`, the only broadcast beyond scalar-scale.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(bias).to_vec());
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(CoreError::ShapeMismatch {
                kernel: "add_row",
                lhs: sa,
                rhs: sb,
            });
        }
        let n = sa[1];
        let bv = self.value(bias).to_vec();
        let value: Vec<f32> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % n])
            .collect();
        let needs_grad = self.needs(a) || self.needs(bias);
        self.push(
            "add_row",
            Node {
                value,
                shape: sa,
                needs_grad,
                op: Op::AddRow(a, bias),
                saved: Vec::new(),
            },
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(CoreError::ShapeMismatch {
                kernel: "multiply",
                lhs: sa,
                rhs: sb,
            });
        }
        let value: Vec<f32> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let needs_grad = self.needs(a) || self.needs(b);
        self.push(
            "multiply",
            Node {
                value,
                shape: sa,
                needs_grad,
                op: Op::Mul(a, b),
                saved: Vec::new(),
            },
        )
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(CoreError::NonFinite {
                kernel: "scalar-scale",
            });
        }
        let value: Vec<f32> = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let needs_grad = self.needs(a);
        self.push(
            "scalar-scale",
            Node {
                value,
                shape,
                needs_grad,
                op: Op::Scale(a, c),
                saved: Vec::new(),
            },
        )
    }

    /// Row-wise softmax over the last dimension of a 2-D tensor.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(CoreError::ShapeMismatch {
                kernel: "softmax",
                lhs: sa,
                rhs: vec![],
            });
        }
        let (m, n) = (sa[0], sa[1]);
        let mut value = vec![0.0f32; m * n];
        let av = self.value(a);
        for r in 0..m {
            let row = &av[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for c in 0..n {
                let e = (row[c] - max).exp();
                value[r * n + c] = e;
                sum += e;
            }
            for c in 0..n {
                value[r * n + c] /= sum;
            }
        }
        let needs_grad = self.needs(a);
        self.push(
            "softmax",
            Node {
                value,
                shape: sa,
                needs_grad,
                op: Op::SoftmaxRows(a),
                saved: Vec::new(),
            },
        )
    }

    /// Layer normalization over the last dimension with learnable gain/bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(CoreError::ShapeMismatch {
                kernel: "layer_norm",
                lhs: sx,
                rhs: vec![],
            });
        }
        let (m, n) = (sx[0], sx[1]);
        for (name, id) in [("gain", gain), ("bias", bias)] {
            let s = self.shape(id);
            if s != [n] {
                let _ = name;
                return Err(CoreError::ShapeMismatch {
                    kernel: "layer_norm",
                    lhs: sx,
                    rhs: s.to_vec(),
                });
            }
        }
        let xv = self.value(x);
        let gv = self.value(gain).to_vec();
        let bv = self.value(bias).to_vec();
        let mut value = vec![0.0f32; m * n];
        let mut saved = Vec::with_capacity(2 * m);
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
            let invstd = 1.0 / (var + LN_EPS).sqrt();
            for c in 0..n {
                let xhat = (row[c] - mean) * invstd;
                value[r * n + c] = gv[c] * xhat + bv[c];
            }
            saved.push(mean);
            saved.push(invstd);
        }
        let needs_grad = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            "layer_norm",
            Node {
                value,
                shape: sx,
                needs_grad,
                op: Op::LayerNorm { x, gain, bias },
                saved,
            },
        )
    }

    /// Row gather: embedding lookup when `src` is an embedding table, and the
    /// building block for windowed (convolution-style) access patterns.
    pub fn gather_rows(&mut self, src: NodeId, ids: &[usize]) -> Result<NodeId> {
        let ss = self.shape(src).to_vec();
        if ss.len() != 2 {
            return Err(CoreError::ShapeMismatch {
                kernel: "embedding",
                lhs: ss,
                rhs: vec![ids.len()],
            });
        }
        if ids.is_empty() {
            return Err(CoreError::contract("embedding: empty id list"));
        }
        let (rows, n) = (ss[0], ss[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(CoreError::contract(format!(
                "embedding: id {bad} out of range 0..{rows}"
            )));
        }
        let sv = self.value(src);
        let mut value = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            value.extend_from_slice(&sv[i * n..(i + 1) * n]);
        }
        let needs_grad = self.needs(src);
        self.push(
            "embedding",
            Node {
                value,
                shape: vec![ids.len(), n],
                needs_grad,
                op: Op::GatherRows {
                    src,
                    ids: ids.to_vec(),
                },
                saved: Vec::new(),
            },
        )
    }

    /// Concatenation along the token (row) axis.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(CoreError::ShapeMismatch {
                kernel: "concat",
                lhs: sa,
                rhs: sb,
            });
        }
        let mut value = self.value(a).to_vec();
        value.extend_from_slice(self.value(b));
        let shape = vec![sa[0] + sb[0], sa[1]];
        let needs_grad = self.needs(a) || self.needs(b);
        self.push(
            "concat",
            Node {
                value,
                shape,
                needs_grad,
                op: Op::ConcatRows(a, b),
                saved: Vec::new(),
            },
        )
    }

    /// Where `mask[i]` is true, replace the entry with `fill` (used with a
    /// large negative fill ahead of softmax for causal masking).
    pub fn masked_fill(&mut self, x: NodeId, mask: &[bool], fill: f32) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let n: usize = sx.iter().product();
        if mask.len() != n {
            return Err(CoreError::ShapeMismatch {
                kernel: "masked_fill",
                lhs: sx,
                rhs: vec![mask.len()],
            });
        }
        if !fill.is_finite() {
            return Err(CoreError::NonFinite {
                kernel: "masked_fill",
            });
        }
        let value: Vec<f32> = self
            .value(x)
            .iter()
            .zip(mask)
            .map(|(v, &m)| if m { fill } else { *v })
            .collect();
        let needs_grad = self.needs(x);
        self.push(
            "masked_fill",
            Node {
                value,
                shape: sx,
                needs_grad,
                op: Op::MaskedFill {
                    x,
                    mask: mask.to_vec(),
                },
                saved: Vec::new(),
            },
        )
    }

    /// Mean over all entries, producing a scalar.
    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len();
        let value = vec![self.value(a).iter().sum::<f32>() / n as f32];
        let needs_grad = self.needs(a);
        self.push(
            "mean",
            Node {
                value,
                shape: vec![1],
                needs_grad,
                op: Op::MeanAll(a),
                saved: Vec::new(),
            },
        )
    }

    /// Token-wise cross-entropy of `logits[t]` against integer `targets[t]`,
    /// returning one non-negative loss per row.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(CoreError::ShapeMismatch {
                kernel: "cross_entropy",
                lhs: sl,
                rhs: vec![targets.len()],
            });
        }
        let (t, v) = (sl[0], sl[1]);
        if let Some(&bad) = targets.iter().find(|&&i| i >= v) {
            return Err(CoreError::contract(format!(
                "cross_entropy: target {bad} out of vocab 0..{v}"
            )));
        }
        let lv = self.value(logits);
        let mut value = vec![0.0f32; t];
        let mut saved = vec![0.0f32; t * v];
        for r in 0..t {
            let row = &lv[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for c in 0..v {
                sum += (row[c] - max).exp();
            }
            let lse = max + sum.ln();
            value[r] = lse - row[targets[r]];
            for c in 0..v {
                saved[r * v + c] = (row[c] - lse).exp();
            }
        }
        let needs_grad = self.needs(logits);
        self.push(
            "cross_entropy",
            Node {
                value,
                shape: vec![t],
                needs_grad,
                op: Op::CrossEntropyRows {
                    logits,
                    targets: targets.to_vec(),
                },
                saved,
            },
        )
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let value: Vec<f32> = self
            .value(a)
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs_grad = self.needs(a);
        self.push(
            "sigmoid",
            Node {
                value,
                shape,
                needs_grad,
                op: Op::Sigmoid(a),
                saved: Vec::new(),
            },
        )
    }

    /// Elementwise binary cross-entropy of probabilities against 0/1 targets.
    /// Probabilities are clamped to [1e-7, 1-1e-7] before the logs.
    pub fn bce(&mut self, probs: NodeId, targets: &[f32]) -> Result<NodeId> {
        let sp = self.shape(probs).to_vec();
        let n: usize = sp.iter().product();
        if targets.len() != n {
            return Err(CoreError::ShapeMismatch {
                kernel: "binary_cross_entropy",
                lhs: sp,
                rhs: vec![targets.len()],
            });
        }
        let value: Vec<f32> = self
            .value(probs)
            .iter()
            .zip(targets)
            .map(|(&p, &t)| {
                let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .collect();
        let needs_grad = self.needs(probs);
        self.push(
            "binary_cross_entropy",
            Node {
                value,
                shape: sp,
                needs_grad,
                op: Op::Bce {
                    probs,
                    targets: targets.to_vec(),
                },
                saved: Vec::new(),
            },
        )
    }

    /// Per-row KL(softmax(logits) || reference), reference given as fixed
    /// log-probabilities with the same layout as `logits`.
    pub fn kl_rows(&mut self, logits: NodeId, ref_log_probs: &[f32]) -> Result<NodeId> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] * sl[1] != ref_log_probs.len() {
            return Err(CoreError::ShapeMismatch {
                kernel: "kl_divergence",
                lhs: sl,
                rhs: vec![ref_log_probs.len()],
            });
        }
        if ref_log_probs.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite {
                kernel: "kl_divergence",
            });
        }
        let (t, v) = (sl[0], sl[1]);
        let lv = self.value(logits);
        let mut value = vec![0.0f32; t];
        let mut saved = vec![0.0f32; t * v];
        for r in 0..t {
            let row = &lv[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for c in 0..v {
                sum += (row[c] - max).exp();
            }
            let lse = max + sum.ln();
            let mut kl = 0.0f32;
            for c in 0..v {
                let lp = row[c] - lse;
                let p = lp.exp();
                saved[r * v + c] = p;
                kl += p * (lp - ref_log_probs[r * v + c]);
            }
            value[r] = kl;
        }
        let needs_grad = self.needs(logits);
        self.push(
            "kl_divergence",
            Node {
                value,
                shape: vec![t],
                needs_grad,
                op: Op::KlRows {
                    logits,
                    ref_log_probs: ref_log_probs.to_vec(),
                },
                saved,
            },
        )
    }

    /// Reinterpret the flat buffer under a new shape (no data movement).
    pub fn reshape(&mut self, a: NodeId, new_shape: &[usize]) -> Result<NodeId> {
        let n: usize = new_shape.iter().product();
        if n != self.value(a).len() {
            return Err(CoreError::ShapeMismatch {
                kernel: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: new_shape.to_vec(),
            });
        }
        let value = self.value(a).to_vec();
        let needs_grad = self.needs(a);
        self.push(
            "reshape",
            Node {
                value,
                shape: new_shape.to_vec(),
                needs_grad,
                op: Op::Reshape(a),
                saved: Vec::new(),
            },
        )
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Gradients from any previous
    /// sweep are cleared first, so repeated calls reproduce identical values.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.shape(loss) != [1] {
            return Err(CoreError::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g)?;
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn add_grad(&mut self, id: NodeId, delta: &[f32]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = self.grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.len()]);
        for (s, d) in slot.iter_mut().zip(delta) {
            *s += d;
        }
    }

    fn propagate(&mut self, idx: usize, g: &[f32]) -> Result<()> {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.needs(a) {
                    let da = matmul_nt(g, self.value(b), m, n, k);
                    self.add_grad(a, &da);
                }
                if self.needs(b) {
                    let db = matmul_tn(self.value(a), g, m, k, n);
                    self.add_grad(b, &db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                let da = transpose_2d(g, n, m);
                self.add_grad(a, &da);
            }
            Op::Add(a, b) => {
                self.add_grad(a, g);
                self.add_grad(b, g);
            }
            Op::AddRow(a, bias) => {
                self.add_grad(a, g);
                if self.needs(bias) {
                    let n = self.shape(bias)[0];
                    let mut db = vec![0.0f32; n];
                    for (i, gv) in g.iter().enumerate() {
                        db[i % n] += gv;
                    }
                    self.add_grad(bias, &db);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let da: Vec<f32> = g.iter().zip(self.value(b)).map(|(gv, bv)| gv * bv).collect();
                    self.add_grad(a, &da);
                }
                if self.needs(b) {
                    let db: Vec<f32> = g.iter().zip(self.value(a)).map(|(gv, av)| gv * av).collect();
                    self.add_grad(b, &db);
                }
            }
            Op::Scale(a, c) => {
                let da: Vec<f32> = g.iter().map(|gv| gv * c).collect();
                self.add_grad(a, &da);
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                let y = &self.nodes[idx].value;
                let mut da = vec![0.0f32; m * n];
                for r in 0..m {
                    let mut dot = 0.0f32;
                    for c in 0..n {
                        dot += g[r * n + c] * y[r * n + c];
                    }
                    for c in 0..n {
                        da[r * n + c] = y[r * n + c] * (g[r * n + c] - dot);
                    }
                }
                self.add_grad(a, &da);
            }
            Op::LayerNorm { x, gain, bias } => {
                let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
                let xv = self.value(x).to_vec();
                let gv = self.value(gain).to_vec();
                let saved = self.nodes[idx].saved.clone();
                let mut dx = vec![0.0f32; m * n];
                let mut dgain = vec![0.0f32; n];
                let mut dbias = vec![0.0f32; n];
                for r in 0..m {
                    let mean = saved[2 * r];
                    let invstd = saved[2 * r + 1];
                    let mut sum_dxhat = 0.0f32;
                    let mut sum_dxhat_xhat = 0.0f32;
                    for c in 0..n {
                        let xhat = (xv[r * n + c] - mean) * invstd;
                        let go = g[r * n + c];
                        dgain[c] += go * xhat;
                        dbias[c] += go;
                        let dxhat = go * gv[c];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    let inv_n = 1.0 / n as f32;
                    for c in 0..n {
                        let xhat = (xv[r * n + c] - mean) * invstd;
                        let dxhat = g[r * n + c] * gv[c];
                        dx[r * n + c] =
                            invstd * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(gain, &dgain);
                self.add_grad(bias, &dbias);
            }
            Op::GatherRows { src, ids } => {
                if self.needs(src) {
                    let n = self.shape(src)[1];
                    let mut dsrc = vec![0.0f32; self.value(src).len()];
                    for (out_r, &i) in ids.iter().enumerate() {
                        for c in 0..n {
                            dsrc[i * n + c] += g[out_r * n + c];
                        }
                    }
                    self.add_grad(src, &dsrc);
                }
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(a).len();
                self.add_grad(a, &g[..na]);
                self.add_grad(b, &g[na..]);
            }
            Op::MaskedFill { x, mask } => {
                let dx: Vec<f32> = g
                    .iter()
                    .zip(&mask)
                    .map(|(gv, &m)| if m { 0.0 } else { *gv })
                    .collect();
                self.add_grad(x, &dx);
            }
            Op::MeanAll(a) => {
                let n = self.value(a).len();
                let da = vec![g[0] / n as f32; n];
                self.add_grad(a, &da);
            }
            Op::CrossEntropyRows { logits, targets } => {
                let (t, v) = (self.shape(logits)[0], self.shape(logits)[1]);
                let probs = self.nodes[idx].saved.clone();
                let mut dl = vec![0.0f32; t * v];
                for r in 0..t {
                    for c in 0..v {
                        let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                        dl[r * v + c] = g[r] * (probs[r * v + c] - onehot);
                    }
                }
                self.add_grad(logits, &dl);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                let da: Vec<f32> = g
                    .iter()
                    .zip(y)
                    .map(|(gv, &yv)| gv * yv * (1.0 - yv))
                    .collect();
                self.add_grad(a, &da);
            }
            Op::Bce { probs, targets } => {
                let pv = self.value(probs).to_vec();
                let dp: Vec<f32> = g
                    .iter()
                    .zip(pv.iter().zip(&targets))
                    .map(|(gv, (&p, &t))| {
                        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                        gv * (p - t) / (p * (1.0 - p))
                    })
                    .collect();
                self.add_grad(probs, &dp);
            }
            Op::KlRows {
                logits,
                ref_log_probs,
            } => {
                let (t, v) = (self.shape(logits)[0], self.shape(logits)[1]);
                let probs = self.nodes[idx].saved.clone();
                let kl = self.nodes[idx].value.clone();
                let mut dl = vec![0.0f32; t * v];
                for r in 0..t {
                    for c in 0..v {
                        let p = probs[r * v + c];
                        // log p term: p may underflow to 0; treat log(0)*0 = 0
                        let lp = if p > 0.0 { p.ln() } else { -103.0 };
                        dl[r * v + c] = g[r] * p * (lp - ref_log_probs[r * v + c] - kl[r]);
                    }
                }
                self.add_grad(logits, &dl);
            }
            Op::Reshape(a) => {
                self.add_grad(a, g);
            }
        }
        Ok(())
    }
}

// ── Raw matmul helpers (also used by backward rules) ─────────────────

/// C[m,n] = A[m,k] · B[k,n]
pub fn matmul_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// C[m,k] = A[m,n] · B[k,n]^T
fn matmul_nt(a: &[f32], b: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut s = 0.0f32;
            for p in 0..n {
                s += arow[p] * brow[p];
            }
            c[i * k + j] = s;
        }
    }
    c
}

/// C[k,n] = A[m,k]^T · B[m,n]
fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; k * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            let brow = &b[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

fn transpose_2d(a: &[f32], m: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}
