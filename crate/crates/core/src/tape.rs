//! Wengert tape for reverse-mode automatic differentiation.
//!
//! Operations append nodes to an arena as the forward pass runs; `backward`
//! replays the tape in reverse id order (which is reverse topological order,
//! since inputs always precede outputs) and accumulates adjoints. Gradients
//! are first-order only and the whole pass is single-threaded, so identical
//! graphs produce bit-identical gradients.

use crate::linalg::lu_inverse;
use crate::tensor::{sigmoid, softplus, NumArray, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    /// Trainable input; receives a gradient.
    Leaf,
    /// Non-trainable input; backward skips it.
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Silu(NodeId),
    Softplus(NodeId),
    Ln(NodeId),
    Sum(NodeId),
    MatInverse(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    StackRows(Vec<NodeId>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: NumArray,
}

/// Gradients produced by [`Tape::backward`], indexed by node id.
#[derive(Debug)]
pub struct GradientMap {
    grads: Vec<Option<NumArray>>,
}

impl GradientMap {
    /// Gradient of the loss w.r.t. the node, or `None` if the node is
    /// unreachable from the loss (its gradient is identically zero).
    pub fn get(&self, id: NodeId) -> Option<&NumArray> {
        self.grads[id.0].as_ref()
    }

    /// Gradient with unreachable nodes materialized as zeros.
    pub fn of(&self, tape: &Tape, id: NodeId) -> NumArray {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = tape.value(id).shape();
                NumArray::zeros(r, c)
            }
        }
    }
}

/// Append-only computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &NumArray {
        &self.nodes[id.0].value
    }

    /// Whether the node is a trainable input.
    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf)
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).scalar_value()
    }

    fn push(&mut self, op: Op, value: NumArray) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: NumArray) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: NumArray) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::Matmul(a, b), v))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).add_scalar(c);
        self.push(Op::AddScalar(a), v)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(Op::Silu(a), v)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(softplus);
        self.push(Op::Softplus(a), v)
    }

    /// Natural log; inputs must be positive.
    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Ln(a), v)
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = NumArray::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mat_inverse(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let v = lu_inverse(self.value(a))?;
        Ok(self.push(Op::MatInverse(a), v))
    }

    /// Layer normalization over all entries of `x`, with elementwise affine.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (xh, _) = normalize(self.value(x));
        let v = xh.mul(self.value(gain))?.add(self.value(bias))?;
        Ok(self.push(Op::LayerNorm { x, gain, bias }, v))
    }

    /// Vertical concatenation of row blocks.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let values: Vec<NumArray> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let v = NumArray::stack_rows(&values)?;
        Ok(self.push(Op::StackRows(parts.to_vec()), v))
    }

    /// Mean of squared differences: `sum((a-b)^2) / len`.
    pub fn mean_sq_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let n = self.value(a).len() as f64;
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        let s = self.sum(sq);
        Ok(self.scale(s, 1.0 / n))
    }

    /// Reverse pass from a scalar root. Every node reachable from `loss`
    /// receives an adjoint; unreachable nodes report zero through the map.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap, TensorError> {
        let root = self.value(loss);
        if !root.is_scalar() {
            return Err(TensorError::NonScalarLoss { shape: root.shape_vec() });
        }
        let mut grads: Vec<Option<NumArray>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(NumArray::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf | Op::Constant => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g, &self.nodes);
                    accumulate(&mut grads, *b, &g, &self.nodes);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g, &self.nodes);
                    accumulate(&mut grads, *b, &g.scale(-1.0), &self.nodes);
                }
                Op::Mul(a, b) => {
                    let ga = g.mul(&self.nodes[b.0].value).expect("forward checked shapes");
                    let gb = g.mul(&self.nodes[a.0].value).expect("forward checked shapes");
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                    accumulate(&mut grads, *b, &gb, &self.nodes);
                }
                Op::Matmul(a, b) => {
                    let bt = self.nodes[b.0].value.transpose();
                    let at = self.nodes[a.0].value.transpose();
                    let ga = g.matmul(&bt).expect("forward checked shapes");
                    let gb = at.matmul(&g).expect("forward checked shapes");
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                    accumulate(&mut grads, *b, &gb, &self.nodes);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, &g.transpose(), &self.nodes);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, &g.scale(*c), &self.nodes);
                }
                Op::AddScalar(a) => {
                    accumulate(&mut grads, *a, &g, &self.nodes);
                }
                Op::Silu(a) => {
                    // d/dx (x * s(x)) = s(x) * (1 + x * (1 - s(x)))
                    let x = &self.nodes[a.0].value;
                    let dx = x.map(|v| {
                        let s = sigmoid(v);
                        s * (1.0 + v * (1.0 - s))
                    });
                    let ga = g.mul(&dx).expect("same shape");
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                Op::Softplus(a) => {
                    let x = &self.nodes[a.0].value;
                    let ga = g.mul(&x.map(sigmoid)).expect("same shape");
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                Op::Ln(a) => {
                    let x = &self.nodes[a.0].value;
                    let ga = g.mul(&x.map(|v| 1.0 / v)).expect("same shape");
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                Op::Sum(a) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    let ga = NumArray::filled(r, c, g.scalar_value());
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                Op::MatInverse(a) => {
                    // B = A^-1  =>  dL/dA = -B^T dL/dB B^T
                    let bt = self.nodes[id].value.transpose();
                    let ga = bt.matmul(&g).unwrap().matmul(&bt).unwrap().scale(-1.0);
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let xv = &self.nodes[x.0].value;
                    let (xh, inv_std) = normalize(xv);
                    let gv = &self.nodes[gain.0].value;
                    let g_gain = g.mul(&xh).expect("same shape");
                    let g_xh = g.mul(gv).expect("same shape");
                    let m1 = g_xh.mean();
                    let m2 = g_xh.mul(&xh).expect("same shape").mean();
                    let mut gx = g_xh.clone();
                    for (o, h) in gx.data_mut().iter_mut().zip(xh.data()) {
                        *o = (*o - m1 - h * m2) * inv_std;
                    }
                    accumulate(&mut grads, *gain, &g_gain, &self.nodes);
                    accumulate(&mut grads, *bias, &g, &self.nodes);
                    accumulate(&mut grads, *x, &gx, &self.nodes);
                }
                Op::StackRows(parts) => {
                    let mut row = 0;
                    for &p in parts {
                        let pr = self.nodes[p.0].value.rows();
                        let gp = g.slice_rows(row, row + pr);
                        accumulate(&mut grads, p, &gp, &self.nodes);
                        row += pr;
                    }
                }
            }
        }
        Ok(GradientMap { grads })
    }
}

fn accumulate(grads: &mut [Option<NumArray>], id: NodeId, g: &NumArray, nodes: &[Node]) {
    // Constants do not propagate further and nobody reads their adjoints.
    if matches!(nodes[id.0].op, Op::Constant) {
        return;
    }
    match &mut grads[id.0] {
        Some(existing) => existing.axpy(1.0, g),
        slot @ None => *slot = Some(g.clone()),
    }
}

/// Standardized entries and the inverse standard deviation used by layer norm.
fn normalize(x: &NumArray) -> (NumArray, f64) {
    let mean = x.mean();
    let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.len() as f64;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    (x.map(|v| (v - mean) * inv_std), inv_std)
}
