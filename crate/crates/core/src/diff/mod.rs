//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass and replays it in
//! reverse to produce gradients for the registered leaves. Tapes are
//! rebuilt per step and confined to one thread; independent tapes may run
//! on different threads.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::array::Array;
use crate::error::{HctError, Result};

mod check;
mod ops;

pub use check::grad_check;

/// Epsilon inside the layer-norm variance denominator.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Every operation the tape can record. Each kind has a forward rule and an
/// exact adjoint rule; `Attention` records as a composition of `MatMul`,
/// `Mul` and `Softmax`, so its adjoint is inherited rather than hand-derived.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul { trans_a: bool, trans_b: bool },
    Add,
    Mul,
    Concat { axis: usize },
    MeanPool { axis: usize },
    Softmax,
    Relu,
    Affine,
    LayerNorm { eps: f64 },
    Attention,
    CrossEntropy { labels: Vec<usize> },
    GradReverse { coeff: f64 },
    Reshape { shape: Vec<usize> },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul { .. } => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "elementwise-multiply",
            OpKind::Concat { .. } => "concat",
            OpKind::MeanPool { .. } => "mean-pool",
            OpKind::Softmax => "softmax",
            OpKind::Relu => "relu",
            OpKind::Affine => "affine",
            OpKind::LayerNorm { .. } => "layer-norm",
            OpKind::Attention => "scaled-dot-product-attention",
            OpKind::CrossEntropy { .. } => "cross-entropy-with-logits",
            OpKind::GradReverse { .. } => "gradient-reversal",
            OpKind::Reshape { .. } => "reshape",
        }
    }
}

enum NodeKind {
    Leaf,
    Constant,
    Op(OpKind),
}

struct Node {
    kind: NodeKind,
    inputs: Vec<usize>,
    value: Rc<Array>,
    /// Auxiliary forward data needed by the adjoint (softmax probabilities
    /// for cross-entropy, per-row inverse std for layer norm).
    saved: Option<Vec<f64>>,
    /// True when a tracked leaf is reachable from this node.
    track: bool,
}

/// A value registered on a tape. Cheap to clone; the payload is shared.
#[derive(Clone, Debug)]
pub struct DiffArray {
    tape_uid: u64,
    id: usize,
    value: Rc<Array>,
}

impl DiffArray {
    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn value(&self) -> &Array {
        &self.value
    }

    pub fn to_array(&self) -> Array {
        (*self.value).clone()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn scalar_value(&self) -> f64 {
        self.value.scalar_value()
    }

    /// Handle linking this value into its tape.
    pub fn tape_id(&self) -> usize {
        self.id
    }
}

/// Gradient map from tape leaves to arrays, produced by [`Tape::backward`].
pub struct Gradients {
    tape_uid: u64,
    map: HashMap<usize, Array>,
}

impl Gradients {
    /// Gradient of the loss with respect to a tracked leaf. `None` for
    /// constants, op outputs, or values from another tape.
    pub fn wrt(&self, x: &DiffArray) -> Option<&Array> {
        if x.tape_uid != self.tape_uid {
            return None;
        }
        self.map.get(&x.id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// One forward pass worth of recorded operations.
pub struct Tape {
    uid: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            uid: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, kind: NodeKind, inputs: Vec<usize>, value: Array, saved: Option<Vec<f64>>) -> Result<DiffArray> {
        if !value.is_finite() {
            let op = match &kind {
                NodeKind::Op(k) => k.name(),
                NodeKind::Leaf => "leaf",
                NodeKind::Constant => "constant",
            };
            return Err(HctError::NonFinite { op: op.into() });
        }
        let mut nodes = self.nodes.borrow_mut();
        let track = match &kind {
            NodeKind::Leaf => true,
            NodeKind::Constant => false,
            NodeKind::Op(_) => inputs.iter().any(|&i| nodes[i].track),
        };
        let value = Rc::new(value);
        let id = nodes.len();
        nodes.push(Node { kind, inputs, value: Rc::clone(&value), saved, track });
        Ok(DiffArray { tape_uid: self.uid, id, value })
    }

    /// Register a gradient-tracked input. Backward produces a gradient of
    /// identical shape for every leaf.
    pub fn leaf(&self, value: Array) -> Result<DiffArray> {
        self.push(NodeKind::Leaf, vec![], value, None)
    }

    /// Register a value that participates in the forward pass but receives
    /// no gradient (data, schedule constants, frozen parameters).
    pub fn constant(&self, value: Array) -> Result<DiffArray> {
        self.push(NodeKind::Constant, vec![], value, None)
    }

    fn check_owned(&self, x: &DiffArray, op: &str) -> Result<()> {
        if x.tape_uid != self.uid {
            return Err(HctError::Contract(format!("{}: value belongs to a different tape", op)));
        }
        Ok(())
    }

    /// Record one operation. The result is registered on the tape;
    /// gradient-reversal forwards its input bit-identically.
    pub fn forward_op(&self, kind: OpKind, inputs: &[&DiffArray]) -> Result<DiffArray> {
        for x in inputs {
            self.check_owned(x, kind.name())?;
        }
        let arity_err = |want: &str| {
            HctError::InvalidArgument(format!("{} expects {} inputs, got {}", kind.name(), want, inputs.len()))
        };
        match &kind {
            OpKind::MatMul { trans_a, trans_b } => {
                let [a, b] = inputs else { return Err(arity_err("2")) };
                let out = ops::matmul(a.value(), b.value(), *trans_a, *trans_b)?;
                self.push(NodeKind::Op(kind.clone()), vec![a.id, b.id], out, None)
            }
            OpKind::Add | OpKind::Mul => {
                let [a, b] = inputs else { return Err(arity_err("2")) };
                if a.shape() != b.shape() {
                    return Err(HctError::ShapeMismatch {
                        op: kind.name().into(),
                        detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
                    });
                }
                let data: Vec<f64> = match kind {
                    OpKind::Add => a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
                    _ => a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
                };
                let out = Array::new(a.shape().to_vec(), data)?;
                self.push(NodeKind::Op(kind.clone()), vec![a.id, b.id], out, None)
            }
            OpKind::Concat { axis } => {
                if inputs.is_empty() {
                    return Err(arity_err("at least 1"));
                }
                let vals: Vec<&Array> = inputs.iter().map(|x| x.value()).collect();
                let out = ops::concat(*axis, &vals)?;
                let ids = inputs.iter().map(|x| x.id).collect();
                self.push(NodeKind::Op(kind.clone()), ids, out, None)
            }
            OpKind::MeanPool { axis } => {
                let [x] = inputs else { return Err(arity_err("1")) };
                let out = ops::mean_pool(*axis, x.value())?;
                self.push(NodeKind::Op(kind.clone()), vec![x.id], out, None)
            }
            OpKind::Softmax => {
                let [x] = inputs else { return Err(arity_err("1")) };
                let out = ops::softmax_last(x.value())?;
                self.push(NodeKind::Op(kind.clone()), vec![x.id], out, None)
            }
            OpKind::Relu => {
                let [x] = inputs else { return Err(arity_err("1")) };
                let data: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
                let out = Array::new(x.shape().to_vec(), data)?;
                self.push(NodeKind::Op(kind.clone()), vec![x.id], out, None)
            }
            OpKind::Affine => {
                let [x, w, b] = inputs else { return Err(arity_err("3")) };
                let out = ops::affine(x.value(), w.value(), b.value())?;
                self.push(NodeKind::Op(kind.clone()), vec![x.id, w.id, b.id], out, None)
            }
            OpKind::LayerNorm { eps } => {
                let [x] = inputs else { return Err(arity_err("1")) };
                let (out, inv_std) = ops::layer_norm_last(x.value(), *eps)?;
                self.push(NodeKind::Op(kind.clone()), vec![x.id], out, Some(inv_std))
            }
            OpKind::Attention => {
                let [q, k, v] = inputs else { return Err(arity_err("3")) };
                self.attention(q, k, v)
            }
            OpKind::CrossEntropy { labels } => {
                let [x] = inputs else { return Err(arity_err("1")) };
                let (loss, probs) = ops::cross_entropy(x.value(), labels)?;
                self.push(NodeKind::Op(kind.clone()), vec![x.id], Array::scalar(loss), Some(probs))
            }
            OpKind::GradReverse { .. } => {
                let [x] = inputs else { return Err(arity_err("1")) };
                // Forward is the identity; the stored value is shared with
                // the input, so it is bit-identical by construction.
                let mut nodes = self.nodes.borrow_mut();
                let track = nodes[x.id].track;
                let id = nodes.len();
                let value = Rc::clone(&x.value);
                nodes.push(Node {
                    kind: NodeKind::Op(kind.clone()),
                    inputs: vec![x.id],
                    value: Rc::clone(&value),
                    saved: None,
                    track,
                });
                Ok(DiffArray { tape_uid: self.uid, id, value })
            }
            OpKind::Reshape { shape } => {
                let [x] = inputs else { return Err(arity_err("1")) };
                let out = x.to_array().reshaped(shape.clone())?;
                self.push(NodeKind::Op(kind.clone()), vec![x.id], out, None)
            }
        }
    }

    /// Run the chain rule from a scalar loss back to every tracked leaf.
    /// Leaves not reachable from the loss get zero gradients.
    pub fn backward(&self, loss: &DiffArray) -> Result<Gradients> {
        self.check_owned(loss, "backward")?;
        if loss.len() != 1 {
            return Err(HctError::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.id].track {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let kind = match &node.kind {
                NodeKind::Op(kind) => kind,
                _ => continue,
            };
            let Some(g) = grads[id].take() else { continue };
            let g = Array::new(node.value.shape().to_vec(), g)?;
            let wanted: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].track).collect();
            let input_grads = adjoints(kind, node, &nodes, &g, &wanted)?;
            for ((&slot, want), ig) in node.inputs.iter().zip(&wanted).zip(input_grads) {
                if !want {
                    continue;
                }
                let ig = ig.expect("adjoint missing for tracked input");
                match &mut grads[slot] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&ig) {
                            *a += b;
                        }
                    }
                    None => grads[slot] = Some(ig),
                }
            }
        }
        let mut map = HashMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if let NodeKind::Leaf = node.kind {
                let g = grads[id]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                map.insert(id, Array::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(Gradients { tape_uid: self.uid, map })
    }

    // ----- sugar over forward_op -------------------------------------------

    pub fn matmul(&self, a: &DiffArray, b: &DiffArray) -> Result<DiffArray> {
        self.forward_op(OpKind::MatMul { trans_a: false, trans_b: false }, &[a, b])
    }

    /// a · bᵀ
    pub fn matmul_tb(&self, a: &DiffArray, b: &DiffArray) -> Result<DiffArray> {
        self.forward_op(OpKind::MatMul { trans_a: false, trans_b: true }, &[a, b])
    }

    pub fn add(&self, a: &DiffArray, b: &DiffArray) -> Result<DiffArray> {
        self.forward_op(OpKind::Add, &[a, b])
    }

    pub fn mul(&self, a: &DiffArray, b: &DiffArray) -> Result<DiffArray> {
        self.forward_op(OpKind::Mul, &[a, b])
    }

    /// Multiply by a scalar constant (an untracked filled array).
    pub fn scale(&self, x: &DiffArray, c: f64) -> Result<DiffArray> {
        let k = self.constant(Array::full(x.shape().to_vec(), c))?;
        self.mul(x, &k)
    }

    pub fn concat(&self, axis: usize, parts: &[&DiffArray]) -> Result<DiffArray> {
        self.forward_op(OpKind::Concat { axis }, parts)
    }

    /// Stack rank-1 vectors of equal length into a matrix, one row each.
    pub fn stack_rows(&self, rows: &[&DiffArray]) -> Result<DiffArray> {
        let mut reshaped = Vec::with_capacity(rows.len());
        for r in rows {
            let d = r.len();
            reshaped.push(self.reshape(r, vec![1, d])?);
        }
        let refs: Vec<&DiffArray> = reshaped.iter().collect();
        self.concat(0, &refs)
    }

    pub fn mean_pool(&self, x: &DiffArray, axis: usize) -> Result<DiffArray> {
        self.forward_op(OpKind::MeanPool { axis }, &[x])
    }

    /// Mean over every element, as a rank-0 scalar.
    pub fn mean_all(&self, x: &DiffArray) -> Result<DiffArray> {
        let flat = self.reshape(x, vec![x.len()])?;
        self.mean_pool(&flat, 0)
    }

    /// Sum over every element, as a rank-0 scalar.
    pub fn sum_all(&self, x: &DiffArray) -> Result<DiffArray> {
        let n = x.len() as f64;
        let mean = self.mean_all(x)?;
        self.scale(&mean, n)
    }

    pub fn softmax(&self, x: &DiffArray) -> Result<DiffArray> {
        self.forward_op(OpKind::Softmax, &[x])
    }

    pub fn relu(&self, x: &DiffArray) -> Result<DiffArray> {
        self.forward_op(OpKind::Relu, &[x])
    }

    pub fn affine(&self, x: &DiffArray, w: &DiffArray, b: &DiffArray) -> Result<DiffArray> {
        self.forward_op(OpKind::Affine, &[x, w, b])
    }

    pub fn layer_norm(&self, x: &DiffArray) -> Result<DiffArray> {
        self.forward_op(OpKind::LayerNorm { eps: LAYER_NORM_EPS }, &[x])
    }

    /// softmax(q·kᵀ/√d)·v, recorded as a composition of primitives.
    pub fn attention(&self, q: &DiffArray, k: &DiffArray, v: &DiffArray) -> Result<DiffArray> {
        let w = self.attention_weights(q, k)?;
        self.matmul(&w, v)
    }

    /// The row-stochastic attention weight matrix softmax(q·kᵀ/√d).
    pub fn attention_weights(&self, q: &DiffArray, k: &DiffArray) -> Result<DiffArray> {
        if q.shape().len() != 2 || k.shape().len() != 2 || q.shape()[1] != k.shape()[1] {
            return Err(HctError::ShapeMismatch {
                op: "scaled-dot-product-attention".into(),
                detail: format!("q {:?} vs k {:?}", q.shape(), k.shape()),
            });
        }
        let d = q.shape()[1] as f64;
        let scores = self.matmul_tb(q, k)?;
        let scaled = self.scale(&scores, 1.0 / d.sqrt())?;
        self.softmax(&scaled)
    }

    pub fn cross_entropy(&self, logits: &DiffArray, labels: &[usize]) -> Result<DiffArray> {
        self.forward_op(OpKind::CrossEntropy { labels: labels.to_vec() }, &[logits])
    }

    pub fn grad_reverse(&self, x: &DiffArray, coeff: f64) -> Result<DiffArray> {
        self.forward_op(OpKind::GradReverse { coeff }, &[x])
    }

    pub fn reshape(&self, x: &DiffArray, shape: Vec<usize>) -> Result<DiffArray> {
        self.forward_op(OpKind::Reshape { shape }, &[x])
    }

    /// Zero-valued scalar constant, handy as a loss accumulator seed.
    pub fn zero_scalar(&self) -> Result<DiffArray> {
        self.constant(Array::scalar(0.0))
    }
}

/// Per-input adjoints for one op. Entries are `None` where the input is not
/// tracked (the caller skips them).
fn adjoints(
    kind: &OpKind,
    node: &Node,
    nodes: &[Node],
    g: &Array,
    wanted: &[bool],
) -> Result<Vec<Option<Vec<f64>>>> {
    let input_value = |slot: usize| -> &Array { &nodes[node.inputs[slot]].value };
    match kind {
        OpKind::MatMul { trans_a, trans_b } => {
            let (da, db) = ops::matmul_backward(input_value(0), input_value(1), *trans_a, *trans_b, g)?;
            Ok(vec![
                wanted[0].then(|| da.data().to_vec()),
                wanted[1].then(|| db.data().to_vec()),
            ])
        }
        OpKind::Add => Ok(vec![
            wanted[0].then(|| g.data().to_vec()),
            wanted[1].then(|| g.data().to_vec()),
        ]),
        OpKind::Mul => {
            let a = input_value(0);
            let b = input_value(1);
            let da = wanted[0].then(|| g.data().iter().zip(b.data()).map(|(x, y)| x * y).collect());
            let db = wanted[1].then(|| g.data().iter().zip(a.data()).map(|(x, y)| x * y).collect());
            Ok(vec![da, db])
        }
        OpKind::Concat { axis } => {
            let vals: Vec<&Array> = node.inputs.iter().map(|&i| &*nodes[i].value).collect();
            let parts = ops::concat_backward(*axis, &vals, g);
            Ok(parts
                .into_iter()
                .zip(wanted)
                .map(|(p, &w)| w.then_some(p))
                .collect())
        }
        OpKind::MeanPool { axis } => {
            let dx = wanted[0].then(|| ops::mean_pool_backward(*axis, input_value(0), g));
            Ok(vec![dx])
        }
        OpKind::Softmax => Ok(vec![wanted[0].then(|| ops::softmax_backward(&node.value, g))]),
        OpKind::Relu => {
            let x = input_value(0);
            let dx = wanted[0].then(|| {
                x.data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect()
            });
            Ok(vec![dx])
        }
        OpKind::Affine => {
            let (dx, dw, db) = ops::affine_backward(input_value(0), input_value(1), g)?;
            Ok(vec![
                wanted[0].then(|| dx.data().to_vec()),
                wanted[1].then(|| dw.data().to_vec()),
                wanted[2].then(|| db.data().to_vec()),
            ])
        }
        OpKind::LayerNorm { .. } => {
            let inv_std = node.saved.as_deref().expect("layer-norm saved stats");
            Ok(vec![wanted[0].then(|| ops::layer_norm_backward(&node.value, inv_std, g))])
        }
        OpKind::CrossEntropy { labels } => {
            let probs = node.saved.as_deref().expect("cross-entropy saved probs");
            let dx = wanted[0]
                .then(|| ops::cross_entropy_backward(input_value(0), labels, probs, g.scalar_value()));
            Ok(vec![dx])
        }
        OpKind::GradReverse { coeff } => {
            // The adjoint is exactly -coeff times the incoming gradient.
            let dx = wanted[0].then(|| g.data().iter().map(|v| -coeff * v).collect());
            Ok(vec![dx])
        }
        OpKind::Reshape { .. } => Ok(vec![wanted[0].then(|| g.data().to_vec())]),
        OpKind::Attention => unreachable!("attention records as a composition"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_of_uniform_logits() {
        let tape = Tape::new();
        let x = tape.leaf(Array::vector(vec![0.0, 0.0, 0.0])).unwrap();
        let y = tape.softmax(&x).unwrap();
        for &v in y.data() {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn matmul_identity_preserves_input() {
        let tape = Tape::new();
        let a = tape
            .leaf(Array::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.25, 7.0, -1.0]).unwrap())
            .unwrap();
        let i2 = tape.constant(Array::eye(2)).unwrap();
        let out = tape.matmul(&i2, &a).unwrap();
        assert_eq!(out.data(), a.data());
        assert_eq!(out.shape(), &[2, 3]);
    }

    #[test]
    fn cross_entropy_uniform_two_class() {
        let tape = Tape::new();
        let x = tape.leaf(Array::vector(vec![0.0, 0.0])).unwrap();
        let loss = tape.cross_entropy(&x, &[0]).unwrap();
        assert!(close(loss.scalar_value(), std::f64::consts::LN_2, 1e-12));
    }

    #[test]
    fn square_gradient_matches_analytic() {
        let tape = Tape::new();
        let x = tape.leaf(Array::scalar(3.0)).unwrap();
        let y = tape.mul(&x, &x).unwrap();
        let grads = tape.backward(&y).unwrap();
        assert!(close(grads.wrt(&x).unwrap().scalar_value(), 6.0, 1e-12));
    }

    #[test]
    fn gradient_reversal_is_identity_forward_and_scaled_backward() {
        let tape = Tape::new();
        let x = tape
            .leaf(Array::vector(vec![0.3, -1.25, 4.75, 0.0]))
            .unwrap();
        let r = tape.grad_reverse(&x, 0.5).unwrap();
        for (a, b) in x.data().iter().zip(r.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let s = tape.sum_all(&r).unwrap();
        let grads = tape.backward(&s).unwrap();
        for &v in grads.wrt(&x).unwrap().data() {
            assert!(close(v, -0.5, 1e-15));
        }
    }

    #[test]
    fn mean_pool_over_singleton_axis_is_identity() {
        let tape = Tape::new();
        let x = tape
            .leaf(Array::new(vec![1, 4], vec![2.0, -3.0, 5.0, 7.0]).unwrap())
            .unwrap();
        let y = tape.mean_pool(&x, 0).unwrap();
        assert_eq!(y.shape(), &[4]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn softmax_rows_are_stochastic() {
        let tape = Tape::new();
        let x = tape
            .leaf(Array::matrix(3, 4, (0..12).map(|i| (i as f64) * 0.7 - 4.0).collect()).unwrap())
            .unwrap();
        let y = tape.softmax(&x).unwrap();
        for r in 0..3 {
            let row = &y.data()[r * 4..(r + 1) * 4];
            assert!(row.iter().all(|&v| v >= 0.0));
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(Array::vector(vec![1.0, 2.0])).unwrap();
        assert!(tape.backward(&x).is_err());
    }

    #[test]
    fn backward_rejects_foreign_tape() {
        let tape_a = Tape::new();
        let tape_b = Tape::new();
        let x = tape_a.leaf(Array::scalar(1.0)).unwrap();
        assert!(tape_b.backward(&x).is_err());
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient_of_same_shape() {
        let tape = Tape::new();
        let x = tape.leaf(Array::scalar(2.0)).unwrap();
        let unused = tape.leaf(Array::matrix(2, 2, vec![1.0; 4]).unwrap()).unwrap();
        let y = tape.mul(&x, &x).unwrap();
        let grads = tape.backward(&y).unwrap();
        let gu = grads.wrt(&unused).unwrap();
        assert_eq!(gu.shape(), &[2, 2]);
        assert!(gu.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let tape = Tape::new();
        assert!(tape.leaf(Array::scalar(f64::NAN)).is_err());
        assert!(tape.constant(Array::vector(vec![1.0, f64::INFINITY])).is_err());
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let tape = Tape::new();
        let a = tape.leaf(Array::matrix(2, 3, vec![0.0; 6]).unwrap()).unwrap();
        let b = tape.leaf(Array::matrix(2, 3, vec![0.0; 6]).unwrap()).unwrap();
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{}", msg);
        assert!(msg.contains('3'), "{}", msg);
    }

    #[test]
    fn attention_over_single_key_returns_value_projection() {
        let tape = Tape::new();
        let q = tape.leaf(Array::matrix(3, 2, vec![0.5; 6]).unwrap()).unwrap();
        let k = tape.leaf(Array::matrix(1, 2, vec![1.0, -1.0]).unwrap()).unwrap();
        let v = tape.leaf(Array::matrix(1, 4, vec![0.1, 0.2, 0.3, 0.4]).unwrap()).unwrap();
        let out = tape.attention(&q, &k, &v).unwrap();
        assert_eq!(out.shape(), &[3, 4]);
        for r in 0..3 {
            assert_eq!(&out.data()[r * 4..(r + 1) * 4], v.data());
        }
    }
}
