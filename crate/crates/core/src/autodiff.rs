//! Tape-based reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation applied to tensors that carry a node on
//! it. Values are computed eagerly; [`Tape::backward`] replays the recorded
//! nodes once in reverse insertion order. Operations outside the built-in set
//! are recorded with [`Tape::record_custom`] and dispatched to a rule that was
//! registered with [`Tape::register_custom`].

use std::any::Any;
use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use ndarray::{concatenate, ArrayD, ArrayView2, Axis, Ix2, IxDyn, Slice};

pub type NodeId = usize;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible input shapes {shapes:?}")]
    Shape { op: String, shapes: Vec<Vec<usize>> },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("tensor is not recorded on a tape")]
    Detached,
    #[error("inputs are recorded on different tapes")]
    TapeMismatch,
    #[error("no backward rule registered for custom op `{0}`")]
    Unregistered(String),
    #[error("custom op `{0}` already has a backward rule")]
    DuplicateRule(String),
    #[error("custom op `{op}`: gradient for input {index} has shape {got:?}, expected {expected:?}")]
    RuleShape {
        op: String,
        index: usize,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("custom op `{op}`: {msg}")]
    RuleFailed { op: String, msg: String },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Backward rule of a custom op: receives the context saved at record time
/// and the gradient of the op output, returns one gradient per input.
pub type BackwardRule = Rc<dyn Fn(&dyn Any, &ArrayD<f64>) -> std::result::Result<Vec<ArrayD<f64>>, String>>;

#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    MatMul,
    Relu,
    Sigmoid,
    /// Sum of all elements; the output is 0-dimensional.
    Sum,
    Scale(f64),
    Concat(usize),
    Slice { axis: usize, start: usize, end: usize },
    /// `B x k` matrix plus a length-`k` bias broadcast over rows.
    BiasAdd,
    Abs,
    Ln,
    Sqrt,
    Recip,
    Clamp { lo: f64, hi: f64 },
    /// A differentiable input created by [`Tape::leaf`].
    Leaf,
    Custom(String),
}

impl OpKind {
    fn name(&self) -> String {
        match self {
            OpKind::Custom(k) => k.clone(),
            other => format!("{other:?}").to_lowercase(),
        }
    }
}

enum Saved {
    Nothing,
    Values(Vec<Rc<ArrayD<f64>>>),
    Custom(Box<dyn Any>),
}

struct Node {
    kind: OpKind,
    inputs: Vec<Option<NodeId>>,
    input_shapes: Vec<Vec<usize>>,
    saved: Saved,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    rules: HashMap<String, BackwardRule>,
}

/// Append-only record of operations. Cloning a `Tape` yields another handle
/// to the same record.
#[derive(Clone, Default)]
pub struct Tape(Rc<RefCell<TapeInner>>);

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

impl PartialEq for Tape {
    fn eq(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

/// A dense array, optionally linked to a node on a tape.
#[derive(Clone)]
pub struct Tensor {
    value: Rc<ArrayD<f64>>,
    node: Option<(Tape, NodeId)>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("node", &self.node.as_ref().map(|(_, id)| *id))
            .finish()
    }
}

impl Tensor {
    /// A tensor that takes part in no gradient computation.
    pub fn constant(value: ArrayD<f64>) -> Self {
        Tensor { value: Rc::new(value), node: None }
    }

    pub fn from_vec(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let value = ArrayD::from_shape_vec(IxDyn(shape), values).map_err(|_| AutodiffError::Shape {
            op: "from_vec".into(),
            shapes: vec![shape.to_vec()],
        })?;
        Ok(Tensor::constant(value))
    }

    pub fn value(&self) -> &ArrayD<f64> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node.as_ref().map(|(_, id)| *id)
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|(t, _)| t)
    }

    /// Same values, no node.
    pub fn detach(&self) -> Tensor {
        Tensor { value: self.value.clone(), node: None }
    }

    /// The single value of a one-element tensor.
    pub fn scalar(&self) -> Option<f64> {
        (self.value.len() == 1).then(|| *self.value.iter().next().unwrap())
    }

    pub fn add(&self, o: &Tensor) -> Result<Tensor> {
        record(OpKind::Add, &[self, o])
    }
    pub fn sub(&self, o: &Tensor) -> Result<Tensor> {
        record(OpKind::Sub, &[self, o])
    }
    pub fn mul(&self, o: &Tensor) -> Result<Tensor> {
        record(OpKind::Mul, &[self, o])
    }
    pub fn matmul(&self, o: &Tensor) -> Result<Tensor> {
        record(OpKind::MatMul, &[self, o])
    }
    pub fn bias_add(&self, bias: &Tensor) -> Result<Tensor> {
        record(OpKind::BiasAdd, &[self, bias])
    }
    pub fn relu(&self) -> Result<Tensor> {
        record(OpKind::Relu, &[self])
    }
    pub fn sigmoid(&self) -> Result<Tensor> {
        record(OpKind::Sigmoid, &[self])
    }
    pub fn sum(&self) -> Result<Tensor> {
        record(OpKind::Sum, &[self])
    }
    pub fn scale(&self, c: f64) -> Result<Tensor> {
        record(OpKind::Scale(c), &[self])
    }
    pub fn abs(&self) -> Result<Tensor> {
        record(OpKind::Abs, &[self])
    }
    pub fn ln(&self) -> Result<Tensor> {
        record(OpKind::Ln, &[self])
    }
    pub fn sqrt(&self) -> Result<Tensor> {
        record(OpKind::Sqrt, &[self])
    }
    pub fn recip(&self) -> Result<Tensor> {
        record(OpKind::Recip, &[self])
    }
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        record(OpKind::Clamp { lo, hi }, &[self])
    }
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        record(OpKind::Slice { axis, start, end }, &[self])
    }
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        record(OpKind::Concat(axis), parts)
    }
}

fn shape_err(kind: &OpKind, inputs: &[&Tensor]) -> AutodiffError {
    AutodiffError::Shape {
        op: kind.name(),
        shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

fn view2<'a>(a: &'a ArrayD<f64>) -> Option<ArrayView2<'a, f64>> {
    a.view().into_dimensionality::<Ix2>().ok()
}

/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn forward(kind: &OpKind, inputs: &[&Tensor]) -> Result<ArrayD<f64>> {
    let bad = || shape_err(kind, inputs);
    let unary = || -> Result<&ArrayD<f64>> {
        match inputs {
            [a] => Ok(a.value()),
            _ => Err(bad()),
        }
    };
    let binary_same = || -> Result<(&ArrayD<f64>, &ArrayD<f64>)> {
        match inputs {
            [a, b] if a.shape() == b.shape() => Ok((a.value(), b.value())),
            _ => Err(bad()),
        }
    };
    Ok(match kind {
        OpKind::Add => {
            let (a, b) = binary_same()?;
            a + b
        }
        OpKind::Sub => {
            let (a, b) = binary_same()?;
            a - b
        }
        OpKind::Mul => {
            let (a, b) = binary_same()?;
            a * b
        }
        OpKind::MatMul => match inputs {
            [a, b] => {
                let (a, b) = (view2(a.value()).ok_or_else(bad)?, view2(b.value()).ok_or_else(bad)?);
                if a.ncols() != b.nrows() {
                    return Err(bad());
                }
                a.dot(&b).into_dyn()
            }
            _ => return Err(bad()),
        },
        OpKind::BiasAdd => match inputs {
            [x, b] => {
                let xv = view2(x.value()).ok_or_else(bad)?;
                if b.shape() != [xv.ncols()] {
                    return Err(bad());
                }
                (&xv + &b.value().view()).into_dyn()
            }
            _ => return Err(bad()),
        },
        OpKind::Relu => unary()?.mapv(|v| v.max(0.0)),
        OpKind::Sigmoid => unary()?.mapv(sigmoid),
        OpKind::Sum => ArrayD::from_elem(IxDyn(&[]), unary()?.sum()),
        OpKind::Scale(c) => unary()? * *c,
        OpKind::Abs => unary()?.mapv(f64::abs),
        OpKind::Ln => unary()?.mapv(f64::ln),
        OpKind::Sqrt => unary()?.mapv(f64::sqrt),
        OpKind::Recip => unary()?.mapv(|v| 1.0 / v),
        OpKind::Clamp { lo, hi } => unary()?.mapv(|v| v.clamp(*lo, *hi)),
        OpKind::Slice { axis, start, end } => {
            let a = unary()?;
            if *axis >= a.ndim() || start > end || *end > a.shape()[*axis] {
                return Err(bad());
            }
            a.slice_axis(Axis(*axis), Slice::from(*start..*end)).to_owned()
        }
        OpKind::Concat(axis) => {
            if inputs.is_empty() {
                return Err(bad());
            }
            let views: Vec<_> = inputs.iter().map(|t| t.value().view()).collect();
            concatenate(Axis(*axis), &views).map_err(|_| bad())?
        }
        OpKind::Leaf | OpKind::Custom(_) => return Err(bad()),
    })
}

fn common_tape(inputs: &[&Tensor]) -> Result<Option<Tape>> {
    let mut tape: Option<&Tape> = None;
    for t in inputs {
        if let Some(other) = t.tape() {
            match tape {
                None => tape = Some(other),
                Some(cur) if cur == other => {}
                Some(_) => return Err(AutodiffError::TapeMismatch),
            }
        }
    }
    Ok(tape.cloned())
}

/// Applies a built-in op. The output is recorded on the inputs' tape, or is a
/// constant when no input carries a node.
pub fn record(kind: OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    let value = forward(&kind, inputs)?;
    let Some(tape) = common_tape(inputs)? else {
        return Ok(Tensor::constant(value));
    };
    let value = Rc::new(value);
    let saved = match &kind {
        OpKind::Mul | OpKind::MatMul => Saved::Values(inputs.iter().map(|t| t.value.clone()).collect()),
        OpKind::Relu | OpKind::Abs | OpKind::Ln | OpKind::Clamp { .. } => Saved::Values(vec![inputs[0].value.clone()]),
        OpKind::Sigmoid | OpKind::Sqrt | OpKind::Recip => Saved::Values(vec![value.clone()]),
        _ => Saved::Nothing,
    };
    let id = tape.push(Node {
        kind,
        inputs: inputs.iter().map(|t| t.node_id()).collect(),
        input_shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
        saved,
    });
    Ok(Tensor { value, node: Some((tape, id)) })
}

/// Gradients of a scalar with respect to the leaves of a tape.
#[derive(Debug, Default)]
pub struct Gradients {
    by_leaf: HashMap<NodeId, ArrayD<f64>>,
}

impl Gradients {
    pub fn get(&self, leaf: &Tensor) -> Option<&ArrayD<f64>> {
        leaf.node_id().and_then(|id| self.by_leaf.get(&id))
    }

    pub fn by_id(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.by_leaf.get(&id)
    }

    pub fn take(&mut self, leaf: &Tensor) -> Option<ArrayD<f64>> {
        leaf.node_id().and_then(|id| self.by_leaf.remove(&id))
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.0.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> NodeId {
        let mut inner = self.0.borrow_mut();
        inner.nodes.push(node);
        inner.nodes.len() - 1
    }

    /// A differentiable input.
    pub fn leaf(&self, value: ArrayD<f64>) -> Tensor {
        let shape = value.shape().to_vec();
        let id = self.push(Node {
            kind: OpKind::Leaf,
            inputs: vec![],
            input_shapes: vec![shape],
            saved: Saved::Nothing,
        });
        Tensor { value: Rc::new(value), node: Some((self.clone(), id)) }
    }

    pub fn register_custom(&self, kind: &str, rule: BackwardRule) -> Result<()> {
        let mut inner = self.0.borrow_mut();
        if inner.rules.contains_key(kind) {
            return Err(AutodiffError::DuplicateRule(kind.to_string()));
        }
        inner.rules.insert(kind.to_string(), rule);
        Ok(())
    }

    pub fn has_rule(&self, kind: &str) -> bool {
        self.0.borrow().rules.contains_key(kind)
    }

    /// Records an op whose forward value was computed by the caller. `ctx`
    /// is handed back to the registered rule during backward.
    pub fn record_custom(&self, kind: &str, inputs: &[&Tensor], output: ArrayD<f64>, ctx: Box<dyn Any>) -> Result<Tensor> {
        for t in inputs {
            if let Some(other) = t.tape() {
                if other != self {
                    return Err(AutodiffError::TapeMismatch);
                }
            }
        }
        let id = self.push(Node {
            kind: OpKind::Custom(kind.to_string()),
            inputs: inputs.iter().map(|t| t.node_id()).collect(),
            input_shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
            saved: Saved::Custom(ctx),
        });
        Ok(Tensor { value: Rc::new(output), node: Some((self.clone(), id)) })
    }

    /// Reverse sweep from a scalar `output`, seeded with `seed`. Every leaf
    /// recorded before `output` gets an entry; unreachable leaves get zeros.
    pub fn backward(&self, output: &Tensor, seed: f64) -> Result<Gradients> {
        let out_id = match &output.node {
            Some((t, id)) if t == self => *id,
            Some(_) => return Err(AutodiffError::TapeMismatch),
            None => return Err(AutodiffError::Detached),
        };
        if output.value.len() != 1 {
            return Err(AutodiffError::NonScalar(output.shape().to_vec()));
        }
        let inner = self.0.borrow();
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; out_id + 1];
        grads[out_id] = Some(ArrayD::from_elem(output.value.raw_dim(), seed));
        let mut result = Gradients::default();

        for id in (0..=out_id).rev() {
            let node = &inner.nodes[id];
            if node.kind == OpKind::Leaf {
                let g = grads[id].take().unwrap_or_else(|| ArrayD::zeros(IxDyn(&node.input_shapes[0])));
                result.by_leaf.insert(id, g);
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if node.inputs.iter().all(Option::is_none) {
                continue;
            }
            let input_grads = local_backward(node, &g, &inner.rules)?;
            for (slot, ig) in node.inputs.iter().zip(input_grads) {
                if let (Some(src), Some(ig)) = (slot, ig) {
                    match &mut grads[*src] {
                        Some(acc) => *acc += &ig,
                        empty => *empty = Some(ig),
                    }
                }
            }
        }
        Ok(result)
    }
}

fn local_backward(node: &Node, g: &ArrayD<f64>, rules: &HashMap<String, BackwardRule>) -> Result<Vec<Option<ArrayD<f64>>>> {
    let values = |i: usize| -> &ArrayD<f64> {
        match &node.saved {
            Saved::Values(v) => &v[i],
            _ => unreachable!("op saves its values"),
        }
    };
    let wants = |i: usize| node.inputs[i].is_some();
    Ok(match &node.kind {
        OpKind::Add => vec![Some(g.clone()), Some(g.clone())],
        OpKind::Sub => vec![Some(g.clone()), Some(-g)],
        OpKind::Mul => vec![
            wants(0).then(|| g * values(1)),
            wants(1).then(|| g * values(0)),
        ],
        OpKind::MatMul => {
            let g2 = view2(g).expect("matmul output is 2-D");
            let a = view2(values(0)).expect("2-D");
            let b = view2(values(1)).expect("2-D");
            vec![
                wants(0).then(|| g2.dot(&b.t()).into_dyn()),
                wants(1).then(|| a.t().dot(&g2).into_dyn()),
            ]
        }
        OpKind::BiasAdd => vec![Some(g.clone()), wants(1).then(|| g.sum_axis(Axis(0)))],
        OpKind::Relu => {
            let mut out = g.clone();
            out.zip_mut_with(values(0), |o, &x| {
                if x <= 0.0 {
                    *o = 0.0
                }
            });
            vec![Some(out)]
        }
        OpKind::Sigmoid => {
            let mut out = g.clone();
            out.zip_mut_with(values(0), |o, &s| *o *= s * (1.0 - s));
            vec![Some(out)]
        }
        OpKind::Sum => {
            let s = *g.iter().next().expect("scalar gradient");
            vec![Some(ArrayD::from_elem(IxDyn(&node.input_shapes[0]), s))]
        }
        OpKind::Scale(c) => vec![Some(g * *c)],
        OpKind::Abs => {
            let mut out = g.clone();
            out.zip_mut_with(values(0), |o, &x| *o *= if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 });
            vec![Some(out)]
        }
        OpKind::Ln => {
            let mut out = g.clone();
            out.zip_mut_with(values(0), |o, &x| *o /= x);
            vec![Some(out)]
        }
        OpKind::Sqrt => {
            let mut out = g.clone();
            out.zip_mut_with(values(0), |o, &y| *o *= 0.5 / y);
            vec![Some(out)]
        }
        OpKind::Recip => {
            let mut out = g.clone();
            out.zip_mut_with(values(0), |o, &y| *o *= -y * y);
            vec![Some(out)]
        }
        OpKind::Clamp { lo, hi } => {
            let mut out = g.clone();
            out.zip_mut_with(values(0), |o, &x| {
                if x < *lo || x > *hi {
                    *o = 0.0
                }
            });
            vec![Some(out)]
        }
        OpKind::Slice { axis, start, end } => {
            let mut out = ArrayD::zeros(IxDyn(&node.input_shapes[0]));
            out.slice_axis_mut(Axis(*axis), Slice::from(*start..*end)).assign(g);
            vec![Some(out)]
        }
        OpKind::Concat(axis) => {
            let mut offset = 0;
            node.input_shapes
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let len = s[*axis];
                    let part = wants(i).then(|| g.slice_axis(Axis(*axis), Slice::from(offset..offset + len)).to_owned());
                    offset += len;
                    part
                })
                .collect()
        }
        OpKind::Leaf => vec![],
        OpKind::Custom(kind) => {
            let rule = rules.get(kind).ok_or_else(|| AutodiffError::Unregistered(kind.clone()))?;
            let Saved::Custom(ctx) = &node.saved else {
                return Err(AutodiffError::Unregistered(kind.clone()));
            };
            let out = rule(ctx.as_ref(), g).map_err(|msg| AutodiffError::RuleFailed { op: kind.clone(), msg })?;
            if out.len() != node.inputs.len() {
                return Err(AutodiffError::RuleFailed {
                    op: kind.clone(),
                    msg: format!("returned {} gradients for {} inputs", out.len(), node.inputs.len()),
                });
            }
            for (index, (o, expected)) in out.iter().zip(&node.input_shapes).enumerate() {
                if o.shape() != expected.as_slice() {
                    return Err(AutodiffError::RuleShape {
                        op: kind.clone(),
                        index,
                        got: o.shape().to_vec(),
                        expected: expected.clone(),
                    });
                }
            }
            out.into_iter().map(Some).collect()
        }
    })
}

/// Sums gradients produced by independent tapes (one per worker).
pub fn merge_gradients(parts: &[Vec<ArrayD<f64>>]) -> Option<Vec<ArrayD<f64>>> {
    let (first, rest) = parts.split_first()?;
    let mut acc = first.clone();
    for part in rest {
        for (a, p) in acc.iter_mut().zip(part) {
            *a += p;
        }
    }
    Some(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn t(v: ArrayD<f64>) -> Tensor {
        Tensor::constant(v)
    }

    #[test]
    fn forward_examples() {
        let tape = Tape::new();
        let a = tape.leaf(array![1.0, 2.0, 3.0].into_dyn());
        let b = t(array![4.0, 5.0, 6.0].into_dyn());
        assert_eq!(a.add(&b).unwrap().value().as_slice().unwrap(), &[5.0, 7.0, 9.0]);

        let m = tape.leaf(ArrayD::zeros(IxDyn(&[2, 3])));
        let v = t(ArrayD::zeros(IxDyn(&[3, 1])));
        assert_eq!(m.matmul(&v).unwrap().shape(), &[2, 1]);

        let z = tape.leaf(array![0.0].into_dyn());
        assert_eq!(z.sigmoid().unwrap().scalar(), Some(0.5));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let tape = Tape::new();
        let a = tape.leaf(ArrayD::zeros(IxDyn(&[2, 3])));
        let err = a.matmul(&a).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
        assert!(a.add(&t(ArrayD::zeros(IxDyn(&[3])))).is_err());
    }

    #[test]
    fn square_and_relu_gradients() {
        let tape = Tape::new();
        let x = tape.leaf(array![1.0, 2.0, 3.0].into_dyn());
        let y = x.mul(&x).unwrap().sum().unwrap();
        let g = tape.backward(&y, 1.0).unwrap();
        assert_eq!(g.get(&x).unwrap().as_slice().unwrap(), &[2.0, 4.0, 6.0]);

        let tape = Tape::new();
        let x = tape.leaf(array![-1.0, 0.0, 2.0].into_dyn());
        let y = x.relu().unwrap().sum().unwrap();
        let g = tape.backward(&y, 1.0).unwrap();
        assert_eq!(g.get(&x).unwrap().as_slice().unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let tape = Tape::new();
        let x = tape.leaf(array![1.0, 2.0].into_dyn());
        let unused = tape.leaf(array![[1.0, 2.0]].into_dyn());
        let y = x.sum().unwrap();
        let g = tape.backward(&y, 1.0).unwrap();
        assert_eq!(g.get(&unused).unwrap(), &ArrayD::zeros(IxDyn(&[1, 2])));
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(array![1.0, 2.0].into_dyn());
        let y = x.scale(2.0).unwrap();
        assert!(matches!(tape.backward(&y, 1.0), Err(AutodiffError::NonScalar(_))));
        assert!(matches!(tape.backward(&t(array![1.0].into_dyn()), 1.0), Err(AutodiffError::Detached)));
    }

    #[test]
    fn constants_do_not_record() {
        let tape = Tape::new();
        let a = t(array![1.0, 2.0].into_dyn());
        let b = a.mul(&a).unwrap();
        assert!(b.node_id().is_none());
        assert_eq!(tape.len(), 0);
    }

    #[test]
    fn mixed_tapes_rejected() {
        let (t1, t2) = (Tape::new(), Tape::new());
        let a = t1.leaf(array![1.0].into_dyn());
        let b = t2.leaf(array![1.0].into_dyn());
        assert!(matches!(a.add(&b), Err(AutodiffError::TapeMismatch)));
    }

    #[test]
    fn node_count_equals_recorded_ops() {
        let tape = Tape::new();
        let x = tape.leaf(ArrayD::ones(IxDyn(&[4, 3])));
        let w = tape.leaf(ArrayD::ones(IxDyn(&[3, 2])));
        let b = tape.leaf(ArrayD::ones(IxDyn(&[2])));
        let y = x.matmul(&w).unwrap().bias_add(&b).unwrap().relu().unwrap().sum().unwrap();
        assert_eq!(tape.len(), 3 + 4);
        tape.backward(&y, 1.0).unwrap();
        assert_eq!(tape.len(), 7);
    }

    #[test]
    fn custom_rule_dispatch_and_errors() {
        use std::cell::Cell;
        let calls = Rc::new(Cell::new(0));
        let tape = Tape::new();
        let c = calls.clone();
        tape.register_custom(
            "double",
            Rc::new(move |_ctx, g| {
                c.set(c.get() + 1);
                Ok(vec![g * 2.0])
            }),
        )
        .unwrap();
        assert!(matches!(
            tape.register_custom("double", Rc::new(|_, g| Ok(vec![g.clone()]))),
            Err(AutodiffError::DuplicateRule(_))
        ));
        let x = tape.leaf(array![1.0, 3.0].into_dyn());
        let y = tape.record_custom("double", &[&x], x.value() * 2.0, Box::new(())).unwrap();
        let s = y.sum().unwrap();
        let g = tape.backward(&s, 1.0).unwrap();
        assert_eq!(g.get(&x).unwrap().as_slice().unwrap(), &[2.0, 2.0]);
        assert_eq!(calls.get(), 1);

        let y = tape.record_custom("mystery", &[&x], x.value().clone(), Box::new(())).unwrap();
        let s = y.sum().unwrap();
        let err = tape.backward(&s, 1.0).unwrap_err();
        assert!(err.to_string().contains("mystery"));

        tape.register_custom("broken", Rc::new(|_, _| Ok(vec![ArrayD::zeros(IxDyn(&[5]))]))).unwrap();
        let y = tape.record_custom("broken", &[&x], x.value().clone(), Box::new(())).unwrap();
        let s = y.sum().unwrap();
        assert!(matches!(tape.backward(&s, 1.0), Err(AutodiffError::RuleShape { .. })));
    }

    #[test]
    fn slice_concat_roundtrip_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]].into_dyn());
        let top = x.slice(0, 0, 1).unwrap();
        let rest = x.slice(0, 1, 3).unwrap();
        let joined = Tensor::concat(&[&rest, &top.scale(3.0).unwrap()], 0).unwrap();
        let y = joined.sum().unwrap();
        let g = tape.backward(&y, 1.0).unwrap();
        assert_eq!(g.get(&x).unwrap(), &array![[3.0, 3.0], [1.0, 1.0], [1.0, 1.0]].into_dyn());
    }
}
