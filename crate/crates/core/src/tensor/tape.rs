use std::cell::RefCell;
use std::fmt;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Primitive operation recorded for a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Exp,
    Log,
    Sum,
    Mean,
    Max,
    L2Normalize,
    Softmax,
    LayerNorm,
    Concat,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    Mean(usize, usize),
    Max {
        input: usize,
        axis: usize,
        argmax: Vec<usize>,
    },
    L2Normalize {
        input: usize,
        norms: Vec<f64>,
    },
    Softmax(usize, usize),
    LayerNorm {
        input: usize,
        inv_std: Vec<f64>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
        sizes: Vec<usize>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(_) => OpKind::Relu,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Max { .. } => OpKind::Max,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Concat { .. } => OpKind::Concat,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order of the
/// graph, so the backward pass is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, param: Option<ParamId>, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            param,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, None, false)
    }

    /// Leaf that receives gradients but is not tied to a stored parameter.
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, None, true)
    }

    /// Leaf holding a copy of a stored parameter's current value.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        self.push(store.value(id).clone(), Op::Leaf, Some(id), true)
    }

    pub fn op_kind(&self, var: Var<'_>) -> OpKind {
        self.nodes.borrow()[var.id].op.kind()
    }

    /// Reverse sweep from a one-element root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::usage("backward root belongs to a different tape"));
        }
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar root, got shape {:?}",
                nodes[root.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.id + 1];
        grads[root.id] = Some(Tensor::ones(nodes[root.id].value.shape()));
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            let mut send = |to: usize, t: Tensor| {
                if !nodes[to].needs_grad {
                    return;
                }
                match &mut grads[to] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => unreachable!(),
                &Op::MatMul(a, b) => {
                    send(a, g.matmul(&val(b).transpose()?)?);
                    send(b, val(a).transpose()?.matmul(&g)?);
                }
                &Op::Transpose(a) => send(a, g.transpose()?),
                &Op::Add(a, b) => {
                    send(a, g.reduce_to(val(a).shape()));
                    send(b, g.reduce_to(val(b).shape()));
                }
                &Op::Sub(a, b) => {
                    send(a, g.reduce_to(val(a).shape()));
                    send(b, g.map(|v| -v).reduce_to(val(b).shape()));
                }
                &Op::Mul(a, b) => {
                    let (va, vb) = (val(a), val(b));
                    send(a, g.broadcast_with(vb, |x, y| x * y)?.reduce_to(va.shape()));
                    send(b, g.broadcast_with(va, |x, y| x * y)?.reduce_to(vb.shape()));
                }
                &Op::Scale(a, c) => send(a, g.map(|v| v * c)),
                &Op::Relu(a) => send(a, g.zip_map(val(a), |d, x| if x > 0.0 { d } else { 0.0 })),
                &Op::Exp(a) => send(a, g.zip_map(&node.value, |d, y| d * y)),
                &Op::Log(a) => send(a, g.zip_map(val(a), |d, x| d / x)),
                &Op::Sum(a) => send(a, g.expand_to(val(a).shape())),
                &Op::Mean(a, axis) => {
                    let len = val(a).shape()[axis] as f64;
                    send(a, g.expand_to(val(a).shape()).map(|v| v / len));
                }
                Op::Max {
                    input,
                    axis,
                    argmax,
                } => {
                    let x = val(*input);
                    let (outer, len, inner) = x.axis_split(*axis);
                    let mut dx = Tensor::zeros(x.shape());
                    for o in 0..outer {
                        for i in 0..inner {
                            let slot = o * inner + i;
                            dx.data_mut()[(o * len + argmax[slot]) * inner + i] += g.data()[slot];
                        }
                    }
                    send(*input, dx);
                }
                Op::L2Normalize { input, norms } => {
                    let x = val(*input);
                    let y = &node.value;
                    let c = x.cols();
                    let mut dx = g.clone();
                    for (r, &n) in norms.iter().enumerate() {
                        let span = r * c..(r + 1) * c;
                        let raw = x.data()[span.clone()]
                            .iter()
                            .map(|v| v * v)
                            .sum::<f64>()
                            .sqrt();
                        let yr = &y.data()[span.clone()];
                        let dyr = &g.data()[span.clone()];
                        // a clamped norm is constant, so only the 1/n scaling flows back
                        let proj = if raw > super::NORM_EPS {
                            yr.iter().zip(dyr).map(|(a, b)| a * b).sum::<f64>()
                        } else {
                            0.0
                        };
                        for ((d, &dy), &yv) in dx.data_mut()[span].iter_mut().zip(dyr).zip(yr) {
                            *d = (dy - yv * proj) / n;
                        }
                    }
                    send(*input, dx);
                }
                &Op::Softmax(a, axis) => {
                    let y = &node.value;
                    let gy = g.zip_map(y, |d, s| d * s);
                    let dot = gy.sum_axis(axis)?.expand_to(y.shape());
                    let dx = y.zip_map(&g.zip_map(&dot, |d, s| d - s), |s, v| s * v);
                    send(a, dx);
                }
                Op::LayerNorm { input, inv_std } => {
                    let y = &node.value;
                    let c = y.cols();
                    let cf = c as f64;
                    let mut dx = g.clone();
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let span = r * c..(r + 1) * c;
                        let yr = &y.data()[span.clone()];
                        let dyr = &g.data()[span.clone()];
                        let sum_dy: f64 = dyr.iter().sum();
                        let sum_dyy: f64 = dyr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, &dy), &yv) in dx.data_mut()[span].iter_mut().zip(dyr).zip(yr) {
                            *d = inv / cf * (cf * dy - sum_dy - yv * sum_dyy);
                        }
                    }
                    send(*input, dx);
                }
                Op::Concat {
                    inputs,
                    axis,
                    sizes,
                } => {
                    for (&i, part) in inputs.iter().zip(g.split(*axis, sizes)) {
                        send(i, part);
                    }
                }
            }
        }
        let params = nodes
            .iter()
            .zip(&grads)
            .filter_map(|(n, g)| Some((n.param?, g.clone()?)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient of the root with respect to a leaf, if it was reached.
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Per-leaf gradients of parameter-bound leaves, in tape order.
    pub fn params(&self) -> &[(ParamId, Tensor)] {
        &self.params
    }

    /// Sums gradients into the store; a parameter bound more than once
    /// receives the sum over its leaves.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (id, g) in &self.params {
            store.accumulate_grad(*id, g)?;
        }
        Ok(())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Value of a one-element node.
    pub fn item(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.id].value;
        assert_eq!(v.numel(), 1, "item() on shape {:?}", v.shape());
        v.data()[0]
    }

    fn needs_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::usage("operands belong to different tapes"))
        }
    }

    fn unary(self, f: impl FnOnce(&Tensor) -> Result<(Tensor, Op)>) -> Result<Var<'t>> {
        let (value, op) = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value)?
        };
        Ok(self.tape.push(value, op, None, self.needs_grad()))
    }

    fn binary(
        self,
        other: Var<'t>,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)?
        };
        let needs = self.needs_grad() || other.needs_grad();
        Ok(self.tape.push(value, op, None, needs))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a.matmul(b), Op::MatMul(self.id, other.id))
    }

    pub fn t(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(|x| Ok((x.transpose()?, Op::Transpose(id))))
    }

    /// Elementwise sum with same-rank broadcasting over size-1 axes.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            |a, b| a.broadcast_with(b, |x, y| x + y),
            Op::Add(self.id, other.id),
        )
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            |a, b| a.broadcast_with(b, |x, y| x - y),
            Op::Sub(self.id, other.id),
        )
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            |a, b| a.broadcast_with(b, |x, y| x * y),
            Op::Mul(self.id, other.id),
        )
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(|x| Ok((x.map(|v| v * c), Op::Scale(id, c))))
    }

    pub fn relu(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(|x| Ok((x.map(|v| v.max(0.0)), Op::Relu(id))))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(|x| Ok((x.map(f64::exp), Op::Exp(id))))
    }

    pub fn ln(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(|x| Ok((x.map(f64::ln), Op::Log(id))))
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum(self, axis: usize) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(|x| Ok((x.sum_axis(axis)?, Op::Sum(id))))
    }

    /// Mean along `axis`, keeping it with size 1.
    pub fn mean(self, axis: usize) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(|x| Ok((x.mean_axis(axis)?, Op::Mean(id, axis))))
    }

    /// Max along `axis`; the gradient goes to the first maximal entry.
    pub fn max(self, axis: usize) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(|x| {
            let (m, argmax) = x.max_axis(axis)?;
            Ok((
                m,
                Op::Max {
                    input: id,
                    axis,
                    argmax,
                },
            ))
        })
    }

    /// Sum of every element, as a tensor with all dims 1.
    pub fn sum_all(self) -> Result<Var<'t>> {
        (0..self.shape().len()).try_fold(self, |acc, axis| acc.sum(axis))
    }

    pub fn mean_all(self) -> Result<Var<'t>> {
        (0..self.shape().len()).try_fold(self, |acc, axis| acc.mean(axis))
    }

    /// Divides each row (last axis) by its L2 norm, clamped below at 1e-12.
    pub fn l2_normalize(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(|x| {
            let (y, norms) = x.l2_normalize_rows();
            Ok((y, Op::L2Normalize { input: id, norms }))
        })
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(|x| Ok((x.softmax(axis)?, Op::Softmax(id, axis))))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(|x| {
            let (y, inv_std) = x.layer_norm();
            Ok((y, Op::LayerNorm { input: id, inv_std }))
        })
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::usage("concat of zero tensors"))?;
        for p in parts {
            first.same_tape(p)?;
        }
        let tape = first.tape;
        let (value, sizes) = {
            let nodes = tape.nodes.borrow();
            let tensors: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.id].value).collect();
            let value = Tensor::concat(&tensors, axis)?;
            let sizes = tensors.iter().map(|t| t.shape()[axis]).collect();
            (value, sizes)
        };
        let needs = parts.iter().any(|p| p.needs_grad());
        Ok(tape.push(
            value,
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
                sizes,
            },
            None,
            needs,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.variable(Tensor::scalar(3.0));
        let y = x.mul(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn max_routes_to_first_maximum() {
        let tape = Tape::new();
        let x = tape.variable(Tensor::row_vector(vec![2.0, 5.0, 5.0]).unwrap());
        let m = x.max(1).unwrap();
        let g = tape.backward(m).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_is_usage_error() {
        let tape = Tape::new();
        let x = tape.variable(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(x).unwrap_err().is_usage());
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x*x + 3x, two consumers of x
        let tape = Tape::new();
        let x = tape.variable(Tensor::scalar(2.0));
        let y = x.mul(x).unwrap().add(x.scale(3.0).unwrap()).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let x = tape.variable(Tensor::scalar(1.5));
        let y = c.mul(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn mixing_tapes_is_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.variable(Tensor::scalar(1.0));
        let b = t2.variable(Tensor::scalar(1.0));
        assert!(a.add(b).is_err());
    }

    #[test]
    fn param_bound_twice_sums() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(4.0)).unwrap();
        let tape = Tape::new();
        let a = tape.param(&store, id);
        let b = tape.param(&store, id);
        let y = a.mul(b).unwrap();
        tape.backward(y)
            .unwrap()
            .accumulate_into(&mut store)
            .unwrap();
        assert_eq!(store.grad(id).unwrap().data(), &[8.0]);
    }

    #[test]
    fn op_kinds_are_recorded() {
        let tape = Tape::new();
        let x = tape.variable(Tensor::zeros(&[2, 3]));
        assert_eq!(tape.op_kind(x), OpKind::Leaf);
        let y = x.softmax(1).unwrap();
        assert_eq!(tape.op_kind(y), OpKind::Softmax);
    }
}
