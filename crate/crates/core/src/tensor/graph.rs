//! Dynamic-tape reverse-mode differentiation.
//!
//! A [`Graph`] records every op as it executes; [`backward`] walks the tape
//! in reverse and emits cotangents *as new graph nodes*, so a gradient can
//! itself be differentiated once more (used by the discriminator gradient
//! penalty). Graphs are single-threaded and dropped wholesale after a step.

use std::cell::RefCell;
use std::rc::Rc;

use super::{ElemKind, Tensor};
use crate::error::{CoreError, Result};

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Neg,
    Mul,
    AddScalar,
    MulScalar(f32),
    Recip,
    Sqrt,
    LeakyRelu(f32),
    Sigmoid,
    Softplus,
    SoftmaxRows,
    Matmul,
    Transpose2,
    Reshape { from: Vec<usize> },
    SumAll,
    MeanAll,
    RowSum,
    ColSum,
    BroadcastScalar,
    BroadcastRow,
    BroadcastCol,
    AddRow,
    MulRow,
    AddCol,
    MulCol,
    ScaleByScalar,
    Conv2d { stride: usize, pad: usize },
    ConvInputAdjoint { stride: usize, pad: usize },
    ConvKernelAdjoint,
    AvgPool2,
    AvgUnpool2,
    Crop2d { y0: usize, x0: usize, from_h: usize, from_w: usize },
    PadEmbed2d { y0: usize, x0: usize },
    Fft2 { inverse: bool },
    CMul,
    Conj,
    Modulus,
    ModulusVjp,
    ChannelsToComplex,
    ComplexToChannels,
}

pub(crate) struct Node {
    pub value: Tensor,
    pub parents: Vec<usize>,
    pub op: Op,
    pub needs_grad: bool,
}

/// Shared handle to a computation tape.
#[derive(Clone)]
pub struct Graph {
    pub(crate) inner: Rc<RefCell<Vec<Node>>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph {
            inner: Rc::new(RefCell::new(Vec::new())),
        }
    }

    /// A differentiable input node.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, vec![], Op::Leaf, true)
    }

    /// A non-differentiable input node.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, vec![], Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(
        &self,
        value: Tensor,
        parents: Vec<usize>,
        op: Op,
        needs_grad: bool,
    ) -> Var {
        let mut nodes = self.inner.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            op,
            needs_grad,
        });
        Var {
            graph: self.clone(),
            id,
        }
    }

    fn same_graph(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Handle to one node of a [`Graph`].
#[derive(Clone)]
pub struct Var {
    pub(crate) graph: Graph,
    pub(crate) id: usize,
}

impl Var {
    pub fn value(&self) -> Tensor {
        self.graph.inner.borrow()[self.id].value.clone()
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow()[self.id].value.shape().to_vec()
    }

    pub fn kind(&self) -> ElemKind {
        self.graph.inner.borrow()[self.id].value.kind()
    }

    pub fn needs_grad(&self) -> bool {
        self.graph.inner.borrow()[self.id].needs_grad
    }

    pub fn scalar_value(&self) -> Result<f32> {
        self.graph.inner.borrow()[self.id].value.scalar_value()
    }

    /// Run `f` with borrowed access to this node's tensor.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.graph.inner.borrow()[self.id].value)
    }

    pub(crate) fn with2<R>(&self, other: &Var, f: impl FnOnce(&Tensor, &Tensor) -> R) -> Result<R> {
        if !self.graph.same_graph(&other.graph) {
            return Err(CoreError::contract(
                "operands belong to different graphs".to_string(),
            ));
        }
        let nodes = self.graph.inner.borrow();
        Ok(f(&nodes[self.id].value, &nodes[other.id].value))
    }

    pub(crate) fn unary(&self, value: Tensor, op: Op) -> Var {
        let needs = self.needs_grad();
        self.graph.push(value, vec![self.id], op, needs)
    }

    pub(crate) fn binary(&self, other: &Var, value: Tensor, op: Op) -> Var {
        let needs = self.needs_grad() || other.needs_grad();
        self.graph
            .push(value, vec![self.id, other.id], op, needs)
    }
}

/// Cotangents produced by [`backward`], indexed by node.
pub struct GradMap {
    grads: Vec<Option<Var>>,
}

impl GradMap {
    /// Cotangent of `v`, if `v` influenced the loss.
    pub fn grad(&self, v: &Var) -> Option<&Var> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Cotangent of `v` as a tensor, zero-filled when absent.
    pub fn grad_tensor(&self, v: &Var) -> Tensor {
        match self.grad(v) {
            Some(g) => g.value(),
            None => Tensor::zeros(&v.shape(), v.kind()),
        }
    }
}

/// Reverse pass from a real scalar loss. Cotangents are graph nodes, so a
/// returned gradient may be fed into further ops and differentiated again.
pub fn backward(loss: &Var) -> Result<GradMap> {
    {
        let nodes = loss.graph.inner.borrow();
        let v = &nodes[loss.id].value;
        if !v.is_scalar() {
            return Err(CoreError::contract(format!(
                "backward requires a real scalar loss, got {:?} {:?}",
                v.kind(),
                v.shape()
            )));
        }
    }
    let mut grads: Vec<Option<Var>> = Vec::new();
    grads.resize(loss.id + 1, None);
    grads[loss.id] = Some(loss.graph.constant(Tensor::scalar(1.0)));

    for id in (0..=loss.id).rev() {
        let cot = match grads[id].clone() {
            Some(c) => c,
            None => continue,
        };
        let (op, parents, needs) = {
            let nodes = loss.graph.inner.borrow();
            let n = &nodes[id];
            if !n.needs_grad || matches!(n.op, Op::Leaf) {
                continue;
            }
            (n.op.clone(), n.parents.clone(), n.needs_grad)
        };
        debug_assert!(needs);
        let out = Var {
            graph: loss.graph.clone(),
            id,
        };
        let parent_vars: Vec<Var> = parents
            .iter()
            .map(|&p| Var {
                graph: loss.graph.clone(),
                id: p,
            })
            .collect();
        let pcots = super::ops::vjp(&op, &parent_vars, &out, &cot)?;
        for (pvar, pcot) in parent_vars.iter().zip(pcots.into_iter()) {
            let pcot = match pcot {
                Some(c) => c,
                None => continue,
            };
            if !pvar.needs_grad() {
                continue;
            }
            grads[pvar.id] = match grads[pvar.id].take() {
                None => Some(pcot),
                Some(existing) => Some(existing.add(&pcot)?),
            };
        }
    }
    Ok(GradMap { grads })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_real_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        assert!(backward(&x).is_err());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_real_vec(&[1], vec![3.0]).unwrap());
        let loss = x.mul(&x).unwrap().sum_all().unwrap();
        let grads = backward(&loss).unwrap();
        assert_eq!(grads.grad_tensor(&x).data(), &[6.0]);
    }

    #[test]
    fn grads_accumulate_across_uses() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_real_vec(&[2], vec![1.0, 2.0]).unwrap());
        // loss = sum(x + x) -> grad = 2
        let loss = x.add(&x).unwrap().sum_all().unwrap();
        let grads = backward(&loss).unwrap();
        assert_eq!(grads.grad_tensor(&x).data(), &[2.0, 2.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_real_vec(&[2], vec![1.0, 2.0]).unwrap());
        let c = g.constant(Tensor::from_real_vec(&[2], vec![5.0, 5.0]).unwrap());
        let loss = x.mul(&c).unwrap().sum_all().unwrap();
        let grads = backward(&loss).unwrap();
        assert!(grads.grad(&c).is_none());
        assert_eq!(grads.grad_tensor(&x).data(), &[5.0, 5.0]);
    }
}
