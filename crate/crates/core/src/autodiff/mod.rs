//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output value, the ids of its inputs
//! and a vector-Jacobian closure. Nodes are appended in evaluation order, so
//! a reverse sweep over the tape is a valid topological order for backward.
//! Only first-order gradients are supported.

mod gemm;
mod nn_ops;
mod ops;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) use gemm::gemm;
pub use nn_ops::conv_output_extent;

/// Vector-Jacobian product: `(grad_out, input values, output value)` to one
/// optional gradient per input.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[Rc<Tensor>], &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    op: &'static str,
    value: Rc<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    excluded: RefCell<Vec<&'static str>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
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

    /// A leaf that receives gradients.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push("leaf", value, Vec::new(), true, None)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push("constant", value, Vec::new(), false, None)
    }

    /// Records a value derived from other tape values through a
    /// non-differentiable function (thresholds, argmax selections). It is a
    /// constant for backward, and the op name is reported by
    /// [`Tape::excluded_ops`].
    pub fn stop_gradient(&self, op: &'static str, value: Tensor) -> Var<'_> {
        let mut excluded = self.excluded.borrow_mut();
        if !excluded.contains(&op) {
            excluded.push(op);
        }
        drop(excluded);
        self.push(op, value, Vec::new(), false, None)
    }

    /// Names of the non-differentiable sub-paths recorded so far.
    pub fn excluded_ops(&self) -> Vec<&'static str> {
        self.excluded.borrow().clone()
    }

    /// Appends an op node. `backward` is dropped when no input needs a
    /// gradient.
    pub fn record<'t>(
        &'t self,
        op: &'static str,
        inputs: &[Var<'t>],
        value: Tensor,
        backward: BackwardFn,
    ) -> Result<Var<'t>> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        let parents = inputs.iter().map(|v| v.id).collect();
        let backward = requires_grad.then_some(backward);
        Ok(self.push(op, value, parents, requires_grad, backward))
    }

    fn push(
        &self,
        op: &'static str,
        value: Tensor,
        parents: Vec<usize>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value: Rc::new(value),
            parents,
            requires_grad,
            backward,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        let loss_value = &nodes[loss.id].value;
        if loss_value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::from_raw(loss_value.shape().to_vec(), vec![1.0]));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<Rc<Tensor>> = node
                .parents
                .iter()
                .map(|&p| Rc::clone(&nodes[p].value))
                .collect();
            let parent_grads = backward(&g, &inputs, &node.value);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "op {}", node.op);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "grad of {}", node.op);
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf, if the loss depends on it.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zero when unreachable from the loss.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn op_name(&self) -> &'static str {
        self.tape.nodes.borrow()[self.id].op
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.0));
        let loss = x.sum_all().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x), Tensor::ones(&[2, 3]));
    }

    #[test]
    fn square_sum_gives_two_x() {
        let tape = Tape::new();
        let xv = Tensor::from_fn(&[4], |i| 0.5 * i as f64 - 1.0);
        let x = tape.leaf(xv.clone());
        let loss = x.mul(x).unwrap().sum_all().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x), xv.map(|v| 2.0 * v));
    }

    #[test]
    fn unused_leaf_gets_exact_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[3]));
        let unused = tape.leaf(Tensor::ones(&[2, 2]));
        let loss = x.sum_all().unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn backward_on_non_scalar_is_contract_error() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[3]));
        let y = x.mul_scalar(2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_block_gradients() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        let c = tape.constant(Tensor::full(&[2], 3.0));
        let y = x.mul(c).unwrap();
        assert!(y.requires_grad());
        let z = c.mul_scalar(2.0).unwrap();
        assert!(!z.requires_grad());
        let g = tape.backward(y.sum_all().unwrap()).unwrap();
        assert_eq!(g.wrt(x), Tensor::full(&[2], 3.0));
        assert!(g.get(c).is_none());
    }

    #[test]
    fn stop_gradient_is_reported() {
        let tape = Tape::new();
        let _ = tape.stop_gradient("sign_gate", Tensor::ones(&[1]));
        let _ = tape.stop_gradient("sign_gate", Tensor::ones(&[1]));
        assert_eq!(tape.excluded_ops(), vec!["sign_gate"]);
    }
}
