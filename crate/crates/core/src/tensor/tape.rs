use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

/// Backward rule of a recorded op.
///
/// Receives the op inputs, its output and the incoming gradient, and returns
/// one gradient per input (`None` where `needs[i]` is false).
pub(crate) trait Backward {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>>;
}

struct Node {
    value: Rc<Tensor>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    parents: Vec<usize>,
    op: Option<Box<dyn Backward>>,
}

/// Records a computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and [`Tape::backward`] simply walks it in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
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

    /// A constant input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// A differentiable input whose gradient is accumulated by `backward`.
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            grad: None,
            requires_grad,
            parents: Vec::new(),
            op: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(
        &self,
        value: Tensor,
        parents: &[Var<'_>],
        op: Box<dyn Backward>,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        if cfg!(debug_assertions) {
            let inputs_finite = parents.iter().all(|p| nodes[p.id].value.all_finite());
            debug_assert!(
                !inputs_finite || value.all_finite(),
                "non-finite output from finite inputs"
            );
        }
        nodes.push(Node {
            value: Rc::new(value),
            grad: None,
            requires_grad,
            parents: parents.iter().map(|p| p.id).collect(),
            op: requires_grad.then_some(op),
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var<'_>) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.id].value)
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Accumulates d(loss)/d(node) into every reachable node that requires a
    /// gradient. Calling it twice without [`Tape::zero_grad`] adds up.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let finished = {
            let nodes = self.nodes.borrow();
            let root = &nodes[loss.id];
            if root.value.numel() != 1 {
                return Err(Error::Usage(format!(
                    "backward needs a scalar loss, got shape {:?}",
                    root.value.shape()
                )));
            }
            let mut pending: Vec<Option<Vec<f32>>> = vec![None; loss.id + 1];
            if root.requires_grad {
                pending[loss.id] = Some(vec![1.0]);
            }
            let mut finished = Vec::new();
            for id in (0..=loss.id).rev() {
                let Some(grad) = pending[id].take() else {
                    continue;
                };
                let node = &nodes[id];
                if let Some(op) = &node.op {
                    let inputs: Vec<&Tensor> =
                        node.parents.iter().map(|&p| &*nodes[p].value).collect();
                    let needs: Vec<bool> =
                        node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
                    let grads = op.backward(&inputs, &node.value, &grad, &needs);
                    for (&p, g) in node.parents.iter().zip(grads) {
                        let Some(g) = g else { continue };
                        match &mut pending[p] {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            slot => *slot = Some(g),
                        }
                    }
                }
                finished.push((id, grad));
            }
            finished
        };
        let mut nodes = self.nodes.borrow_mut();
        for (id, grad) in finished {
            match &mut nodes[id].grad {
                Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += b),
                slot => *slot = Some(grad),
            }
        }
        Ok(())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(*self)
    }
}
