//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so `backward` is a single reverse sweep over the tape.

mod gradcheck;
mod nn;
mod ops;

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub use gradcheck::{gradcheck, gradcheck_sampled, gradcheck_with_step, GradcheckReport, GRADCHECK_STEP};
pub use nn::BatchStats;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward closure sees: the saved inputs, the forward output and the
/// upstream gradient of the output.
pub struct BackwardCtx<'a, E> {
    pub inputs: Vec<&'a Tensor<E>>,
    pub output: &'a Tensor<E>,
    pub grad: &'a [E],
    pub needs: Vec<bool>,
}

type BackwardFn<E> = Box<dyn Fn(&BackwardCtx<'_, E>) -> Vec<Option<Vec<E>>>>;

struct Node<E> {
    op: &'static str,
    value: Tensor<E>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<E>>,
}

pub struct Graph<E: Element = f32> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
    differentiated: bool,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> fmt::Debug for Graph<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("differentiated", &self.differentiated)
            .finish()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            differentiated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: "leaf",
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    /// Copies `v`'s value into a new constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<E>> {
        let g = self.grads[v.0].as_ref()?;
        Tensor::new(self.shape(v).to_vec(), g.clone()).ok()
    }

    /// Records an operation. The backward closure is dropped when no parent
    /// requires a gradient.
    pub(crate) fn push(
        &mut self,
        op: &'static str,
        value: Tensor<E>,
        parents: &[Var],
        backward: BackwardFn<E>,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.differentiated {
            return Err(Error::Graph(
                "backward called twice on the same graph; run a new forward".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.differentiated = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![E::one()]);
        for i in (0..=loss.0).rev() {
            let Some(backward) = self.nodes[i].backward.as_ref() else {
                continue;
            };
            let Some(grad) = self.grads[i].as_ref() else {
                continue;
            };
            let node = &self.nodes[i];
            let ctx = BackwardCtx {
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                output: &node.value,
                grad,
                needs: node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].requires_grad)
                    .collect(),
            };
            let input_grads = backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.parents.len(), "{}", node.op);
            let parents = node.parents.clone();
            for (p, g) in parents.into_iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), self.nodes[p].value.numel());
                match &mut self.grads[p] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}
