//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Node ids are
//! handed out in creation order, so parents always precede children and the
//! reverse of creation order is a valid backward schedule. [`Graph::backward`]
//! consumes the tape.

mod check;
mod ops;

pub use check::{grad_check, grad_check_report, max_rel_error, GradReport};
pub(crate) use ops::channel_sums;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs available to a backward rule.
pub struct BackwardCtx<'a, T> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    /// `needs[i]` is false when parent `i` does not require a gradient; the rule may skip it.
    pub needs: Vec<bool>,
}

/// The local derivative rule of one recorded operation.
pub trait Backward<T: Element> {
    /// Returns one gradient per parent, `None` where `needs` was false.
    fn backward(&self, ctx: BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>>;
}

struct Node<T: Element> {
    value: Tensor<T>,
    parents: Vec<NodeId>,
    rule: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// A constant leaf (no gradient).
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, true)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            rule: None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records the result of an operation. The backward rule is dropped when
    /// no parent requires a gradient.
    pub fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        parents: &[NodeId],
        rule: impl Backward<T> + 'static,
    ) -> Result<NodeId> {
        if cfg!(debug_assertions)
            && !value.all_finite()
            && parents.iter().all(|p| self.value(*p).all_finite())
        {
            return Err(Error::contract(format!(
                "{name} produced a non-finite value from finite inputs"
            )));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.to_vec(),
            rule: requires_grad.then(|| Box::new(rule) as Box<dyn Backward<T>>),
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Back-propagates from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: NodeId) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()).reshape(self.value(loss).shape())?);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(rule) = &node.rule else { continue };
            let Some(grad) = grads[i].as_ref() else { continue };
            let ctx = BackwardCtx {
                grad,
                inputs: node.parents.iter().map(|p| self.value(*p)).collect(),
                output: &node.value,
                needs: node
                    .parents
                    .iter()
                    .map(|p| self.nodes[p.0].requires_grad)
                    .collect(),
            };
            let parent_grads = rule.backward(ctx)?;
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.value(*p).shape());
                match &mut grads[p.0] {
                    Some(acc) => accumulate(acc, &g),
                    slot @ None => *slot = Some(g),
                }
            }
            // interior gradients are no longer needed
            if !node.parents.is_empty() {
                grads[i] = None;
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate<T: Element>(acc: &mut Tensor<T>, g: &Tensor<T>) {
    let data = std::mem::replace(acc, Tensor::scalar(T::zero())).into_data();
    let summed = data
        .into_iter()
        .zip(g.data())
        .map(|(a, &b)| a + b)
        .collect();
    *acc = Tensor::from_parts(g.shape().to_vec(), summed);
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss with respect to leaf `id`; zeros when the leaf
    /// does not lie on any path to the loss.
    pub fn wrt(&self, id: NodeId) -> Tensor<T> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::from_parts(
                self.shapes[id.0].clone(),
                vec![T::zero(); self.shapes[id.0].iter().product()],
            ),
        }
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, id: NodeId) -> Tensor<T> {
        match self.grads[id.0].take() {
            Some(g) => g,
            None => Tensor::from_parts(
                self.shapes[id.0].clone(),
                vec![T::zero(); self.shapes[id.0].iter().product()],
            ),
        }
    }
}
