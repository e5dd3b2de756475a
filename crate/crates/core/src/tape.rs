//! Define-by-run gradient tape.
//!
//! Every differentiable operation appends a node holding its output value,
//! the handles of its inputs and a [`Backward`] rule. Nodes are only ever
//! appended, so inputs always precede their consumers and the reverse pass
//! is a single backwards sweep over the node list.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::Float;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
pub trait Backward {
    /// Given the gradient of the loss with respect to `output`, return one
    /// entry per input: the gradient with respect to that input, or `None`
    /// when `needs[i]` is false.
    fn backward(
        &self,
        out_grad: &[Float],
        inputs: &[&Tensor],
        output: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Vec<Float>>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    rule: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

/// Ordered record of the forward computation.
#[derive(Default)]
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

    /// Record a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            inputs: Vec::new(),
            rule: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a leaf that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    /// Record a copy of `t` as a gradient-tracked leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut copy = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        copy.set_requires_grad(true);
        self.leaf(copy)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on `v` by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[Float]> {
        self.nodes[v.0].value.grad()
    }

    /// Append the result of an operation. The rule is dropped when no
    /// input participates in differentiation.
    pub fn push(&mut self, inputs: &[Var], value: Tensor, rule: Box<dyn Backward>) -> Var {
        debug_assert!(
            value.is_finite(),
            "non-finite value produced by a forward operation"
        );
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.to_vec(),
            rule: if requires_grad { Some(rule) } else { None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar root. Every gradient-tracked node that
    /// the root depends on ends up with its gradient populated; gradients
    /// from several consumers add up. Previous gradients are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::contract("backward", "tape is empty"));
        }
        let root_value = &self.nodes[root.0].value;
        if root_value.numel() != 1 || root_value.rank() > 1 {
            return Err(Error::contract(
                "backward",
                alloc::format!("root must be a scalar, got shape {:?}", root_value.shape()),
            ));
        }
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }

        let mut grads: Vec<Option<Vec<Float>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Some(rule) = &node.rule {
                let inputs: Vec<&Tensor> =
                    node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let needs: Vec<bool> = node
                    .inputs
                    .iter()
                    .map(|v| self.nodes[v.0].requires_grad)
                    .collect();
                let input_grads = rule.backward(&g, &inputs, &node.value, &needs);
                debug_assert_eq!(input_grads.len(), node.inputs.len());
                for (v, ig) in node.inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    if !self.nodes[v.0].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(ig.len(), self.nodes[v.0].value.numel());
                    match &mut grads[v.0] {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += *b),
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
            self.nodes[idx].value.set_grad(g);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0).with_requires_grad());
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn reuse_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0).with_requires_grad());
        let y = tape.add(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]).with_requires_grad());
        assert!(matches!(tape.backward(x), Err(Error::Contract { .. })));
        assert!(matches!(Tape::new().backward(Var(0)), Err(Error::Contract { .. })));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0).with_requires_grad());
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.mul(x, c).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[5.0]);
        assert!(tape.grad(c).is_none());
    }
}
