//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Nodes are
//! appended in evaluation order, so walking the tape backwards visits each
//! node only after all of its consumers. The tape is meant to be rebuilt for
//! every training step.

mod check;
mod ops;

use alloc::{format, vec, vec::Vec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use check::{gradcheck, GradCheck};
pub use ops::Activation;
use ops::Op;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Clears every accumulated gradient.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Propagates d(root)/d(node) to every node that requires a gradient.
    /// Gradients accumulate, so calling this twice without [`zero_grad`]
    /// sums the two passes.
    ///
    /// [`zero_grad`]: Tape::zero_grad
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let value = &self.nodes[root.0].value;
        if !value.is_scalar() {
            return Err(Error::contract(
                "backward",
                format!("root must be scalar, got shape {:?}", value.shape()),
            ));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        accumulate(&mut self.nodes[root.0], &[1.0]);
        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = node.grad.take() else { continue };
            ops::backward(&node.op, &node.value, &g, before);
            node.grad = Some(g);
        }
        Ok(())
    }
}

fn accumulate(node: &mut Node, contribution: &[f64]) {
    match &mut node.grad {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contribution) {
                *a += b;
            }
        }
        None => node.grad = Some(contribution.to_vec()),
    }
}

/// Runs `f` with the (zero-initialised if absent) gradient buffer of `v`
/// detached from the node list, so `f` can read any node's value while
/// writing the gradient.
fn with_grad(nodes: &mut [Node], v: Var, f: impl FnOnce(&[Node], &mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let mut g = nodes[v.0]
        .grad
        .take()
        .unwrap_or_else(|| vec![0.0; nodes[v.0].value.len()]);
    f(nodes, &mut g);
    nodes[v.0].grad = Some(g);
}

fn leading_dims(shape: &[usize]) -> Vec<usize> {
    shape[..shape.len().saturating_sub(1)].to_vec()
}
