use std::hash::{Hash, Hasher};

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded primitive.
///
/// `backward` receives the input values, the forward output and the
/// gradient flowing into the output, and returns one slot per input.
/// Slots whose `needs` flag is false may be `None`.
pub trait Function {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>>;
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    inputs: Vec<Var>,
    func: Option<Box<dyn Function>>,
}

/// Ordered record of primitive operations.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and a single reverse sweep visits each node once.
pub struct Tape {
    nodes: Vec<Node>,
    branches: std::collections::hash_map::DefaultHasher,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            branches: std::collections::hash_map::DefaultHasher::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Node {
            value,
            requires_grad,
            inputs: Vec::new(),
            func: None,
        })
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = self.nodes[var.0].value.clone();
        self.constant(value)
    }

    /// Records `value` as the output of `func` applied to `inputs`.
    ///
    /// When no input requires a gradient the result is stored as a constant
    /// and `func` is dropped.
    pub fn record<F: Function + 'static>(&mut self, inputs: &[Var], value: Tensor, func: F) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if !requires_grad {
            return self.constant(value);
        }
        self.push(Node {
            value,
            requires_grad,
            inputs: inputs.to_vec(),
            func: Some(Box::new(func)),
        })
    }

    /// Folds the branch decisions of a piecewise primitive (e.g. which relu
    /// inputs are active) into the tape's branch signature.
    pub fn note_branches(&mut self, active: impl Iterator<Item = bool>) {
        for a in active {
            a.hash(&mut self.branches);
        }
    }

    /// Fingerprint of every piecewise branch taken so far. Two evaluations of
    /// the same graph with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        self.branches.finish()
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_node = &self.nodes[root.0];
        if root_node.value.len() != 1 {
            return Err(Error::NonScalarRoot(root_node.value.shape().to_vec()));
        }
        if !root_node.requires_grad {
            return Err(Error::DetachedRoot);
        }

        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Tensor::full(root_node.value.shape().to_vec(), 1.0));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            let Some(func) = node.func.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads = func.backward(&inputs, &node.value, &grad, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", func.name());
            for ((input, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[input.0].value.shape(), "{}", func.name());
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        // Only leaves keep their gradients; intermediates were consumed above.
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}
