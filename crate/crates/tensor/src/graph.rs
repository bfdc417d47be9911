//! The tape: an append-only record of primitive applications.
//!
//! Nodes are stored in creation order, which is already a topological
//! order of the computation DAG, so the backward pass is a single
//! reverse sweep that visits every node exactly once and accumulates
//! gradients additively across fan-out.

use crate::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

impl Var {
    /// Position on the tape; equal indices mean the same node.
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient function: given d(loss)/d(output), the saved parent values
/// and the saved output value, produce d(loss)/d(parent) for each parent.
pub(crate) type GradFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

pub(crate) struct Node {
    pub value: Tensor,
    pub parents: Vec<Var>,
    pub grad_fn: Option<GradFn>,
    pub requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(value, Vec::new(), None, true)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Vec::new(), None, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push_node(
        &mut self,
        value: Tensor,
        parents: Vec<Var>,
        grad_fn: Option<GradFn>,
        requires_grad: bool,
    ) -> Var {
        debug_assert!(
            value.is_finite(),
            "non-finite value produced at node {}",
            self.nodes.len()
        );
        self.nodes.push(Node { value, parents, grad_fn, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push_op(
        &mut self,
        value: Tensor,
        parents: Vec<Var>,
        grad_fn: GradFn,
    ) -> Var {
        let requires = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let grad_fn = if requires { Some(grad_fn) } else { None };
        self.push_node(value, parents, grad_fn, requires)
    }

    /// Reverse sweep from a scalar loss. Gradients for nodes unreachable
    /// from the loss are absent; [`Grads::wrt`] reports them as zeros.
    pub fn backward(&self, loss: Var) -> Grads {
        assert!(
            self.value(loss).is_scalar(),
            "backward requires a scalar loss, got shape {:?}",
            self.value(loss).shape()
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            if let Some(grad_fn) = &node.grad_fn {
                let parent_vals: Vec<&Tensor> =
                    node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                let parent_grads = grad_fn(&gout, &parent_vals, &node.value);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (p, g) in node.parents.iter().zip(parent_grads) {
                    if !self.nodes[p.0].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(
                        g.shape(),
                        self.nodes[p.0].value.shape(),
                        "gradient shape mismatch for parent {}",
                        p.0
                    );
                    match &mut grads[p.0] {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        }
                        slot => *slot = Some(g),
                    }
                }
            }
            grads[i] = Some(gout);
        }
        Grads { by_node: grads }
    }
}

pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node[v.0].as_ref()
    }

    /// Gradient w.r.t. each listed node; zero tensors for nodes off the path.
    pub fn wrt(&self, g: &Graph, vars: &[Var]) -> Vec<Tensor> {
        vars.iter()
            .map(|&v| match &self.by_node[v.0] {
                Some(t) => t.clone(),
                None => Tensor::zeros(g.value(v).shape()),
            })
            .collect()
    }
}
