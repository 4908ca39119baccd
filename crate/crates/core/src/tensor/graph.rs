// SPDX-License-Identifier: Apache-2.0

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Local derivative of one recorded operation.
///
/// Given the gradient flowing into the op's output, returns one gradient per
/// input (in input order). `None` means "no contribution".
pub trait Backward {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], output: &Tensor)
        -> Vec<Option<Tensor>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    backward: Option<Box<dyn Backward>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Tape of one forward pass.
///
/// Nodes are appended in execution order, so a reverse scan of the tape is a
/// valid reverse topological order. A graph is single-threaded; independent
/// graphs can live on different threads.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_node(value, Vec::new(), None, false, None)
    }

    /// Differentiable leaf not tied to a parameter store.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(value, Vec::new(), None, true, None)
    }

    /// Brings a parameter into the graph. Gradients flow back to the store via
    /// [`Graph::accumulate_into`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.value(id).clone();
        let trainable = store.is_trainable(id);
        self.push_node(value, Vec::new(), None, trainable, Some(id))
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

    /// Gradient accumulated by previous [`Graph::backward`] calls.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Records an operation result. `backward` is skipped entirely when no
    /// input requires a gradient.
    pub fn push(&mut self, value: Tensor, inputs: &[Var], backward: Box<dyn Backward>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let bw = if requires_grad { Some(backward) } else { None };
        self.push_node(value, inputs.to_vec(), bw, requires_grad, None)
    }

    fn push_node(
        &mut self,
        value: Tensor,
        inputs: Vec<Var>,
        backward: Option<Box<dyn Backward>>,
        requires_grad: bool,
        param: Option<ParamId>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            inputs,
            backward,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode sweep from a scalar `loss`. Repeated calls add into the
    /// stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut local: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = local[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(bw) = &node.backward {
                let inputs: Vec<&Tensor> =
                    node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let in_grads = bw.backward(&g, &inputs, &node.value);
                debug_assert_eq!(in_grads.len(), node.inputs.len());
                for (input, ig) in node.inputs.iter().zip(in_grads) {
                    let Some(ig) = ig else { continue };
                    if !self.nodes[input.0].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(ig.shape(), self.nodes[input.0].value.shape());
                    match &mut local[input.0] {
                        Some(acc) => acc.add_assign(&ig),
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
            // Leaves keep their gradient; interior nodes keep it too so
            // callers can inspect intermediate sensitivities.
            if self.grads.len() < self.nodes.len() {
                self.grads.resize(self.nodes.len(), None);
            }
            match &mut self.grads[id] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Adds the gradients of every parameter leaf into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Some(id), Some(g)) = (node.param, grad) {
                if node.requires_grad {
                    store.grad_mut(id).add_assign(g);
                }
            }
        }
    }

    /// Parameter ids that appear in this graph, in first-use order.
    pub fn params_used(&self) -> Vec<ParamId> {
        let mut seen = Vec::new();
        for node in &self.nodes {
            if let Some(id) = node.param {
                if !seen.contains(&id) {
                    seen.push(id);
                }
            }
        }
        seen
    }
}
