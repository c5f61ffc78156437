//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass together with a
//! backward rule. [`Tape::backward`] walks the records in reverse order once,
//! accumulating gradients additively into every node that feeds the loss.
//! Straight-through estimators are ordinary records whose backward rule is a
//! surrogate rather than the true derivative; see [`Tape::custom`].

mod conv;
mod gradcheck;
pub(crate) mod ops;

pub use conv::{conv2d_real, max_pool2d, ConvGeometry};
pub use gradcheck::finite_diff_grad;
pub use ops::BnStats;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a trainable tensor in a [`crate::params::ParamStore`].
pub type ParamId = usize;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Everything a backward rule sees.
pub struct BackwardArgs<'a> {
    pub inputs: &'a [&'a Tensor],
    pub output: &'a Tensor,
    pub grad: &'a Tensor,
    /// Whether each input wants a gradient; rules may return `None` otherwise.
    pub needs: &'a [bool],
}

pub type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    param: Option<ParamId>,
    requires_grad: bool,
    custom: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    /// A differentiable input leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(value, Vec::new(), None, None, true, false)
    }

    /// A leaf that never receives a gradient (data, fixed constants).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Vec::new(), None, None, false, false)
    }

    /// A leaf bound to a trainable parameter.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        self.push_node(value, Vec::new(), None, Some(id), true, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an operation with its true derivative.
    pub fn record(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let parents = parents.iter().map(|p| p.0).collect();
        self.push_node(value, parents, Some(backward), None, rg, false)
    }

    /// Records an operation whose backward rule replaces the true derivative
    /// (a straight-through estimator hook).
    pub fn custom(&mut self, value: Tensor, parents: &[Var], hook: BackwardFn) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let parents = parents.iter().map(|p| p.0).collect();
        self.push_node(value, parents, Some(hook), None, rg, true)
    }

    /// Whether the node was recorded through [`Tape::custom`].
    pub fn is_custom(&self, v: Var) -> bool {
        self.nodes[v.0].custom
    }

    fn push_node(
        &mut self,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        param: Option<ParamId>,
        requires_grad: bool,
        custom: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward,
            param,
            requires_grad,
            custom,
        });
        Var(self.nodes.len() - 1)
    }

    /// Accumulates d(loss)/d(node) for every node that the loss depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "loss must be a scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(rule) = &node.backward {
                let inputs: Vec<&Tensor> =
                    node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let needs: Vec<bool> = node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].requires_grad)
                    .collect();
                let parent_grads = rule(&BackwardArgs {
                    inputs: &inputs,
                    output: &node.value,
                    grad: &g,
                    needs: &needs,
                });
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !self.nodes[p].requires_grad {
                        continue;
                    }
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg)?,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter leaf, summed per parameter id and
    /// ordered by id.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = Vec::new();
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            let (Some(id), Some(g)) = (node.param, g) else {
                continue;
            };
            match out.iter_mut().find(|(pid, _)| *pid == id) {
                Some((_, acc)) => {
                    acc.add_assign(g).expect("parameter leaves share a shape");
                }
                None => out.push((id, g.clone())),
            }
        }
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
