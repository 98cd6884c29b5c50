//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! replays the records in reverse and accumulates gradients into every leaf
//! created with [`Tape::param`]. Tensors are handles into the tape; the tape
//! owns all storage and is dropped after the backward pass.

mod ops;

use std::rc::Rc;

use crate::error::{Error, Result};

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    id: usize,
}

/// Computes gradients of each parent given the gradient of the output.
type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

struct Node {
    data: Rc<Vec<f64>>,
    shape: Vec<usize>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    /// True if this node is a grad leaf or depends on one.
    flows: bool,
}

/// Records one forward pass. Create, run ops, call [`Tape::backward`] once,
/// read gradients, drop.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, node: Node) -> Tensor {
        let id = self.nodes.len();
        self.nodes.push(node);
        self.grads.push(None);
        Tensor { id }
    }

    /// Non-differentiable input tensor.
    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        self.make_leaf(data, shape, false)
    }

    /// Differentiable leaf: [`Tape::backward`] populates its gradient.
    pub fn param(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        self.make_leaf(data, shape, true)
    }

    fn make_leaf(&mut self, data: Vec<f64>, shape: &[usize], flows: bool) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::Shape(format!(
                "leaf data has {} elements but shape {:?} implies {}",
                data.len(),
                shape,
                numel(shape)
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite leaf value {bad}")));
        }
        Ok(self.push(Node {
            data: Rc::new(data),
            shape: shape.to_vec(),
            parents: Vec::new(),
            backward: None,
            flows,
        }))
    }

    pub fn data(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.id].data
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.id].shape
    }

    pub fn numel(&self, t: Tensor) -> usize {
        self.nodes[t.id].data.len()
    }

    /// Value of a single-element tensor.
    pub fn value(&self, t: Tensor) -> f64 {
        debug_assert_eq!(self.numel(t), 1);
        self.nodes[t.id].data[0]
    }

    /// Gradient populated by [`Tape::backward`]; `None` if no gradient
    /// flowed to this tensor (or backward has not run).
    pub fn grad(&self, t: Tensor) -> Option<&[f64]> {
        self.grads[t.id].as_deref()
    }

    fn rc_data(&self, t: Tensor) -> Rc<Vec<f64>> {
        Rc::clone(&self.nodes[t.id].data)
    }

    fn flows(&self, t: Tensor) -> bool {
        self.nodes[t.id].flows
    }

    /// Reverse sweep from a scalar loss. Populates gradients for every
    /// tensor on a path from a `param` leaf to `loss`. Errors on a
    /// non-scalar loss or a second call on the same tape.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.backward_done {
            return Err(Error::Validation(
                "backward called twice on the same tape".into(),
            ));
        }
        if self.numel(loss) != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(d_out) = self.grads[id].take() else {
                continue;
            };
            if let Some(backward) = &self.nodes[id].backward {
                let parent_grads = backward(&d_out);
                debug_assert_eq!(parent_grads.len(), self.nodes[id].parents.len());
                let parents = self.nodes[id].parents.clone();
                for (pid, g) in parents.into_iter().zip(parent_grads) {
                    if !self.nodes[pid].flows {
                        continue;
                    }
                    debug_assert_eq!(g.len(), self.nodes[pid].data.len());
                    match &mut self.grads[pid] {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&g) {
                                *a += b;
                            }
                        }
                        None => self.grads[pid] = Some(g),
                    }
                }
            }
            // Leaves keep their gradient; interior grads were consumed by take().
            if self.nodes[id].backward.is_none() && self.nodes[id].flows {
                self.grads[id] = Some(d_out);
            }
        }
        Ok(())
    }
}
