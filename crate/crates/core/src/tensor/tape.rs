use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Backward rule of one node: receives the output gradient and a mask of which
/// parents need a gradient, returns one optional gradient per parent.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    tracked: bool,
}

/// Append-only record of the operations of one forward pass.
///
/// Parents always precede children, so reverse append order is a valid
/// topological order for the backward sweep.
pub struct Tape<T> {
    nodes: Rc<RefCell<Vec<Node<T>>>>,
}

impl<T> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Self {
            nodes: Rc::clone(&self.nodes),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Rc::new(RefCell::new(Vec::new())),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives gradients (a parameter or an input under test).
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        self.push_node(value, Vec::new(), None, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        self.push_node(value, Vec::new(), None, false)
    }

    fn push_node(
        &self,
        value: Tensor<T>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
        tracked: bool,
    ) -> Var<T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            parents,
            backward,
            tracked,
        });
        Var {
            tape: self.clone(),
            id,
            value: Rc::new(value),
            tracked,
        }
    }

    /// Records an operation. The backward closure is dropped when no parent is
    /// tracked.
    pub(crate) fn record(
        &self,
        value: Tensor<T>,
        parents: &[&Var<T>],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<T> {
        debug_assert!(parents.iter().all(|p| Rc::ptr_eq(&p.tape.nodes, &self.nodes)));
        let tracked = parents.iter().any(|p| p.tracked);
        if tracked {
            let ids = parents.iter().map(|p| p.id).collect();
            self.push_node(value, ids, Some(Box::new(backward)), true)
        } else {
            self.push_node(value, Vec::new(), None, false)
        }
    }

    fn backward_from(&self, root: usize, seed: Tensor<T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(seed);
        let mut leaves = HashMap::new();
        for id in (0..=root).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                if node.tracked {
                    leaves.insert(id, grad);
                }
                continue;
            };
            let mask: Vec<bool> = node.parents.iter().map(|&p| nodes[p].tracked).collect();
            let parent_grads = backward(&grad, &mask);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&pid, g), needed) in node.parents.iter().zip(parent_grads).zip(mask) {
                let Some(g) = g else { continue };
                if !needed {
                    continue;
                }
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Gradients { grads: leaves }
    }
}

/// A tensor value bound to a node of a [`Tape`].
pub struct Var<T> {
    tape: Tape<T>,
    id: usize,
    value: Rc<Tensor<T>>,
    tracked: bool,
}

impl<T> Clone for Var<T> {
    fn clone(&self) -> Self {
        Self {
            tape: self.tape.clone(),
            id: self.id,
            value: Rc::clone(&self.value),
            tracked: self.tracked,
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .field("tracked", &self.tracked)
            .finish()
    }
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub(crate) fn value_rc(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn is_tracked(&self) -> bool {
        self.tracked
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.value.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.tracked {
            return Err(Error::Detached);
        }
        let seed = Tensor::from_parts(self.shape().to_vec(), vec![T::one()]);
        Ok(self.tape.backward_from(self.id, seed))
    }
}

/// Gradients of the tracked leaves reached by a backward sweep.
pub struct Gradients<T> {
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf; `None` when the leaf does not influence the loss.
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        self.grads.get(&var.id)
    }

    /// Gradient of a leaf, or zeros when it does not influence the loss.
    pub fn get_or_zeros(&self, var: &Var<T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }

    pub fn take(&mut self, var: &Var<T>) -> Option<Tensor<T>> {
        self.grads.remove(&var.id)
    }
}
