//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation whose inputs are attached to it. Each
//! record keeps the indices of its parents and a closure mapping the output
//! gradient to one gradient per parent. Nodes are appended in evaluation
//! order, so the tape is topologically sorted by construction and
//! [`backward`] is a single reverse sweep.
//!
//! Values that are not attached to a tape (network inputs, frozen
//! parameters, everything at inference time) flow through the same
//! operations without recording anything.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Gradient rule of one recorded operation. `needs[i]` tells whether parent
/// `i` wants a gradient; the rule may return `None` for the others.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
    shape: Vec<usize>,
}

struct TapeInner<T> {
    nodes: Vec<Node<T>>,
}

/// Shared handle to a recording. Cloning the handle shares the recording.
pub struct Tape<T> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Self {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new() })),
        }
    }

    /// Registers a differentiable leaf (a trainable parameter).
    pub fn leaf(&self, value: Rc<Tensor<T>>) -> Var<T> {
        let id = self.push(Node {
            parents: Vec::new(),
            backward: None,
            shape: value.shape().to_vec(),
        });
        Var {
            value,
            node: Some((self.clone(), id)),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        inner.nodes.len() - 1
    }

    fn same(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// A value together with its (optional) position on a tape.
pub struct Var<T> {
    value: Rc<Tensor<T>>,
    node: Option<(Tape<T>, usize)>,
}

impl<T> Clone for Var<T> {
    fn clone(&self) -> Self {
        Self {
            value: Rc::clone(&self.value),
            node: self.node.clone(),
        }
    }
}

impl<T: Real> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("node", &self.id())
            .finish()
    }
}

impl<T: Real> Var<T> {
    /// Untracked value.
    pub fn constant(value: Tensor<T>) -> Self {
        Self {
            value: Rc::new(value),
            node: None,
        }
    }

    pub fn constant_rc(value: Rc<Tensor<T>>) -> Self {
        Self { value, node: None }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn value_rc(&self) -> &Rc<Tensor<T>> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn dims4(&self) -> Result<[usize; 4]> {
        self.value.dims4()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape(&self) -> Option<&Tape<T>> {
        self.node.as_ref().map(|(t, _)| t)
    }

    pub(crate) fn id(&self) -> Option<usize> {
        self.node.as_ref().map(|(_, i)| *i)
    }

    /// Detached copy sharing the same value.
    pub fn detach(&self) -> Self {
        Self::constant_rc(Rc::clone(&self.value))
    }

    /// Builds the result of an operation. Records it on the tape of the
    /// first tracked input, if any. Every operation in the crate funnels
    /// through here, which is also where non-finite results are rejected.
    pub(crate) fn from_op(
        op: &'static str,
        value: Tensor<T>,
        inputs: &[&Var<T>],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Result<Var<T>> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let tape = inputs.iter().find_map(|v| v.tape().cloned());
        let value = Rc::new(value);
        let Some(tape) = tape else {
            return Ok(Var { value, node: None });
        };
        let mut parents = Vec::with_capacity(inputs.len());
        for v in inputs {
            match &v.node {
                Some((t, id)) => {
                    if !t.same(&tape) {
                        return Err(Error::invalid(op, "inputs recorded on different tapes"));
                    }
                    parents.push(Some(*id));
                }
                None => parents.push(None),
            }
        }
        let id = tape.push(Node {
            parents,
            backward: Some(Box::new(backward)),
            shape: value.shape().to_vec(),
        });
        Ok(Var {
            value,
            node: Some((tape, id)),
        })
    }
}

/// Gradients produced by [`backward`], indexed by tape node.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    /// Gradient with respect to `v`. Leaves that the loss does not depend
    /// on get a zero tensor of their own shape.
    pub fn get(&self, v: &Var<T>) -> Option<Tensor<T>> {
        let id = v.id()?;
        match self.grads.get(id)? {
            Some(g) => Some(g.clone()),
            None => Some(Tensor::zeros(v.shape())),
        }
    }

    pub fn take(&mut self, v: &Var<T>) -> Option<Tensor<T>> {
        let id = v.id()?;
        let slot = self.grads.get_mut(id)?;
        Some(slot.take().unwrap_or_else(|| Tensor::zeros(v.shape())))
    }
}

/// Back-propagates from a scalar loss. The tape is consumed: all recorded
/// closures (and the activations they hold) are released.
pub fn backward<T: Real>(loss: &Var<T>) -> Result<Grads<T>> {
    if loss.value().len() != 1 {
        return Err(Error::shape(
            "backward",
            format!("loss must be scalar, shape is {:?}", loss.shape()),
        ));
    }
    let (tape, root) = loss
        .node
        .as_ref()
        .ok_or_else(|| Error::invalid("backward", "loss is not recorded on a tape"))?;
    let nodes = std::mem::take(&mut tape.inner.borrow_mut().nodes);
    let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();

    // nodes that lie on some path to the root
    let mut live = vec![false; nodes.len()];
    live[*root] = true;
    for i in (0..=*root).rev() {
        if live[i] {
            for p in nodes[i].parents.iter().flatten() {
                live[*p] = true;
            }
        }
    }

    grads[*root] = Some(Tensor::full(loss.shape(), T::one()));
    for i in (0..=*root).rev() {
        let Some(bw) = nodes[i].backward.as_ref() else {
            continue;
        };
        let Some(g) = grads[i].take() else {
            continue;
        };
        let needs: Vec<bool> = nodes[i]
            .parents
            .iter()
            .map(|p| p.is_some_and(|p| live[p]))
            .collect();
        if !needs.iter().any(|&n| n) {
            continue;
        }
        let parent_grads = bw(&g, &needs);
        for ((p, need), pg) in nodes[i].parents.iter().zip(&needs).zip(parent_grads) {
            let (Some(p), true, Some(pg)) = (p, *need, pg) else {
                continue;
            };
            debug_assert_eq!(pg.shape(), nodes[*p].shape.as_slice());
            match &mut grads[*p] {
                Some(acc) => acc.add_assign(&pg),
                slot @ None => *slot = Some(pg),
            }
        }
    }
    Ok(Grads { grads })
}
