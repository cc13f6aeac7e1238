//! N-dimensional tensors with reverse-mode automatic differentiation.
//!
//! A `Tensor` is an immutable handle: data buffers are never mutated after
//! construction. Differentiable operations record an [`Op`] linking back to
//! their inputs; [`Tensor::backward`] walks the recorded graph in reverse
//! topological order and deposits gradients into the grad slot of every leaf.

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::ops::Op;
use crate::rng::Rng;
use crate::scalar::Scalar;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub(crate) struct Inner<T: Scalar> {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Rc<Vec<T>>,
    pub(crate) grad: RefCell<Option<Vec<T>>>,
    pub(crate) op: Option<Op<T>>,
}

pub struct Tensor<T: Scalar>(pub(crate) Rc<Inner<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .finish()
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::contract("tensor shape must be nonempty"));
    }
    if shape.contains(&0) {
        return Err(Error::contract(format!(
            "tensor shape {shape:?} has a zero extent"
        )));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::contract(format!(
            "shape {shape:?} implies {n} elements but buffer holds {len}"
        )));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(Inner {
            id: next_id(),
            shape,
            data: Rc::new(data),
            grad: RefCell::new(None),
            op: Some(op),
        }))
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Tensor(Rc::new(Inner {
            id: next_id(),
            shape,
            data: Rc::new(data),
            grad: RefCell::new(None),
            op: None,
        })))
    }

    /// Leaf tensor sharing an existing buffer (zero-copy; used for parameters).
    pub fn from_shared(shape: Vec<usize>, data: Rc<Vec<T>>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Tensor(Rc::new(Inner {
            id: next_id(),
            shape,
            data,
            grad: RefCell::new(None),
            op: None,
        })))
    }

    pub fn scalar(v: T) -> Self {
        Tensor::from_vec(vec![1], vec![v]).unwrap()
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![T::zero(); n])
    }

    pub fn full(shape: Vec<usize>, v: T) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![v; n])
    }

    /// I.i.d. standard-normal samples from the seeded stream.
    pub fn randn(shape: Vec<usize>, rng: &mut Rng) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::contract(format!(
                "randn requires a nonempty shape with positive extents, got {shape:?}"
            )));
        }
        let n = shape.iter().product();
        let mut data = vec![T::zero(); n];
        rng.fill_normal(&mut data);
        Tensor::from_vec(shape, data)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// Detached view: same buffer, no autograd history.
    pub fn detach(&self) -> Self {
        Tensor(Rc::new(Inner {
            id: next_id(),
            shape: self.0.shape.clone(),
            data: Rc::clone(&self.0.data),
            grad: RefCell::new(None),
            op: None,
        }))
    }

    /// Accumulated gradient of this leaf, if backward reached it.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    /// Moves the gradient out of the slot.
    pub fn take_grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow_mut().take()
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Reverse-mode gradient of a scalar loss. Populates the grad slot of
    /// every leaf reachable from `self`; each graph node is visited once.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }

        // Iterative post-order DFS for a reverse topological order.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((node, child)) = stack.pop() {
            let next = node
                .0
                .op
                .as_ref()
                .and_then(|op| op.inputs().get(child).map(|t| (*t).clone()));
            match next {
                Some(c) => {
                    stack.push((node, child + 1));
                    if visited.insert(c.id()) {
                        stack.push((c, 0));
                    }
                }
                None => order.push(node),
            }
        }

        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);

        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.0.op {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(existing) => {
                            for (e, v) in existing.iter_mut().zip(&g) {
                                *e = *e + *v;
                            }
                        }
                        None => *slot = Some(g),
                    }
                }
                Some(op) => {
                    for (input, gi) in op.backward(&node.0, &g) {
                        debug_assert_eq!(gi.len(), input.len());
                        match grads.entry(input.id()) {
                            std::collections::hash_map::Entry::Occupied(mut e) => {
                                for (a, b) in e.get_mut().iter_mut().zip(&gi) {
                                    *a = *a + *b;
                                }
                            }
                            std::collections::hash_map::Entry::Vacant(e) => {
                                e.insert(gi);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
