//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Leaves are
//! constants, differentiable inputs, or parameters pulled from a
//! [`ParamStore`]. After [`Graph::backward`], input gradients are readable
//! through [`Graph::grad`] and parameter gradients are added into the store
//! with [`Graph::accumulate_param_grads`].

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Backward rule of a recorded operation.
///
/// Receives the parent values, the forward output and the gradient flowing
/// into the output, and returns one gradient per parent. Entries may be
/// `None` where `needs[i]` is false.
pub trait Backward<T: Scalar> {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    parents: Vec<Var>,
    op: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<T>>>,
    training: bool,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// Evaluation-mode graph (dropout disabled).
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: Vec::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Training-mode graph; `seed` drives dropout masks.
    pub fn training(seed: u64) -> Self {
        Self {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub(crate) fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            op: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same var.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone(), true);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an operation. The rule is dropped when no parent needs gradients.
    pub fn push(&mut self, value: Tensor<T>, parents: Vec<Var>, op: Box<dyn Backward<T>>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents,
            op: if requires_grad { Some(op) } else { None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape("backward", "single-element loss", format!("{:?}", self.shape(loss))));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(grad) = self.grads[i].take() else { continue };
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let parent_grads = op.backward(&inputs, &node.value, &grad, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((p, g), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(g), true) = (g, *need) else { continue };
                debug_assert_eq!(g.len(), self.nodes[p.0].value.len());
                match &mut self.grads[p.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(g),
                }
            }
            self.grads[i] = Some(grad);
        }
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients of the last backward pass into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for (&id, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                let p = store.get_mut(id);
                p.grad.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += *b);
            }
        }
    }
}
