//! Operation tape and reverse-mode gradient propagation.
//!
//! Every differentiable op appends one node holding its output value, the ids
//! of its inputs, and a closure producing input gradients from the output
//! gradient. Node ids are assigned in execution order, so a node's inputs
//! always have smaller ids and a single reverse sweep is a valid topological
//! traversal.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Arguments handed to a backward closure.
pub struct BackwardArgs<'a, T> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Tensor<T>,
    pub out: &'a Tensor<T>,
    pub inputs: &'a [Rc<Tensor<T>>],
    /// Which inputs need a gradient; closures may skip the others.
    pub needs: &'a [bool],
}

pub type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T> {
    op: &'static str,
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

/// Ordered record of executed ops. Confined to one thread.
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    generation: Cell<u64>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Scalar = f32> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
    generation: u64,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            generation: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf: receives a gradient on [`Tape::backward`].
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, false)
    }

    fn push_leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: "leaf",
            value: Rc::new(value),
            requires_grad,
            parents: Vec::new(),
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
            generation: self.generation.get(),
        }
    }

    /// Appends an op node. The output must be finite.
    pub fn record(
        &self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        backward: BackwardFn<T>,
    ) -> Result<Var<'_, T>> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let mut nodes = self.nodes.borrow_mut();
        let mut requires_grad = false;
        for p in parents {
            if p.generation != self.generation.get() || !std::ptr::eq(p.tape, self) {
                return Err(TensorError::StaleVar);
            }
            requires_grad |= nodes[p.id].requires_grad;
        }
        nodes.push(Node {
            op,
            value: Rc::new(value),
            requires_grad,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then_some(backward),
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
            generation: self.generation.get(),
        })
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Drops every recorded node; outstanding vars become stale.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
        self.generation.set(self.generation.get() + 1);
    }

    /// Propagates `d loss / d node` back to every leaf that requires a
    /// gradient, then clears the tape.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if loss.generation != self.generation.get() {
            return Err(TensorError::StaleVar);
        }
        let generation = self.generation.get();
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        self.clear();

        let loss_node = &nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(loss_node.value.shape().to_vec(), T::ONE));

        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = &node.backward else {
                leaf_grads[id] = Some(grad);
                continue;
            };
            let inputs: Vec<Rc<Tensor<T>>> = node
                .parents
                .iter()
                .map(|&p| Rc::clone(&nodes[p].value))
                .collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&BackwardArgs {
                grad: &grad,
                out: &node.value,
                inputs: &inputs,
                needs: &needs,
            })?;
            for ((&p, g), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                if g.shape() != nodes[p].value.shape() {
                    return Err(TensorError::Shape {
                        op: node.op,
                        detail: format!(
                            "backward produced {:?} for input of shape {:?}",
                            g.shape(),
                            nodes[p].value.shape()
                        ),
                    });
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients {
            grads: leaf_grads,
            generation,
        })
    }
}

/// Leaf gradients produced by one backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    generation: u64,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf var; `None` when the loss does not depend on it.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        if var.generation != self.generation {
            return None;
        }
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Removes and returns the gradient for `var`, or zeros of its shape.
    pub fn take_or_zeros(&mut self, var: Var<'_, T>, shape: &[usize]) -> Tensor<T> {
        if var.generation == self.generation {
            if let Some(g) = self.grads.get_mut(var.id).and_then(|g| g.take()) {
                return g;
            }
        }
        Tensor::zeros(shape.to_vec())
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Recorded value.
    ///
    /// # Panics
    /// If the tape has been cleared since this var was created.
    pub fn value(&self) -> Rc<Tensor<T>> {
        assert!(self.is_live(), "use of a var from a cleared tape");
        self.tape.value_of(self.id)
    }

    /// False once the owning tape has been cleared (e.g. by `backward`).
    pub fn is_live(&self) -> bool {
        self.generation == self.tape.generation.get()
    }

    pub fn shape(&self) -> Vec<usize> {
        assert!(self.is_live(), "use of a var from a cleared tape");
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        assert!(self.is_live(), "use of a var from a cleared tape");
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub(crate) fn record(
        &self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[Var<'t, T>],
        backward: BackwardFn<T>,
    ) -> Result<Var<'t, T>> {
        self.tape.record(op, value, parents, backward)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones([2]));
        let y = x.scale(2.0).unwrap();
        assert!(matches!(
            tape.backward(y),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn backward_clears_tape_and_invalidates_vars() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones([3]));
        let loss = x.sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(tape.is_empty());
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(!x.is_live());
        let other = Tape::<f64>::new();
        let y = other.leaf(Tensor::ones([3]));
        let z = tape.leaf(Tensor::ones([3]));
        assert!(matches!(z.add(y), Err(TensorError::StaleVar)));
    }

    #[test]
    fn reused_input_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64([2], &[1.5, -2.0]).unwrap());
        let loss = x.mul(x).unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, -4.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones([2]));
        let c = tape.constant(Tensor::full([2], 3.0));
        let loss = x.mul(c).unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros([1]));
        assert!(matches!(x.ln(), Err(TensorError::NonFinite { .. })));
    }
}
