//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Tensors form an immutable DAG: every op produces a new tensor holding its
//! forward values plus a closure that maps the upstream gradient to gradients
//! for each parent. `backward` walks the graph in reverse topological order
//! and accumulates gradients additively across fan-out.
//!
//! Values are stored as `f64` in row-major order (last axis fastest). The
//! only sanctioned mutation is parameter updates through the optimizer and
//! running-statistic updates inside batch norm, both via interior mutability
//! on leaf tensors.

mod adam;
mod conv;
mod loss;
mod norm;
mod ops;

pub use adam::{AdamConfig, AdamState};
pub use conv::{conv3d, conv_transpose3d, maxpool3d};
pub use loss::{bce_loss, dice_loss, l1_loss, mse_loss};
pub use norm::{batchnorm3d, instancenorm3d, NormMode};
pub use ops::{
    activation, add, concat_channels, mean, mul, scale, softplus, sub, sum, Activation,
};

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};

type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    shape: Vec<usize>,
    values: RefCell<Vec<f64>>,
    requires_grad: bool,
    /// True when this node or any ancestor requires gradients.
    tracked: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// N-dimensional array participating in reverse-mode autodiff.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

impl Tensor {
    /// Constant leaf tensor (no gradient tracking).
    pub fn from_vec(shape: &[usize], values: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "shape/value length mismatch"
        );
        Tensor {
            node: Rc::new(Node {
                shape: shape.to_vec(),
                values: RefCell::new(values),
                requires_grad: false,
                tracked: false,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Leaf tensor that accumulates gradients (a trainable parameter).
    pub fn param(shape: &[usize], values: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "shape/value length mismatch"
        );
        Tensor {
            node: Rc::new(Node {
                shape: shape.to_vec(),
                values: RefCell::new(values),
                requires_grad: true,
                tracked: true,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::from_vec(shape, vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![value])
    }

    /// Interior node produced by an op.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        values: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let tracked = parents.iter().any(|p| p.node.tracked);
        Tensor {
            node: Rc::new(Node {
                shape,
                values: RefCell::new(values),
                requires_grad: false,
                tracked,
                grad: RefCell::new(None),
                parents: if tracked { parents } else { Vec::new() },
                backward: if tracked { Some(backward) } else { None },
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn len(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> Ref<'_, Vec<f64>> {
        self.node.values.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.values.borrow().clone()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.node.values.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Overwrites leaf values in place. Optimizer/running-stats use only.
    pub fn set_values(&self, values: Vec<f64>) {
        assert_eq!(values.len(), self.len(), "set_values length mismatch");
        *self.node.values.borrow_mut() = values;
    }

    /// New constant leaf with a copy of this tensor's values.
    pub fn detach(&self) -> Tensor {
        Tensor::from_vec(&self.node.shape, self.to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.node.values.borrow().iter().all(|v| v.is_finite())
    }

    pub fn assert_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numerical(format!("non-finite values in {what}")))
        }
    }

    fn accumulate_grad(&self, delta: &[f64]) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Populates `grad` on every
    /// tracked tensor reachable from `self`.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::Dimension(format!(
                "backward requires a scalar, got shape {:?}",
                self.node.shape
            )));
        }
        if !self.node.tracked {
            return Ok(());
        }

        // Iterative post-order DFS; `Rc` graphs are acyclic by construction.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(Rc::as_ptr(&self.node));
        while let Some((t, child)) = stack.pop() {
            if child < t.node.parents.len() {
                stack.push((t.clone(), child + 1));
                let p = t.node.parents[child].clone();
                if p.node.tracked && visited.insert(Rc::as_ptr(&p.node)) {
                    stack.push((p, 0));
                }
            } else {
                order.push(t);
            }
        }

        self.accumulate_grad(&[1.0]);
        for t in order.iter().rev() {
            let Some(back) = t.node.backward.as_ref() else {
                continue;
            };
            let g = t.node.grad.borrow().clone().unwrap_or_else(|| vec![0.0; t.len()]);
            let parent_grads = back(&g);
            debug_assert_eq!(parent_grads.len(), t.node.parents.len());
            for (p, pg) in t.node.parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    if p.node.tracked {
                        debug_assert_eq!(pg.len(), p.len());
                        p.accumulate_grad(&pg);
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn check_same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_backward_is_ones() {
        let x = Tensor::param(&[4], vec![1.0, 2.0, 3.0, 4.0]);
        let loss = sum(&x);
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn square_sum_gradient() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]);
        let loss = sum(&mul(&x, &x).unwrap());
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn fanout_accumulates() {
        let x = Tensor::param(&[3], vec![0.5; 3]);
        let y = scale(&x, 1.0);
        let loss = add(&sum(&y), &sum(&y)).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]);
        assert!(x.backward().is_err());
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]);
        let d = x.detach();
        let loss = sum(&d);
        loss.backward().unwrap();
        assert!(x.grad().is_none());
    }
}
