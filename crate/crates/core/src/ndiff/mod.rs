//! Minimal reverse-mode automatic differentiation in `f64`.
//!
//! Parameters live in persistent [`Tensor`]s. Each training step builds a
//! fresh [`Graph`], binds the parameters as leaves, runs forward, calls
//! [`Graph::backward`] and copies leaf gradients back into the tensors
//! before an optimizer step.

mod check;
mod graph;
mod nn;
mod optim;

pub use check::{grad_check, grad_check_with_fault};
pub use graph::{Fault, Graph, OpKind, Var, ELU_ALPHA};
pub use nn::{Activation, DenseNet};
pub use optim::{clip_grad_norm, copy_params, polyak_update, AdamState};

use crate::error::{Error, Result};

/// Persistent differentiable array: row-major values plus a same-length
/// gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, value: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != value.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                lhs: shape,
                rhs: vec![value.len()],
            });
        }
        Ok(Self {
            grad: vec![0.0; len],
            shape,
            value,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            value: vec![0.0; len],
            grad: vec![0.0; len],
            requires_grad: false,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Self {
            shape: vec![1],
            value: vec![x],
            grad: vec![0.0],
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
    pub fn value(&self) -> &[f64] {
        &self.value
    }
    pub fn value_mut(&mut self) -> &mut [f64] {
        &mut self.value
    }
    pub fn grad(&self) -> &[f64] {
        &self.grad
    }
    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }
    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
    pub fn len(&self) -> usize {
        self.value.len()
    }
    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Adds the gradient that `graph` holds for `var` into this tensor.
    pub fn accumulate_from(&mut self, graph: &Graph, var: Var) {
        if !self.requires_grad {
            return;
        }
        for (g, x) in self.grad.iter_mut().zip(graph.grad(var)) {
            *g += x;
        }
    }
}
