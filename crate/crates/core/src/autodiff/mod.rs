//! Dense 64-bit tensors with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: a [`Tape`] records every primitive in
//! execution order, [`Tape::backward`] walks it once in reverse, and
//! broadcasting is restricted to scalars and an explicit bias-row primitive so
//! every gradient rule stays auditable.

mod checkpoint;
mod optim;
mod tape;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::Adam;
pub use tape::{Tape, VarId};

use crate::error::{CoreError, Result};

/// Dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(CoreError::invalid(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Mark as a trainable parameter (allocates the gradient buffer).
    pub fn param(mut self) -> Tensor {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}
