//! Dense row-major f64 tensors.
//!
//! `Tensor` is a plain value container used in two places: as the payload of
//! autodiff tape nodes (see [`crate::tape`]) and as the storage behind named
//! model parameters (see [`crate::params`]). Gradients live beside the data
//! as an optional buffer of identical length and are *accumulated* — two
//! backward passes without an intervening clear sum their contributions.

use crate::error::{ensure_contract, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, checking that the shape's element count matches the
    /// data length.
    pub fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        ensure_contract!(
            numel == data.len(),
            "tensor shape {:?} needs {} elements, got {}",
            shape,
            numel,
            data.len()
        );
        Ok(Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>, requires_grad: bool) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Replaces the data buffer wholesale; the length must match.
    pub fn set_data(&mut self, data: &[f64]) -> Result<()> {
        ensure_contract!(
            data.len() == self.data.len(),
            "set_data length {} does not match tensor numel {}",
            data.len(),
            self.data.len()
        );
        self.data.copy_from_slice(data);
        Ok(())
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    /// The gradient buffer, if one has been accumulated.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        ensure_contract!(
            delta.len() == self.data.len(),
            "gradient length {} does not match tensor numel {}",
            delta.len(),
            self.data.len()
        );
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    /// Drops any accumulated gradient.
    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

/// Scalar convenience: the single element of a 0-d or 1-element tensor.
pub fn scalar_value(t: &Tensor) -> Result<f64> {
    ensure_contract!(
        t.numel() == 1,
        "expected a scalar tensor, got shape {:?}",
        t.shape()
    );
    Ok(t.data()[0])
}
