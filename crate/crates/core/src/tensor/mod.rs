//! Minimal dense f64 tensor engine with reverse-mode automatic
//! differentiation and an Adam optimizer.
//!
//! Design constraints, chosen to keep every backward rule auditable:
//! - 64-bit floats throughout.
//! - No broadcasting beyond scalar-times-tensor; binary ops require exactly
//!   matching shapes. Row-wise bias addition is its own op.
//! - The [`Tape`] is rebuilt per forward pass (define-by-run); nodes are
//!   append-only so reverse insertion order is a valid reverse topological
//!   order.
//! - Any non-finite value produced by a forward op is treated as a bug and
//!   panics immediately rather than propagating.

mod adam;
mod gradcheck;
mod serialize;
mod tape;

pub use adam::AdamState;
pub use gradcheck::{grad_check, DEFAULT_FD_STEP};
pub use serialize::{read_tensor, read_tensors, write_tensor, write_tensors};
pub use tape::{Gradients, NodeId, Tape};

/// Dense n-dimensional value, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    /// Panics if `shape` does not multiply out to `data.len()` or if any
    /// value is non-finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        assert!(
            data.iter().all(|v| v.is_finite()),
            "tensor contains non-finite values"
        );
        Self {
            shape,
            data,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Self::new(shape, vec![0.0; numel])
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Self::new(shape, vec![value; numel])
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value])
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() requires a 2-D tensor");
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() requires a 2-D tensor");
        self.shape[1]
    }
}
