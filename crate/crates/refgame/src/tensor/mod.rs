//! Dense tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is plain storage (shape, row-major data, optional gradient
//! buffer). All differentiable math runs through a [`Tape`]: the forward
//! pass records primitive operations in topological order and
//! [`Tape::backward`] replays them once in reverse, accumulating gradients
//! into every reachable leaf that requires them.

mod adam;
mod checkpoint;
pub(crate) mod kernels;
mod tape;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use tape::{Gradients, MatView, Tape, Var, LOG_FLOOR};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional array, row-major, with an optional gradient buffer.
///
/// The gradient buffer exists iff `requires_grad` is set and always has the
/// same length as `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar = f64> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "tensor shape {:?} wants {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::zero(); numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(x: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
            requires_grad: false,
            grad: None,
        }
    }

    /// Row-major matrix constructor.
    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// (rows, cols) view of a rank-0/1/2 tensor; vectors are single rows.
    pub fn mat_dims(&self) -> Result<(usize, usize)> {
        match self.shape.len() {
            0 => Ok((1, 1)),
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(Error::Contract(format!(
                "rank-{} tensor where a matrix or vector was expected",
                self.shape.len()
            ))),
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Toggle gradient tracking. Enabling allocates a zeroed same-shape
    /// gradient buffer; disabling drops it.
    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if on {
            if self.grad.is_none() {
                self.grad = Some(vec![S::zero(); self.data.len()]);
            }
        } else {
            self.grad = None;
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = S::zero());
        }
    }

    /// Add `g` into the gradient buffer (gradients accumulate, never
    /// overwrite).
    pub fn accumulate_grad(&mut self, g: &[S]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Contract(format!(
                "gradient length {} for tensor of {} elements",
                g.len(),
                self.data.len()
            )));
        }
        let buf = self
            .grad
            .as_mut()
            .ok_or_else(|| Error::Contract("accumulate_grad on a no-grad tensor".into()))?;
        for (b, x) in buf.iter_mut().zip(g) {
            *b = *b + *x;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Convert the stored values to f64 (checkpoint interchange).
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64_lossy()).collect()
    }

    pub fn from_f64_slice(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&x| S::from_real(x)).collect())
    }
}

/// Checked matrix product on plain tensors (no gradient recording).
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = a.mat_dims()?;
    let (k2, n) = b.mat_dims()?;
    if k != k2 {
        return Err(Error::dimension("matmul", a.shape(), b.shape()));
    }
    let out = kernels::matmul(a.data(), m, k, b.data(), n);
    Tensor::matrix(m, n, out)
}

/// Checked softmax along `axis` on a plain tensor (no gradient recording).
/// For vectors the only valid axis is 0.
pub fn softmax<S: Scalar>(x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    if !x.is_finite() {
        return Err(Error::numeric("softmax", "non-finite input"));
    }
    let (rows, cols) = x.mat_dims()?;
    let row_axis = match (x.shape().len(), axis) {
        (0 | 1, 0) => 1,
        (2, a) if a < 2 => a,
        _ => {
            return Err(Error::Contract(format!(
                "softmax axis {} out of range for shape {:?}",
                axis,
                x.shape()
            )))
        }
    };
    let out = kernels::softmax_axis(x.data(), rows, cols, row_axis);
    Tensor::new(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests;
