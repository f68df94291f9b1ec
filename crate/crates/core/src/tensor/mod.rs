//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a shape plus a flat row-major value buffer and an optional
//! gradient buffer of the same length. Differentiable computation happens on a
//! [`Graph`]: forward values are computed eagerly as nodes are added, and
//! [`Graph::backward`] fills per-node gradients in reverse topological order.

mod gradcheck;
mod graph;
mod optim;

pub use gradcheck::{conditioning_margin, grad_check, sweep_op_names, sweep_ops};
pub use graph::{AttentionWeights, Graph, NodeId};
pub(crate) use graph::correlate2d_replicate;
pub use optim::{AdamState, LrSchedule};

use thiserror::Error;

/// Errors surfaced by tensor construction and graph operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} values, got {got}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape {shape:?} contains a zero dimension")]
    ZeroDim { shape: Vec<usize> },
    #[error("operand shapes differ: {left:?} vs {right:?}")]
    OperandMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("matmul inner dimensions disagree: [{m}, {k}] x [{k2}, {n}]")]
    MatmulMismatch {
        m: usize,
        k: usize,
        k2: usize,
        n: usize,
    },
    #[error("expected a matrix, got shape {shape:?}")]
    NotAMatrix { shape: Vec<usize> },
    #[error("non-finite value ({value}) at flat index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("gradient for {what} is missing")]
    MissingGrad { what: String },
    #[error("{op} requires a nonzero-norm vector")]
    ZeroNorm { op: &'static str },
    #[error("{what} must be positive, got {got}")]
    NotPositive { what: &'static str, got: f64 },
    #[error("{what} out of range: {detail}")]
    OutOfRange { what: &'static str, detail: String },
    #[error("model width {dim} is not divisible by {heads} attention heads")]
    HeadSplit { dim: usize, heads: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward seed must be a scalar, node has shape {shape:?}")]
    NonScalarSeed { shape: Vec<usize> },
    #[error("flat index {index} out of bounds for {len} elements")]
    IndexOutOfBounds { index: usize, len: usize },
    #[error("column range {start}..{end} out of bounds for {cols} columns")]
    ColumnRange {
        start: usize,
        end: usize,
        cols: usize,
    },
    #[error("clamp bounds inverted: lo {lo} > hi {hi}")]
    ClampBounds { lo: f64, hi: f64 },
    #[error("kernel dims [{kh}, {kw}] must both be odd and positive")]
    KernelDims { kh: usize, kw: usize },
}

/// Dense row-major f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite(values: &[f64]) -> Result<(), TensorError> {
    for (index, &value) in values.iter().enumerate() {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { index, value });
        }
    }
    Ok(())
}

impl Tensor {
    /// Builds a tensor, rejecting zero dimensions, length mismatches, and
    /// non-finite values.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDim { shape });
        }
        let expected = numel(&shape);
        if values.len() != expected {
            return Err(TensorError::ShapeMismatch {
                shape,
                expected,
                got: values.len(),
            });
        }
        check_finite(&values)?;
        Ok(Tensor {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDim { shape });
        }
        let n = numel(&shape);
        Ok(Tensor {
            shape,
            values: vec![0.0; n],
            grad: None,
        })
    }

    pub fn scalar(value: f64) -> Result<Self, TensorError> {
        Tensor::new(vec![1], vec![value])
    }

    pub fn vector(values: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::new(vec![values.len()], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize), TensorError> {
        if self.shape.len() == 2 {
            Ok((self.shape[0], self.shape[1]))
        } else {
            Err(TensorError::NotAMatrix {
                shape: self.shape.clone(),
            })
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access to the raw buffer. Callers own the finiteness invariant;
    /// optimizer updates and graph hand-offs re-check where it matters.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<(), TensorError> {
        if grad.len() != self.values.len() {
            return Err(TensorError::ShapeMismatch {
                shape: self.shape.clone(),
                expected: self.values.len(),
                got: grad.len(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Same buffer under a new shape with identical element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDim { shape });
        }
        let expected = numel(&shape);
        if expected != self.values.len() {
            return Err(TensorError::ShapeMismatch {
                shape,
                expected,
                got: self.values.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Standard-normal fill scaled by `std`, for parameter initialization.
    pub fn randn<R: rand::Rng>(
        shape: Vec<usize>,
        std: f64,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        use rand_distr::{Distribution, StandardNormal};
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDim { shape });
        }
        let n = numel(&shape);
        let values = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor::new(shape, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_validates_shape_and_values() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(TensorError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            Tensor::new(vec![0], vec![]),
            Err(TensorError::ZeroDim { .. })
        ));
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(TensorError::NonFinite { index: 1, .. })
        ));
        assert!(matches!(
            Tensor::new(vec![2], vec![f64::INFINITY, 0.0]),
            Err(TensorError::NonFinite { index: 0, .. })
        ));
    }

    #[test]
    fn reshape_preserves_count() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        let r = t.clone().reshaped(vec![3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.values(), t.values());
        assert!(t.reshaped(vec![4, 2]).is_err());
    }

    #[test]
    fn grad_buffer_must_match_length() {
        let mut t = Tensor::vector(vec![1.0, 2.0]).unwrap();
        assert!(t.set_grad(vec![0.5]).is_err());
        t.set_grad(vec![0.5, 0.25]).unwrap();
        assert_eq!(t.grad().unwrap(), &[0.5, 0.25]);
        t.clear_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn randn_is_deterministic_per_seed() {
        use rand::SeedableRng;
        let mut a = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut b = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let ta = Tensor::randn(vec![4], 0.1, &mut a).unwrap();
        let tb = Tensor::randn(vec![4], 0.1, &mut b).unwrap();
        assert_eq!(ta.values(), tb.values());
    }
}
