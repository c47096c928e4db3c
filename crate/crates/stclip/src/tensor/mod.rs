//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A `Tensor` is an immutable value plus an optional record of the operation
//! that produced it. `backward()` walks that record and returns gradients in
//! a separate [`GradStore`](autograd::GradStore); tensors themselves are
//! never mutated, so values can be shared freely across threads.

pub mod autograd;
pub mod kernels;
pub mod ops;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::Draws;
use crate::scalar::Scalar;

use ops::Op;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identifier of one tensor node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(pub(crate) u64);

pub(crate) struct Inner<S: Scalar> {
    id: TensorId,
    shape: Vec<usize>,
    data: Vec<S>,
    /// Leaf marker: gradients are collected for this tensor.
    requires_grad: bool,
    /// True when this node or any ancestor requires gradients.
    track: bool,
    op: Option<Op<S>>,
}

/// Cheaply clonable handle to an immutable tensor node.
pub struct Tensor<S: Scalar> {
    pub(crate) inner: Arc<Inner<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id.0)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

pub(crate) fn fmt_shape(shape: &[usize]) -> String {
    format!(
        "[{}]",
        shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(", ")
    )
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Dim("tensor shape must have at least one dimension".into()));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::Dim(format!(
            "tensor dimensions must be positive, got {}",
            fmt_shape(shape)
        )));
    }
    Ok(shape.iter().product())
}

impl<S: Scalar> Tensor<S> {
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<S>, op: Op<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let track = op.inputs().iter().any(|t| t.inner.track);
        Tensor {
            inner: Arc::new(Inner {
                id: TensorId(NEXT_ID.fetch_add(1, Ordering::Relaxed)),
                shape,
                data,
                requires_grad: false,
                track,
                op: Some(op),
            }),
        }
    }

    fn leaf(shape: Vec<usize>, data: Vec<S>, requires_grad: bool) -> Self {
        Tensor {
            inner: Arc::new(Inner {
                id: TensorId(NEXT_ID.fetch_add(1, Ordering::Relaxed)),
                shape,
                data,
                requires_grad,
                track: requires_grad,
                op: None,
            }),
        }
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel = check_shape(&shape)?;
        if numel != data.len() {
            return Err(Error::Dim(format!(
                "shape {} implies {} elements, got {}",
                fmt_shape(&shape),
                numel,
                data.len()
            )));
        }
        Ok(Self::leaf(shape, data, false))
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel = check_shape(&shape)?;
        Ok(Self::leaf(shape, vec![S::zero(); numel], false))
    }

    pub fn full(shape: Vec<usize>, value: S) -> Result<Self> {
        let numel = check_shape(&shape)?;
        Ok(Self::leaf(shape, vec![value; numel], false))
    }

    pub fn scalar(value: S) -> Self {
        Self::leaf(vec![1], vec![value], false)
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![S::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = S::one();
        }
        Self::leaf(vec![n, n], data, false)
    }

    /// Normal-initialized leaf; draws come from the given cursor in order.
    pub fn randn(shape: Vec<usize>, draws: &mut Draws, std: f64) -> Result<Self> {
        let numel = check_shape(&shape)?;
        let data = (0..numel)
            .map(|_| S::from_f64(draws.normal(0.0, std)))
            .collect();
        Ok(Self::leaf(shape, data, false))
    }

    /// Uniform-initialized leaf on [lo, hi).
    pub fn rand_uniform(shape: Vec<usize>, draws: &mut Draws, lo: f64, hi: f64) -> Result<Self> {
        let numel = check_shape(&shape)?;
        let data = (0..numel)
            .map(|_| S::from_f64(draws.uniform(lo, hi)))
            .collect();
        Ok(Self::leaf(shape, data, false))
    }

    /// Mark a leaf as a gradient target. Must not be applied to op outputs.
    pub fn with_grad(self) -> Self {
        assert!(
            self.inner.op.is_none(),
            "with_grad is only valid on leaf tensors"
        );
        Tensor {
            inner: Arc::new(Inner {
                id: TensorId(NEXT_ID.fetch_add(1, Ordering::Relaxed)),
                shape: self.inner.shape.clone(),
                data: self.inner.data.clone(),
                requires_grad: true,
                track: true,
                op: None,
            }),
        }
    }

    /// A leaf copy of this tensor's value, cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.inner.shape.clone(), self.inner.data.clone(), false)
    }

    /// Same values at a different storage precision (leaf).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor::<T>::from_vec(
            self.inner.shape.clone(),
            self.inner
                .data
                .iter()
                .map(|v| T::from_f64(v.as_f64()))
                .collect(),
        )
        .expect("cast preserves shape")
    }

    pub fn id(&self) -> TensorId {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[S] {
        &self.inner.data
    }

    pub fn data_f64(&self) -> Vec<f64> {
        self.inner.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn is_tracked(&self) -> bool {
        self.inner.track
    }

    pub(crate) fn op(&self) -> Option<&Op<S>> {
        self.inner.op.as_ref()
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.inner.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        *self.inner.shape.last().unwrap()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() requires a one-element tensor");
        self.inner.data[0]
    }

    /// True when every element is finite.
    pub fn is_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    /// NaN/Inf anywhere is a contract violation.
    pub fn validate_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!(
                "{context}: tensor of shape {} contains non-finite values",
                fmt_shape(&self.inner.shape)
            )))
        }
    }

    pub(crate) fn expect_2d(&self, what: &str) -> Result<(usize, usize)> {
        if self.ndim() != 2 {
            return Err(Error::Dim(format!(
                "{what} expects a 2-D tensor, got shape {}",
                fmt_shape(&self.inner.shape)
            )));
        }
        Ok((self.inner.shape[0], self.inner.shape[1]))
    }

    /// Bitwise equality of shapes and payloads.
    pub fn bit_eq(&self, other: &Tensor<S>) -> bool {
        self.shape() == other.shape()
            && self
                .data()
                .iter()
                .zip(other.data().iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}
