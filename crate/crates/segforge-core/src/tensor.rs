//! Dense row-major tensors up to rank 4 ([N, C, H, W] for images).

use crate::element::Element;
use crate::error::TensorError;
use crate::rng::SeedStream;
use std::fmt;

pub const MAX_RANK: usize = 4;

/// Tensor shape. Rank 0 (`[]`) is a scalar with one element.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Shape {
    dims: Vec<usize>,
}

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Shape, TensorError> {
        let dims = dims.into();
        if dims.len() > MAX_RANK {
            return Err(TensorError::RankTooHigh { rank: dims.len() });
        }
        Ok(Shape { dims })
    }

    pub fn scalar() -> Shape {
        Shape { dims: Vec::new() }
    }

    pub fn nchw(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape {
            dims: vec![n, c, h, w],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Element count; the empty product makes scalars hold one element.
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.dims.is_empty()
    }

    /// Dimensions as (N, C, H, W), or None when rank != 4.
    pub fn as_nchw(&self) -> Option<(usize, usize, usize, usize)> {
        match self.dims[..] {
            [n, c, h, w] => Some((n, c, h, w)),
            _ => None,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.dims.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

impl std::ops::Index<usize> for Shape {
    type Output = usize;
    fn index(&self, i: usize) -> &usize {
        &self.dims[i]
    }
}

/// Dense tensor. Invariant: `data.len() == shape.numel()`, enforced at every
/// construction site, so kernels can index without re-checking.
#[derive(Clone, PartialEq, Debug)]
pub struct Tensor<T: Element> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Tensor<T>, TensorError> {
        if data.len() != shape.numel() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_string(),
                expected: shape.numel(),
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Tensor<T> {
        let n = shape.numel();
        Tensor {
            shape,
            data: vec![T::ZERO; n],
        }
    }

    pub fn full(shape: Shape, value: T) -> Tensor<T> {
        let n = shape.numel();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Tensor<T> {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> T) -> Tensor<T> {
        let n = shape.numel();
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// I.i.d. standard normal entries drawn from `stream`.
    pub fn randn(shape: Shape, stream: &mut SeedStream) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::from_f64(stream.normal()))
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    /// Flat offset of (n, c, h, w); caller guarantees rank 4 and bounds.
    #[inline]
    pub fn offset4(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let d = &self.shape.dims;
        ((n * d[1] + c) * d[2] + h) * d[3] + w
    }

    #[inline]
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset4(n, c, h, w)]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise conversion between precisions.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    /// Index of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|x| !x.is_finite())
    }
}

/// Error out (in builds with debug assertions) when an op produced NaN/Inf.
/// Release builds skip the scan; coarser guards in the training loop still
/// catch instability there.
#[inline]
pub(crate) fn check_finite<T: Element>(
    op: &'static str,
    t: &Tensor<T>,
) -> Result<(), TensorError> {
    if cfg!(debug_assertions) {
        if let Some(index) = t.first_non_finite() {
            return Err(TensorError::NonFinite { op, index });
        }
    }
    Ok(())
}
