//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Training runs in `f32`. Every kernel is generic over [`Float`] so the same
//! graphs can be evaluated in `f64` when gradients are verified against
//! finite differences.

mod graph;
pub mod gradcheck;
mod kernels;
pub mod layers;
pub mod optim;
mod params;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use crate::error::{Error, Result};

pub use graph::{Gradients, Graph, Reduction, Var};
pub use kernels::{gemm, Padding};
pub use params::{ParamId, ParamStore};

/// Scalar element type of a [`Tensor`].
pub trait Float:
    num_traits::Float
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn erf(self) -> Self;

    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Row-major general matrix multiply with explicit strides.
    ///
    /// # Safety
    /// The pointers and strides must describe valid, non-aliasing regions.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Float for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn lit(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Float for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn lit(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Shorthand for converting an `f64` literal into the working precision.
#[inline]
pub(crate) fn cst<T: Float>(v: f64) -> T {
    T::lit(v)
}

/// A dense row-major array.
///
/// `grad` is only populated on parameters held by a [`ParamStore`]; values
/// flowing through a [`Graph`] carry their gradients on the tape instead.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("tensor", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[], value)
    }

    pub fn from_f32(shape: &[usize], data: &[f32]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::lit(v as f64)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Element-wise conversion to another precision. Gradients are dropped.
    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// Row `i` of a tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[T] {
        let w = self.numel() / self.shape[0].max(1);
        &self.data[i * w..(i + 1) * w]
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let Some(first) = items.first() else {
            return Err(Error::Contract("stack of zero tensors".into()));
        };
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::dim("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Self::new(&shape, data)
    }

    /// Builds a batch `[rows.len(), width]` from row slices.
    pub fn from_rows(rows: &[&[T]], tail: &[usize]) -> Result<Self> {
        let width: usize = tail.iter().product();
        let mut data = Vec::with_capacity(width * rows.len());
        for r in rows {
            if r.len() != width {
                return Err(Error::dim("from_rows", tail, &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(tail);
        Self::new(&shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f32>::new(&[2, 3], vec![0.0; 5]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn empty_extent_is_valid() {
        let t = Tensor::<f32>::zeros(&[0, 4]);
        assert_eq!(t.numel(), 0);
        assert_eq!(t.shape(), &[0, 4]);
    }

    #[test]
    fn cast_roundtrip_is_exact_for_f32_values() {
        let t = Tensor::<f32>::new(&[3], vec![0.1, -2.5, 1e-7]).unwrap();
        assert_eq!(t.cast::<f64>().cast::<f32>(), t);
    }
}
