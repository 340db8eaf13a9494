//! Dense tensors with a recorded-graph reverse-mode differentiator.
//!
//! Values live in contiguous row-major buffers. Operations are recorded on a
//! [`Graph`] in execution order, which is already a topological order, so
//! [`Graph::backward`] is a single reverse sweep over the node list.
//!
//! Everything is generic over [`Scalar`] so the same graph code runs in `f32`
//! for training and in `f64` for finite-difference gradient checks.

mod adam;
mod conv;
mod graph;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

pub use adam::{AdamConfig, AdamState};
pub use conv::{col2im_add, conv_output_extent, im2col};
pub use graph::{Gradients, Graph, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph has already been differentiated; double backward is not supported")]
    AlreadyDifferentiated,
    #[error("non-finite gradient for parameter {index}; optimizer step rejected")]
    NonFiniteGradient { index: usize },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Floating point element type usable in a [`Graph`].
pub trait Scalar: Float + FromPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static {
    /// `c = alpha * op(a) * op(b) + beta * c` with explicit row/column strides.
    ///
    /// # Safety
    /// The pointers and strides must describe valid `m x k`, `k x n` and
    /// `m x n` matrices, and `c` must not alias `a` or `b`.
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

    fn from_f64_lossy(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("float conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("float conversion")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major matrix operand: a buffer plus whether it is read transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    /// Rows and columns of the *stored* buffer.
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, transposed: false }
    }

    pub fn t(self) -> Self {
        Self { transposed: !self.transposed, ..self }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a * b` (or `out += a * b` when `accumulate`), `out` row-major `m x n`.
pub(crate) fn matmul<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, out: &mut [T], accumulate: bool) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "inner dimensions");
    assert_eq!(a.data.len(), a.rows * a.cols);
    assert_eq!(b.data.len(), b.rows * b.cols);
    assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: dimensions and buffer lengths were checked above; `out` is a
    // distinct mutable borrow so it cannot alias the inputs.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// An n-dimensional array of scalars in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![T::zero(); n] }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64_lossy(v)).collect())
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise conversion to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }

    /// Treats the leading axis as a batch and stacks equally shaped tensors.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first =
            items.first().ok_or_else(|| TensorError::InvalidArgument { op: "stack", detail: "no tensors".into() })?;
        let inner = &first.shape[1..];
        let mut data = Vec::with_capacity(items.len() * first.len());
        let mut batch = 0;
        for item in items {
            if &item.shape[1..] != inner {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    detail: format!("{:?} vs {:?}", item.shape, first.shape),
                });
            }
            batch += item.shape[0];
            data.extend_from_slice(&item.data);
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(inner);
        Ok(Self { shape, data })
    }

    /// Returns batch item `index` of an `[N, ...]` tensor as `[1, ...]`.
    pub fn batch_item(&self, index: usize) -> Tensor<T> {
        let per = self.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor { shape, data: self.data[index * per..(index + 1) * per].to_vec() }
    }
}

/// Checks a shape has exactly `rank` axes, naming the op in the error.
pub(crate) fn expect_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(TensorError::ShapeMismatch { op, detail: format!("expected rank {rank}, got shape {shape:?}") });
    }
    Ok(())
}
