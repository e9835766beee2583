//! Dense rank-4 NHWC tensors and the scalar trait the ops are generic over.

use std::cell::RefCell;
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ops::kernels;
use crate::ops::ConvSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {actual} does not match shape {shape} (expected {expected})")]
    LengthMismatch { shape: Shape, expected: usize, actual: usize },
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: {what} = {value} is not divisible by {divisor}")]
    NotDivisible { op: &'static str, what: &'static str, value: usize, divisor: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Element type tag carried by every tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Real32,
    Real64,
}

/// Floating-point element type. `f32` is used for training and inference,
/// `f64` for gradient checking.
pub trait Real:
    Copy
    + Default
    + PartialOrd
    + Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
{
    const DTYPE: DType;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;

    /// Runs `f` with this thread's reusable scratch buffer (im2col workspace).
    fn with_scratch<R>(f: impl FnOnce(&mut Vec<Self>) -> R) -> R;

    /// `c = a·b + beta·c` for strided row/column-major views.
    ///
    /// # Safety
    /// Every pointer/stride combination must stay inside its allocation
    /// for the given `m`, `k`, `n`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
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

    /// Direct-kernel `out += conv(input)` for shapes the GEMM path handles
    /// poorly. Returns `false`, untouched, when no kernel applies.
    fn conv_direct(
        _input: &[Self],
        _dims: (usize, usize, usize),
        _spec: &ConvSpec,
        _weights: &[Self],
        _out: &mut [Self],
    ) -> bool {
        false
    }

    /// Direct-kernel weight gradient; same contract as [`Real::conv_direct`].
    fn conv_weight_grad_direct(
        _input: &[Self],
        _dims: (usize, usize, usize),
        _spec: &ConvSpec,
        _upstream: &[Self],
        _grad_w: &mut [Self],
    ) -> bool {
        false
    }
}

impl Real for f32 {
    const DTYPE: DType = DType::Real32;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    #[inline]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }

    fn with_scratch<R>(f: impl FnOnce(&mut Vec<Self>) -> R) -> R {
        thread_local! {
            static SCRATCH: RefCell<Vec<f32>> = const { RefCell::new(Vec::new()) };
        }
        SCRATCH.with(|s| f(&mut s.borrow_mut()))
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
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
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn conv_direct(
        input: &[Self],
        dims: (usize, usize, usize),
        spec: &ConvSpec,
        weights: &[Self],
        out: &mut [Self],
    ) -> bool {
        if !kernels::supported(spec) {
            return false;
        }
        kernels::conv_accumulate(input, dims, spec, weights, out);
        true
    }

    fn conv_weight_grad_direct(
        input: &[Self],
        dims: (usize, usize, usize),
        spec: &ConvSpec,
        upstream: &[Self],
        grad_w: &mut [Self],
    ) -> bool {
        if !kernels::supported(spec) {
            return false;
        }
        kernels::weight_grad(input, dims, spec, upstream, grad_w);
        true
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::Real64;
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }

    fn with_scratch<R>(f: impl FnOnce(&mut Vec<Self>) -> R) -> R {
        thread_local! {
            static SCRATCH: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
        }
        SCRATCH.with(|s| f(&mut s.borrow_mut()))
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
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
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Read-only strided matrix view into a slice.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

pub(crate) struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

fn last_index(offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    offset + (rows - 1) * rs + (cols - 1) * cs
}

/// Bounds-checked wrapper over [`Real::gemm_raw`]: `c (m×n) = a (m×k) · b (k×n) + beta·c`.
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    beta: T,
    c: MatMut<'_, T>,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(last_index(c.offset, m, n, c.rs, c.cs) < c.data.len(), "gemm: C out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = c.offset + i * c.rs + j * c.cs;
                c.data[idx] = beta * c.data[idx];
            }
        }
        return;
    }
    assert!(last_index(a.offset, m, k, a.rs, a.cs) < a.data.len(), "gemm: A out of bounds");
    assert!(last_index(b.offset, k, n, b.rs, b.cs) < b.data.len(), "gemm: B out of bounds");
    // SAFETY: the three asserts above bound every index the kernel touches.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// (batch, height, width, channels).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub const fn new(n: usize, h: usize, w: usize, c: usize) -> Self {
        Shape { n, h, w, c }
    }

    pub const fn len(&self) -> usize {
        self.n * self.h * self.w * self.c
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of spatial positions over the whole batch.
    pub const fn pixels(&self) -> usize {
        self.n * self.h * self.w
    }

    #[inline]
    pub const fn index(&self, n: usize, y: usize, x: usize, c: usize) -> usize {
        ((n * self.h + y) * self.w + x) * self.c + c
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.h, self.w, self.c)
    }
}

/// Rank-4 NHWC array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(TensorError::LengthMismatch { shape, expected: shape.len(), actual: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![T::ZERO; shape.len()] }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor { shape, data: vec![value; shape.len()] }
    }

    /// Builds a tensor by evaluating `f(n, y, x, c)` at every position.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for y in 0..shape.h {
                for x in 0..shape.w {
                    for c in 0..shape.c {
                        data.push(f(n, y, x, c));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize, c: usize) -> T {
        self.data[self.shape.index(n, y, x, c)]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect() }
    }

    /// Returns an error naming `op` if any element is NaN or infinite.
    #[allow(clippy::eq_op)]
    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        // x - x is NaN exactly for NaN and ±inf; the lane sums vectorize
        let mut lanes = [T::ZERO; 8];
        let chunks = self.data.chunks_exact(8);
        let tail = chunks.remainder();
        for chunk in chunks {
            for (l, &v) in lanes.iter_mut().zip(chunk) {
                *l += v - v;
            }
        }
        for &v in tail {
            lanes[0] += v - v;
        }
        if lanes.iter().all(|l| l.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    /// Copies out a single batch element.
    pub fn batch_item(&self, n: usize) -> Tensor<T> {
        let s = self.shape;
        let per = s.h * s.w * s.c;
        Tensor { shape: Shape::new(1, s.h, s.w, s.c), data: self.data[n * per..(n + 1) * per].to_vec() }
    }

    /// Stacks single-or-multi-item tensors with identical H, W, C along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| TensorError::InvalidArgument { op: "stack", detail: "no tensors to stack".into() })?;
        let s = first.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            if (t.shape.h, t.shape.w, t.shape.c) != (s.h, s.w, s.c) {
                return Err(TensorError::ShapeMismatch { op: "stack", detail: format!("{} vs {}", s, t.shape) });
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { shape: Shape::new(n, s.h, s.w, s.c), data })
    }

    /// Spatial crop `[y0, y0+h) x [x0, x0+w)` of every batch item.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor<T>> {
        let s = self.shape;
        if y0 + h > s.h || x0 + w > s.w {
            return Err(TensorError::InvalidArgument {
                op: "crop",
                detail: format!("window {h}x{w} at ({y0},{x0}) exceeds {s}"),
            });
        }
        let mut data = Vec::with_capacity(s.n * h * w * s.c);
        for n in 0..s.n {
            for y in y0..y0 + h {
                let start = s.index(n, y, x0, 0);
                data.extend_from_slice(&self.data[start..start + w * s.c]);
            }
        }
        Ok(Tensor { shape: Shape::new(s.n, h, w, s.c), data })
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| (a.to_f64() - b.to_f64()).abs()).fold(0.0, f64::max)
    }
}
