//! Scalar abstraction over the two supported element types.
//!
//! Training runs in `f32`; a 64-bit shadow instantiation of the same code
//! exists for finite-difference gradient checking. Everything downstream is
//! generic over [`Scalar`] so both precisions share one implementation.

use num_traits::Float;

/// Element type of all tensors: `f32` for training, `f64` for check mode.
pub trait Scalar: Float + core::fmt::Debug + core::fmt::Display + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }

    /// C[m,n] += A[m,k] * B[k,n], all row-major. `beta` scales the existing C.
    ///
    /// # Safety
    /// Pointers must reference buffers of at least m*k, k*n and m*n elements.
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        b: *const Self,
        beta: Self,
        c: *mut Self,
    );
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        b: *const Self,
        beta: Self,
        c: *mut Self,
    ) {
        matrixmultiply::sgemm(
            m, k, n, alpha, a, k as isize, 1, b, n as isize, 1, beta, c, n as isize, 1,
        );
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        b: *const Self,
        beta: Self,
        c: *mut Self,
    ) {
        matrixmultiply::dgemm(
            m, k, n, alpha, a, k as isize, 1, b, n as isize, 1, beta, c, n as isize, 1,
        );
    }
}
