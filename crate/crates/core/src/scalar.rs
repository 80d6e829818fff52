//! Floating-point abstraction shared by the grid, FFT and network code.
//!
//! Everything numeric in this crate is generic over [`Scalar`], which is
//! implemented for `f32` and `f64`. The cell solver and the stability harness
//! run in `f64`; network training defaults to `f32`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign};
use rustfft::FftNum;

/// Real scalar usable for fields, spectra and network parameters.
pub trait Scalar:
    Float + FloatConst + FftNum + FromPrimitive + NumAssign + Sum + Default + Debug + Display
{
    /// Short type name written into file headers.
    const NAME: &'static str;

    /// Gauss error function.
    fn error_fn(self) -> Self;

    /// `c = alpha * a * b + beta * c` for row-major dense matrices
    /// `a: m x k`, `b: k x n`, `c: m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_transposed: bool,
        b: &[Self],
        b_transposed: bool,
        beta: Self,
        c: &mut [Self],
    );

    #[inline]
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("literal representable")
    }

    #[inline]
    fn from_usize_lossy(x: usize) -> Self {
        <Self as FromPrimitive>::from_usize(x).expect("usize representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    // element (r, c) of the logical matrix
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

fn check_gemm(m: usize, k: usize, n: usize, a: usize, b: usize, c: usize) {
    assert!(a >= m * k && b >= k * n && c >= m * n, "gemm operand too short");
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn error_fn(self) -> Self {
        libm::erff(self)
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        a_transposed: bool,
        b: &[f32],
        b_transposed: bool,
        beta: f32,
        c: &mut [f32],
    ) {
        check_gemm(m, k, n, a.len(), b.len(), c.len());
        let (rsa, csa) = strides(m, k, a_transposed);
        let (rsb, csb) = strides(k, n, b_transposed);
        // SAFETY: bounds checked above, strides describe dense row-major storage.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn error_fn(self) -> Self {
        libm::erf(self)
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        a_transposed: bool,
        b: &[f64],
        b_transposed: bool,
        beta: f64,
        c: &mut [f64],
    ) {
        check_gemm(m, k, n, a.len(), b.len(), c.len());
        let (rsa, csa) = strides(m, k, a_transposed);
        let (rsb, csb) = strides(k, n, b_transposed);
        // SAFETY: bounds checked above, strides describe dense row-major storage.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}
