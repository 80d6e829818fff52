//! Two-dimensional real FFTs on the periodic grid.
//!
//! Storage of a real field is row-major with `x1` fastest: node `(i, j)` at
//! `x = (i/n, j/n)` lives at `j * n + i`. The forward transform is
//! unnormalised, `X(k) = sum_x u(x) exp(-2 pi i k.x)`, and keeps the half
//! spectrum `k1 in 0..=n/2` (real FFT along rows) with `k2` in FFT order.
//! Half-spectrum index is `k2 * (n/2 + 1) + k1`.
//!
//! The inverse is the real-linear map
//! `R(Y)(x) = n^-2 Re sum_{k1, k2} c(k1) Y(k) exp(2 pi i k.x)` with
//! `c = 1` on the `k1 = 0` and `k1 = n/2` columns and `c = 2` elsewhere. For a
//! Hermitian-consistent half spectrum this is the ordinary inverse; for any
//! other input it is still exactly real, which the spectral layers rely on.
//!
//! Truncated mode sets (`k1 in 0..=kmax`, `k2 in -kmax..=kmax`) are stored
//! with `k2` outer and `k1` inner: index `(k2 + kmax) * (kmax + 1) + k1`.

use std::sync::Arc;

use num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::{Fft, FftPlanner};

use crate::scalar::Scalar;

/// Number of retained modes for a truncation level.
pub fn mode_count(kmax: usize) -> usize {
    (kmax + 1) * (2 * kmax + 1)
}

/// `(k1, k2)` wave numbers of the retained modes, in storage order.
pub fn retained_modes(kmax: usize) -> Vec<(usize, i64)> {
    let k = kmax as i64;
    let mut out = Vec::with_capacity(mode_count(kmax));
    for k2 in -k..=k {
        for k1 in 0..=kmax {
            out.push((k1, k2));
        }
    }
    out
}

/// Planned transforms plus scratch space for one grid size.
pub struct Fft2<T: Scalar> {
    n: usize,
    half: usize,
    r2c: Arc<dyn RealToComplex<T>>,
    c2r: Arc<dyn ComplexToReal<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
    row_real: Vec<T>,
    row_half: Vec<Complex<T>>,
    real_scratch: Vec<Complex<T>>,
    col_scratch: Vec<Complex<T>>,
    cols: Vec<Complex<T>>,
}

impl<T: Scalar> Clone for Fft2<T> {
    fn clone(&self) -> Self {
        Self::new(self.n)
    }
}

impl<T: Scalar> std::fmt::Debug for Fft2<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2").field("n", &self.n).finish()
    }
}

impl<T: Scalar> Fft2<T> {
    pub fn new(n: usize) -> Self {
        assert!(n >= 2 && n.is_power_of_two(), "FFT size must be a power of two");
        let mut rplanner = RealFftPlanner::<T>::new();
        let r2c = rplanner.plan_fft_forward(n);
        let c2r = rplanner.plan_fft_inverse(n);
        let mut planner = FftPlanner::<T>::new();
        let col_fwd = planner.plan_fft_forward(n);
        let col_inv = planner.plan_fft_inverse(n);
        let half = n / 2 + 1;
        let real_scratch_len = r2c.get_scratch_len().max(c2r.get_scratch_len());
        let col_scratch_len = col_fwd
            .get_inplace_scratch_len()
            .max(col_inv.get_inplace_scratch_len());
        let zero = Complex::new(T::zero(), T::zero());
        Self {
            n,
            half,
            r2c,
            c2r,
            col_fwd,
            col_inv,
            row_real: vec![T::zero(); n],
            row_half: vec![zero; half],
            real_scratch: vec![zero; real_scratch_len],
            col_scratch: vec![zero; col_scratch_len],
            cols: vec![zero; half * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Length of the half spectrum, `n * (n/2 + 1)`.
    pub fn half_len(&self) -> usize {
        self.n * self.half
    }

    /// Row transforms followed by column transforms of the first `ncols`
    /// columns; leaves the result column-major in `self.cols`.
    fn forward_cols(&mut self, x: &[T], ncols: usize) {
        let n = self.n;
        assert_eq!(x.len(), n * n, "field length does not match FFT size");
        for j in 0..n {
            self.row_real.copy_from_slice(&x[j * n..(j + 1) * n]);
            self.r2c
                .process_with_scratch(&mut self.row_real, &mut self.row_half, &mut self.real_scratch)
                .expect("row r2c");
            for k1 in 0..ncols {
                self.cols[k1 * n + j] = self.row_half[k1];
            }
        }
        self.col_fwd
            .process_with_scratch(&mut self.cols[..ncols * n], &mut self.col_scratch);
    }

    /// Column inverse transforms of the first `ncols` columns of `self.cols`
    /// followed by real row inverses; applies the `n^-2` normalisation.
    fn inverse_cols(&mut self, ncols: usize, x: &mut [T]) {
        let n = self.n;
        assert_eq!(x.len(), n * n, "field length does not match FFT size");
        self.col_inv
            .process_with_scratch(&mut self.cols[..ncols * n], &mut self.col_scratch);
        let scale = T::one() / T::from_usize_lossy(n * n);
        let zero = Complex::new(T::zero(), T::zero());
        for j in 0..n {
            for k1 in 0..self.half {
                self.row_half[k1] = if k1 < ncols { self.cols[k1 * n + j] } else { zero };
            }
            self.row_half[0].im = T::zero();
            self.row_half[self.half - 1].im = T::zero();
            let out = &mut x[j * n..(j + 1) * n];
            self.c2r
                .process_with_scratch(&mut self.row_half, out, &mut self.real_scratch)
                .expect("row c2r");
            for v in out.iter_mut() {
                *v *= scale;
            }
        }
    }

    /// Full half-spectrum forward transform.
    pub fn forward(&mut self, x: &[T], spec: &mut [Complex<T>]) {
        let (n, half) = (self.n, self.half);
        assert_eq!(spec.len(), n * half);
        self.forward_cols(x, half);
        for k2 in 0..n {
            for k1 in 0..half {
                spec[k2 * half + k1] = self.cols[k1 * n + k2];
            }
        }
    }

    /// Real inverse `R` of a half spectrum.
    pub fn inverse(&mut self, spec: &[Complex<T>], x: &mut [T]) {
        let (n, half) = (self.n, self.half);
        assert_eq!(spec.len(), n * half);
        for k2 in 0..n {
            for k1 in 0..half {
                self.cols[k1 * n + k2] = spec[k2 * half + k1];
            }
        }
        self.inverse_cols(half, x);
    }

    /// Forward transform restricted to the retained mode set.
    pub fn forward_modes(&mut self, x: &[T], kmax: usize, modes: &mut [Complex<T>]) {
        let n = self.n;
        assert!(2 * kmax < n, "kmax must be below n/2");
        assert_eq!(modes.len(), mode_count(kmax));
        self.forward_cols(x, kmax + 1);
        let k = kmax as i64;
        let mut m = 0;
        for k2 in -k..=k {
            let row = k2.rem_euclid(n as i64) as usize;
            for k1 in 0..=kmax {
                modes[m] = self.cols[k1 * n + row];
                m += 1;
            }
        }
    }

    /// `R` applied to a half spectrum that is zero outside the retained set.
    pub fn inverse_modes(&mut self, modes: &[Complex<T>], kmax: usize, x: &mut [T]) {
        let n = self.n;
        assert!(2 * kmax < n, "kmax must be below n/2");
        assert_eq!(modes.len(), mode_count(kmax));
        let zero = Complex::new(T::zero(), T::zero());
        self.cols[..(kmax + 1) * n].fill(zero);
        let k = kmax as i64;
        let mut m = 0;
        for k2 in -k..=k {
            let row = k2.rem_euclid(n as i64) as usize;
            for k1 in 0..=kmax {
                self.cols[k1 * n + row] = modes[m];
                m += 1;
            }
        }
        self.inverse_cols(kmax + 1, x);
    }
}
