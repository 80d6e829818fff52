//! Periodic grid fields and discrete calculus on the unit torus.
//!
//! A [`PeriodicGrid`] of size `n` carries the nodes `x = (i/n, j/n)`,
//! `0 <= i, j < n`, with no duplicated boundary nodes. Fields store one value
//! per node per component, row-major with `x1` fastest (`j * n + i`).

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct PeriodicGrid {
    n: usize,
}

impl TryFrom<usize> for PeriodicGrid {
    type Error = Error;
    fn try_from(n: usize) -> Result<Self> {
        Self::new(n)
    }
}

impl From<PeriodicGrid> for usize {
    fn from(g: PeriodicGrid) -> usize {
        g.n
    }
}

impl PeriodicGrid {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 || !n.is_power_of_two() {
            return Err(Error::InvalidGrid(format!(
                "nodes per side must be a power of two >= 2, got {n}"
            )));
        }
        Ok(Self { n })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n * self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    /// Quadrature weight of one node, `h^2`.
    #[inline]
    pub fn cell_area(&self) -> f64 {
        self.h() * self.h()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.n + i
    }

    /// Index of node `(i + di, j + dj)` with periodic wrap-around.
    #[inline]
    pub fn offset(&self, i: usize, j: usize, di: isize, dj: isize) -> usize {
        let n = self.n as isize;
        let ii = (i as isize + di).rem_euclid(n) as usize;
        let jj = (j as isize + dj).rem_euclid(n) as usize;
        jj * self.n + ii
    }

    #[inline]
    pub fn coord(&self, i: usize, j: usize) -> [f64; 2] {
        [i as f64 / self.n as f64, j as f64 / self.n as f64]
    }

    /// `(i, j, x)` for every node in storage order.
    pub fn nodes(&self) -> impl Iterator<Item = (usize, usize, [f64; 2])> + '_ {
        (0..self.n).flat_map(move |j| (0..self.n).map(move |i| (i, j, self.coord(i, j))))
    }

    pub fn ensure_same(&self, other: &PeriodicGrid) -> Result<()> {
        if self.n != other.n {
            return Err(Error::GridMismatch {
                expected: self.n,
                found: other.n,
            });
        }
        Ok(())
    }
}

fn check_finite<T: Scalar>(values: &[T], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField<T> {
    pub grid: PeriodicGrid,
    pub values: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorField<T> {
    pub grid: PeriodicGrid,
    pub components: [Vec<T>; 2],
}

/// Symmetric 2x2 matrix per node, stored as three planes.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrixField<T> {
    pub grid: PeriodicGrid,
    pub a11: Vec<T>,
    pub a12: Vec<T>,
    pub a22: Vec<T>,
}

impl<T: Scalar> ScalarField<T> {
    pub fn new(grid: PeriodicGrid, values: Vec<T>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        check_finite(&values, "scalar field")?;
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: PeriodicGrid) -> Self {
        Self {
            grid,
            values: vec![T::zero(); grid.len()],
        }
    }

    pub fn from_fn(grid: PeriodicGrid, f: impl Fn([f64; 2]) -> f64) -> Self {
        let values = grid.nodes().map(|(_, _, x)| T::lit(f(x))).collect();
        Self { grid, values }
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.values[self.grid.index(i, j)]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|v| v.as_f64()).sum::<f64>() / self.grid.len() as f64
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Field `u(x - s h)` for an integer node shift `s`.
    pub fn shifted(&self, di: isize, dj: isize) -> Self {
        let g = self.grid;
        let mut values = vec![T::zero(); g.len()];
        for j in 0..g.n() {
            for i in 0..g.n() {
                values[g.offset(i, j, di, dj)] = self.values[g.index(i, j)];
            }
        }
        Self { grid: g, values }
    }
}

impl<T: Scalar> VectorField<T> {
    pub fn zeros(grid: PeriodicGrid) -> Self {
        Self {
            grid,
            components: [vec![T::zero(); grid.len()], vec![T::zero(); grid.len()]],
        }
    }
}

impl<T: Scalar> SymMatrixField<T> {
    pub fn zeros(grid: PeriodicGrid) -> Self {
        let z = vec![T::zero(); grid.len()];
        Self {
            grid,
            a11: z.clone(),
            a12: z.clone(),
            a22: z,
        }
    }

    #[inline]
    pub fn at(&self, node: usize) -> [T; 3] {
        [self.a11[node], self.a12[node], self.a22[node]]
    }
}

/// Values that have a pointwise Euclidean magnitude at each node.
pub trait NodalField {
    fn grid(&self) -> PeriodicGrid;
    /// Euclidean (Frobenius for matrices) magnitude at a node, in `f64`.
    fn magnitude(&self, node: usize) -> f64;
    fn all_finite(&self) -> bool;
}

impl<T: Scalar> NodalField for ScalarField<T> {
    fn grid(&self) -> PeriodicGrid {
        self.grid
    }
    fn magnitude(&self, node: usize) -> f64 {
        self.values[node].as_f64().abs()
    }
    fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl<T: Scalar> NodalField for VectorField<T> {
    fn grid(&self) -> PeriodicGrid {
        self.grid
    }
    fn magnitude(&self, node: usize) -> f64 {
        self.components[0][node]
            .as_f64()
            .hypot(self.components[1][node].as_f64())
    }
    fn all_finite(&self) -> bool {
        self.components.iter().flatten().all(|v| v.is_finite())
    }
}

impl<T: Scalar> NodalField for SymMatrixField<T> {
    fn grid(&self) -> PeriodicGrid {
        self.grid
    }
    fn magnitude(&self, node: usize) -> f64 {
        let [a, b, c] = self.at(node).map(|v| v.as_f64());
        (a * a + 2.0 * b * b + c * c).sqrt()
    }
    fn all_finite(&self) -> bool {
        self.a11
            .iter()
            .chain(&self.a12)
            .chain(&self.a22)
            .all(|v| v.is_finite())
    }
}

/// `(sum_nodes |u|^p h^2)^(1/p)`, or the nodal maximum for `p = inf`.
pub fn lp_norm<F: NodalField + ?Sized>(u: &F, p: f64) -> Result<f64> {
    if p.is_nan() || p < 1.0 {
        return Err(Error::InvalidArgument(format!("norm exponent must be >= 1, got {p}")));
    }
    if !u.all_finite() {
        return Err(Error::NonFinite("norm input"));
    }
    let g = u.grid();
    let max = (0..g.len()).map(|q| u.magnitude(q)).fold(0.0, f64::max);
    if p.is_infinite() || max == 0.0 {
        return Ok(max);
    }
    // scaled by the max so that large p does not underflow
    let sum: f64 = (0..g.len()).map(|q| (u.magnitude(q) / max).powf(p)).sum();
    Ok(max * (sum * g.cell_area()).powf(1.0 / p))
}

/// Anisotropic total variation with forward differences and periodic wrap.
pub fn total_variation<T: Scalar>(u: &ScalarField<T>) -> f64 {
    let g = u.grid;
    let mut tv = 0.0;
    for j in 0..g.n() {
        for i in 0..g.n() {
            let here = u.values[g.index(i, j)].as_f64();
            let right = u.values[g.offset(i, j, 1, 0)].as_f64();
            let up = u.values[g.offset(i, j, 0, 1)].as_f64();
            tv += (right - here).abs() + (up - here).abs();
        }
    }
    tv * g.h()
}

/// Fourier differentiation on a fixed grid with a cached FFT plan.
///
/// Mode `k` is multiplied by `2 pi i k`; the Nyquist mode of the
/// differentiated direction is zeroed, so the operator is real and
/// skew-adjoint.
#[derive(Debug, Clone)]
pub struct SpectralDiff<T: Scalar> {
    n: usize,
    fft: Fft2<T>,
    spec: Vec<Complex<T>>,
    work: Vec<Complex<T>>,
    real: Vec<T>,
}

impl<T: Scalar> SpectralDiff<T> {
    pub fn new(grid: PeriodicGrid) -> Result<Self> {
        if grid.n() < 4 {
            return Err(Error::InvalidGrid("spectral differentiation needs n >= 4".into()));
        }
        let fft = Fft2::new(grid.n());
        let len = fft.half_len();
        let zero = Complex::new(T::zero(), T::zero());
        Ok(Self {
            n: grid.n(),
            fft,
            spec: vec![zero; len],
            work: vec![zero; len],
            real: vec![T::zero(); grid.len()],
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Writes `d/dx1 u` and `d/dx2 u` into `d1`, `d2`.
    pub fn gradient_into(&mut self, u: &[T], d1: &mut [T], d2: &mut [T]) {
        let n = self.n;
        let half = n / 2 + 1;
        self.fft.forward(u, &mut self.spec);
        let two_pi = T::TAU();
        for dir in 0..2 {
            for k2i in 0..n {
                let k2 = if k2i <= n / 2 { k2i as i64 } else { k2i as i64 - n as i64 };
                for k1 in 0..half {
                    let (k, nyquist) = if dir == 0 {
                        (k1 as i64, k1 == n / 2)
                    } else {
                        (k2, k2i == n / 2)
                    };
                    let q = k2i * half + k1;
                    self.work[q] = if nyquist {
                        Complex::new(T::zero(), T::zero())
                    } else {
                        // (2 pi i k) * X
                        let f = two_pi * T::lit(k as f64);
                        let x = self.spec[q];
                        Complex::new(-f * x.im, f * x.re)
                    };
                }
            }
            let out = if dir == 0 { &mut *d1 } else { &mut *d2 };
            self.fft.inverse(&self.work, out);
        }
    }

    /// Adjoint of [`gradient_into`](Self::gradient_into): `D1^T g1 + D2^T g2`,
    /// accumulated into `out`. Since `D^T = -D` this is minus the spectral
    /// divergence of `(g1, g2)`.
    pub fn gradient_adjoint_add(&mut self, g1: &[T], g2: &[T], out: &mut [T]) {
        let n = self.n;
        let half = n / 2 + 1;
        let two_pi = T::TAU();
        self.fft.forward(g1, &mut self.spec);
        self.fft.forward(g2, &mut self.work);
        for k2i in 0..n {
            let k2 = if k2i <= n / 2 { k2i as i64 } else { k2i as i64 - n as i64 };
            for k1 in 0..half {
                let q = k2i * half + k1;
                let f1 = if k1 == n / 2 { T::zero() } else { two_pi * T::lit(k1 as f64) };
                let f2 = if k2i == n / 2 { T::zero() } else { two_pi * T::lit(k2 as f64) };
                let (a, b) = (self.spec[q], self.work[q]);
                // -(i f1 a + i f2 b)
                let re = f1 * a.im + f2 * b.im;
                let im = -(f1 * a.re + f2 * b.re);
                self.spec[q] = Complex::new(re, im);
            }
        }
        let len = n * n;
        if self.real.len() != len {
            self.real = vec![T::zero(); len];
        }
        self.fft.inverse(&self.spec, &mut self.real);
        for (o, v) in out.iter_mut().zip(&self.real) {
            *o += *v;
        }
    }
}

/// Gradient by Fourier differentiation; exact for band-limited fields.
pub fn spectral_gradient<T: Scalar>(u: &ScalarField<T>) -> Result<VectorField<T>> {
    check_finite(&u.values, "spectral gradient input")?;
    let mut diff = SpectralDiff::new(u.grid)?;
    let mut out = VectorField::zeros(u.grid);
    let [d1, d2] = &mut out.components;
    diff.gradient_into(&u.values, d1, d2);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn grid(n: usize) -> PeriodicGrid {
        PeriodicGrid::new(n).unwrap()
    }

    #[test]
    fn grid_rejects_non_powers_of_two() {
        assert!(PeriodicGrid::new(12).is_err());
        assert!(PeriodicGrid::new(0).is_err());
        assert!(PeriodicGrid::new(64).is_ok());
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let u = ScalarField::<f64>::from_fn(grid(16), |_| 3.0);
        let g = spectral_gradient(&u).unwrap();
        assert!(g.components.iter().flatten().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn gradient_of_sine_matches_analytic_derivative() {
        let g = grid(32);
        let u = ScalarField::<f64>::from_fn(g, |x| (2.0 * PI * x[0]).sin());
        let du = spectral_gradient(&u).unwrap();
        for (i, j, x) in g.nodes() {
            let q = g.index(i, j);
            assert!((du.components[0][q] - 2.0 * PI * (2.0 * PI * x[0]).cos()).abs() < 1e-10);
            assert!(du.components[1][q].abs() < 1e-10);
        }
    }

    #[test]
    fn gradient_energy_matches_parseval() {
        // random band-limited field: modes |k_i| <= 5 on n = 32
        let g = grid(32);
        let mut coeffs = Vec::new();
        let mut s = 12345u64;
        let mut rnd = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        for k1 in -5i64..=5 {
            for k2 in -5i64..=5 {
                coeffs.push((k1, k2, rnd(), rnd()));
            }
        }
        let u = ScalarField::<f64>::from_fn(g, |x| {
            coeffs
                .iter()
                .map(|&(k1, k2, a, b)| {
                    let t = 2.0 * PI * (k1 as f64 * x[0] + k2 as f64 * x[1]);
                    a * t.cos() + b * t.sin()
                })
                .sum()
        });
        // Parseval: ||grad u||^2 = sum_k (2 pi |k|)^2 |u_k|^2 with u_k the
        // unit-torus Fourier coefficients, taken here from a brute-force DFT
        let n = g.n();
        let mut spectral = 0.0;
        for k1 in -(n as i64) / 2 + 1..(n as i64) / 2 {
            for k2 in -(n as i64) / 2 + 1..(n as i64) / 2 {
                let mut c = Complex::new(0.0, 0.0);
                for (i, j, x) in g.nodes() {
                    let t = -2.0 * PI * (k1 as f64 * x[0] + k2 as f64 * x[1]);
                    c += Complex::new(t.cos(), t.sin()) * u.values[g.index(i, j)];
                }
                c /= (n * n) as f64;
                spectral += 4.0 * PI * PI * ((k1 * k1 + k2 * k2) as f64) * c.norm_sqr();
            }
        }
        let du = spectral_gradient(&u).unwrap();
        let nodal = lp_norm(&du, 2.0).unwrap().powi(2);
        assert!((nodal - spectral).abs() / spectral < 1e-10);
    }

    #[test]
    fn gradient_rejects_non_finite_and_tiny_grids() {
        let mut u = ScalarField::<f64>::zeros(grid(8));
        u.values[3] = f64::NAN;
        assert!(matches!(spectral_gradient(&u), Err(Error::NonFinite(_))));
        assert!(spectral_gradient(&ScalarField::<f64>::zeros(grid(2))).is_err());
    }

    #[test]
    fn adjoint_is_transpose_of_gradient() {
        let g = grid(16);
        let u = ScalarField::<f64>::from_fn(g, |x| (x[0] * 7.1).sin() * (x[1] * 3.3 + 0.2).cos());
        let w1 = ScalarField::<f64>::from_fn(g, |x| (x[0] * x[1] * 9.0).cos());
        let w2 = ScalarField::<f64>::from_fn(g, |x| x[0] - x[1] * x[1]);
        let mut d = SpectralDiff::new(g).unwrap();
        let mut d1 = vec![0.0; g.len()];
        let mut d2 = vec![0.0; g.len()];
        d.gradient_into(&u.values, &mut d1, &mut d2);
        let lhs: f64 = (0..g.len()).map(|q| d1[q] * w1.values[q] + d2[q] * w2.values[q]).sum();
        let mut adj = vec![0.0; g.len()];
        d.gradient_adjoint_add(&w1.values, &w2.values, &mut adj);
        let rhs: f64 = (0..g.len()).map(|q| adj[q] * u.values[q]).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn unit_constant_has_unit_norm() {
        let u = ScalarField::<f64>::from_fn(grid(8), |_| 1.0);
        for p in [1.0, 2.0, 3.5, 10.0, f64::INFINITY] {
            assert!((lp_norm(&u, p).unwrap() - 1.0).abs() < 1e-14);
        }
        assert!(lp_norm(&u, 0.5).is_err());
    }

    #[test]
    fn strip_indicator_measure() {
        let g = grid(64);
        let u = ScalarField::<f64>::from_fn(g, |x| if x[0] < 0.5 { 1.0 } else { 0.0 });
        assert!((lp_norm(&u, 1.0).unwrap() - 0.5).abs() <= g.h());
    }

    #[test]
    fn l2_norm_matches_compensated_brute_force() {
        let g = grid(8);
        let u = ScalarField::<f64>::from_fn(g, |x| (x[0] * 13.0 + x[1] * 5.0).sin() * 1e3 + 1e-3);
        // Neumaier-compensated summation as the extended-precision reference
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for v in &u.values {
            let term = v * v / 64.0;
            let t = sum + term;
            comp += if sum.abs() >= term.abs() { (sum - t) + term } else { (term - t) + sum };
            sum = t;
        }
        let want = (sum + comp).sqrt();
        assert!((lp_norm(&u, 2.0).unwrap() - want).abs() / want < 1e-12);
    }

    #[test]
    fn total_variation_examples() {
        let g = grid(32);
        let c = ScalarField::<f64>::from_fn(g, |_| 2.5);
        assert_eq!(total_variation(&c), 0.0);
        let strip = ScalarField::<f64>::from_fn(g, |x| if x[0] < 0.5 { 1.0 } else { 0.0 });
        assert!((total_variation(&strip) - 2.0).abs() < 1e-14);
        let scaled = strip.map(|v| -3.0 * v);
        assert!((total_variation(&scaled) - 3.0 * total_variation(&strip)).abs() < 1e-13);
    }

    proptest! {
        #[test]
        fn spectral_gradient_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, s in 0u64..1000) {
            let g = grid(16);
            let f = |x: [f64; 2], k: f64| (x[0] * (k + 1.0) + x[1] * 2.0 + s as f64).sin();
            let u = ScalarField::<f64>::from_fn(g, |x| f(x, 1.0));
            let v = ScalarField::<f64>::from_fn(g, |x| f(x, 4.0) * x[1]);
            let w = ScalarField { grid: g, values: (0..g.len()).map(|q| a * u.values[q] + b * v.values[q]).collect() };
            let (gu, gv, gw) = (spectral_gradient(&u).unwrap(), spectral_gradient(&v).unwrap(), spectral_gradient(&w).unwrap());
            for c in 0..2 {
                for q in 0..g.len() {
                    let want = a * gu.components[c][q] + b * gv.components[c][q];
                    prop_assert!((gw.components[c][q] - want).abs() < 1e-11);
                }
            }
        }

        #[test]
        fn lp_norms_monotone_in_p(seed in 0u64..500, p in 1.0f64..6.0, dq in 0.0f64..6.0) {
            let g = grid(8);
            let u = ScalarField::<f64>::from_fn(g, |x| (x[0] * 31.0 + seed as f64).sin() * (x[1] * 17.0).cos());
            let q = p + dq;
            prop_assert!(lp_norm(&u, p).unwrap() <= lp_norm(&u, q).unwrap() * (1.0 + 1e-12));
            prop_assert!(lp_norm(&u, q).unwrap() <= lp_norm(&u, f64::INFINITY).unwrap() * (1.0 + 1e-12));
        }

        #[test]
        fn tv_of_indicator_counts_sign_changes(bits in proptest::collection::vec(any::<bool>(), 64)) {
            let g = grid(8);
            let u = ScalarField::<f64> { grid: g, values: bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect() };
            let mut edges = 0;
            for j in 0..8 {
                for i in 0..8 {
                    let here = bits[g.index(i, j)];
                    edges += (here != bits[g.offset(i, j, 1, 0)]) as usize;
                    edges += (here != bits[g.offset(i, j, 0, 1)]) as usize;
                }
            }
            prop_assert!((total_variation(&u) - edges as f64 * g.h()).abs() < 1e-14);
        }
    }
}
