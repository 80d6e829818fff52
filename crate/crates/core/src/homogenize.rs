//! Homogenized tensor, Voigt-Reuss bounds and the relative tensor error.

use serde::{Deserialize, Serialize};

use crate::cellsolver::{element_center_gradient, CellSolution};
use crate::error::{Error, Result};
use crate::grid::ScalarField;
use crate::microstructure::CoefficientField;

pub type Matrix2 = [[f64; 2]; 2];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomogenizedTensor {
    pub abar: Matrix2,
    /// Frobenius norm of the arithmetic mean of `A`.
    pub a_m: f64,
    /// Frobenius norm of the harmonic mean of `A`.
    pub a_h: f64,
}

pub fn frobenius(m: &Matrix2) -> f64 {
    m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn frobenius_distance(a: &Matrix2, b: &Matrix2) -> f64 {
    let mut s = 0.0;
    for r in 0..2 {
        for c in 0..2 {
            s += (a[r][c] - b[r][c]).powi(2);
        }
    }
    s.sqrt()
}

/// `abar e_l = int A (e_l + grad chi_l)` with element-constant `A` and the
/// exact element integral of the bilinear gradient.
pub fn compute_abar(a: &CoefficientField, sol: &CellSolution) -> Result<HomogenizedTensor> {
    a.grid().ensure_same(&sol.grid)?;
    let abar = abar_matrix(a, &sol.chi);
    let (a_m, a_h) = voigt_reuss(a)?;
    Ok(HomogenizedTensor { abar, a_m, a_h })
}

/// Same quadrature as [`compute_abar`] applied to arbitrary nodal
/// correctors, e.g. network predictions.
pub fn abar_from_correctors(a: &CoefficientField, chi: [&[f64]; 2]) -> Result<Matrix2> {
    let g = a.grid();
    let fields = [
        ScalarField::new(g, chi[0].to_vec())?,
        ScalarField::new(g, chi[1].to_vec())?,
    ];
    Ok(abar_matrix(a, &fields))
}

fn abar_matrix(a: &CoefficientField, chi: &[ScalarField<f64>; 2]) -> Matrix2 {
    let g = a.grid();
    let area = g.cell_area();
    let mut abar = [[0.0; 2]; 2];
    for j in 0..g.n() {
        for i in 0..g.n() {
            let [a11, a12, a22] = a.at(g.index(i, j));
            for l in 0..2 {
                let [g1, g2] = element_center_gradient(&chi[l], i, j);
                let (v1, v2) = (g1 + if l == 0 { 1.0 } else { 0.0 }, g2 + if l == 1 { 1.0 } else { 0.0 });
                abar[0][l] += area * (a11 * v1 + a12 * v2);
                abar[1][l] += area * (a12 * v1 + a22 * v2);
            }
        }
    }
    abar
}

/// Frobenius norms `(a_m, a_h)` of the nodal arithmetic and harmonic means.
pub fn voigt_reuss(a: &CoefficientField) -> Result<(f64, f64)> {
    let len = a.grid().len() as f64;
    let mut mean = [0.0; 3];
    let mut inv = [0.0; 3];
    for q in 0..a.grid().len() {
        let [p, r, s] = a.at(q);
        let det = p * s - r * r;
        if !(det > 0.0 && p > 0.0) {
            return Err(Error::NotPositiveDefinite { node: q, min_eig: crate::microstructure::sym_eigenvalues([p, r, s]).0 });
        }
        mean[0] += p;
        mean[1] += r;
        mean[2] += s;
        inv[0] += s / det;
        inv[1] -= r / det;
        inv[2] += p / det;
    }
    let mean = mean.map(|v| v / len);
    let inv = inv.map(|v| v / len);
    let det = inv[0] * inv[2] - inv[1] * inv[1];
    let harm = [inv[2] / det, -inv[1] / det, inv[0] / det];
    let norm = |m: [f64; 3]| (m[0] * m[0] + 2.0 * m[1] * m[1] + m[2] * m[2]).sqrt();
    Ok((norm(mean), norm(harm)))
}

/// Smallest admissible `a_m - a_h`.
pub const MIN_SCALE: f64 = 1e-12;

/// `|abar_true - abar_pred|_F / (a_m - a_h)`.
pub fn rae(abar_true: &Matrix2, abar_pred: &Matrix2, a_m: f64, a_h: f64) -> Result<f64> {
    let scale = a_m - a_h;
    if !(scale >= MIN_SCALE) {
        return Err(Error::DegenerateScale(scale));
    }
    Ok(frobenius_distance(abar_true, abar_pred) / scale)
}
