//! Q1 finite elements for the periodic cell problems
//! `-div(A grad chi_l) = div(A e_l)` on the uniform grid.
//!
//! Element `(i, j)` is the square with lower-left node `(i, j)`; its local
//! nodes are `(i, j), (i+1, j), (i, j+1), (i+1, j+1)` and its coefficient is
//! the nodal matrix at the lower-left node. The operator is stored as a
//! 9-point stencil per node. All reductions run serially in node order, so a
//! solve is bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{PeriodicGrid, ScalarField, VectorField};
use crate::microstructure::{sym_eigenvalues, CoefficientField, Microstructure};

/// Integrals over the reference square of products of shape-function
/// derivatives: `[d_s d_s, d_s d_t, d_t d_t]`, local node order as above.
pub type ReferenceStiffness = [[[f64; 4]; 4]; 3];

/// Reference-square derivatives of the four bilinear shape functions.
fn shape_derivs(s: f64, t: f64) -> ([f64; 4], [f64; 4]) {
    (
        [-(1.0 - t), 1.0 - t, -t, t],
        [-(1.0 - s), -s, 1.0 - s, s],
    )
}

/// Two-point Gauss abscissae on `[0, 1]`.
pub const GAUSS: [f64; 2] = [0.211_324_865_405_187_1, 0.788_675_134_594_812_9];

pub fn reference_stiffness() -> ReferenceStiffness {
    let mut k = [[[0.0; 4]; 4]; 3];
    for &s in &GAUSS {
        for &t in &GAUSS {
            let (ds, dt) = shape_derivs(s, t);
            for a in 0..4 {
                for b in 0..4 {
                    k[0][a][b] += 0.25 * ds[a] * ds[b];
                    k[1][a][b] += 0.25 * ds[a] * dt[b];
                    k[2][a][b] += 0.25 * dt[a] * dt[b];
                }
            }
        }
    }
    k
}

/// `int d_s phi_a` and `int d_t phi_a` over the reference square.
pub const MEAN_DS: [f64; 4] = [-0.5, 0.5, -0.5, 0.5];
pub const MEAN_DT: [f64; 4] = [-0.5, -0.5, 0.5, 0.5];

const LOCAL: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];

/// Stencil slot of neighbour offset `(di, dj)`, both in `-1..=1`.
#[inline]
fn slot(di: isize, dj: isize) -> usize {
    ((dj + 1) * 3 + (di + 1)) as usize
}

fn element_nodes(g: PeriodicGrid, i: usize, j: usize) -> [usize; 4] {
    LOCAL.map(|(a, b)| g.offset(i, j, a as isize, b as isize))
}

/// Element stiffness for the symmetric coefficient `[a11, a12, a22]`.
fn element_matrix(k: &ReferenceStiffness, [a11, a12, a22]: [f64; 3]) -> [[f64; 4]; 4] {
    let mut m = [[0.0; 4]; 4];
    for a in 0..4 {
        for b in 0..4 {
            m[a][b] = a11 * k[0][a][b] + a12 * (k[1][a][b] + k[1][b][a]) + a22 * k[2][a][b];
        }
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveOptions {
    pub cg_tolerance: f64,
    /// Defaults to `10 n^2` when unset.
    pub max_iterations: Option<usize>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { cg_tolerance: 1e-10, max_iterations: None }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.cg_tolerance > 0.0 && self.cg_tolerance < 1.0) {
            return Err(Error::Config(format!("cg_tolerance must lie in (0, 1), got {}", self.cg_tolerance)));
        }
        if self.max_iterations == Some(0) {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        Ok(())
    }

    fn iteration_limit(&self, g: PeriodicGrid) -> usize {
        self.max_iterations.unwrap_or(10 * g.len())
    }
}

/// Assembled periodic bilinear form `a(u, v) = sum_e int grad v . A_e grad u`.
#[derive(Clone, Debug)]
pub struct CellOperator {
    grid: PeriodicGrid,
    /// `stencil[p * 9 + slot]`.
    stencil: Vec<f64>,
    diag: Vec<f64>,
    elements: Vec<[f64; 3]>,
}

impl CellOperator {
    pub fn assemble(a: &CoefficientField) -> Result<Self> {
        let g = a.grid();
        let mut elements = Vec::with_capacity(g.len());
        for node in 0..g.len() {
            let m = a.at(node);
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("coefficient field"));
            }
            let (lo, _) = sym_eigenvalues(m);
            if lo <= 0.0 {
                return Err(Error::NotPositiveDefinite { node, min_eig: lo });
            }
            elements.push(m);
        }
        let k = reference_stiffness();
        let mut stencil = vec![0.0; 9 * g.len()];
        for j in 0..g.n() {
            for i in 0..g.n() {
                let ke = element_matrix(&k, elements[g.index(i, j)]);
                let nodes = element_nodes(g, i, j);
                for a in 0..4 {
                    for b in 0..4 {
                        let di = LOCAL[b].0 as isize - LOCAL[a].0 as isize;
                        let dj = LOCAL[b].1 as isize - LOCAL[a].1 as isize;
                        stencil[nodes[a] * 9 + slot(di, dj)] += ke[a][b];
                    }
                }
            }
        }
        let diag = (0..g.len()).map(|p| stencil[p * 9 + slot(0, 0)]).collect();
        Ok(Self { grid: g, stencil, diag, elements })
    }

    pub fn grid(&self) -> PeriodicGrid {
        self.grid
    }

    /// The nine stencil weights of node `p`, ordered by `(dj, di)` row-major.
    pub fn stencil_at(&self, p: usize) -> &[f64] {
        &self.stencil[p * 9..p * 9 + 9]
    }

    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        let g = self.grid;
        let n = g.n();
        for j in 0..n {
            let rows = [(j + n - 1) % n, j, (j + 1) % n];
            for i in 0..n {
                let cols = [(i + n - 1) % n, i, (i + 1) % n];
                let p = j * n + i;
                let w = &self.stencil[p * 9..p * 9 + 9];
                let mut acc = 0.0;
                for (r, &jj) in rows.iter().enumerate() {
                    for (c, &ii) in cols.iter().enumerate() {
                        acc += w[r * 3 + c] * x[jj * n + ii];
                    }
                }
                y[p] = acc;
            }
        }
    }

    /// Load vector of `v -> -int grad v . A e_l`.
    pub fn rhs(&self, l: usize) -> Vec<f64> {
        let g = self.grid;
        let h = g.h();
        let mut b = vec![0.0; g.len()];
        for j in 0..g.n() {
            for i in 0..g.n() {
                let [a11, a12, a22] = self.elements[g.index(i, j)];
                let (f1, f2) = if l == 0 { (a11, a12) } else { (a12, a22) };
                for (a, node) in element_nodes(g, i, j).into_iter().enumerate() {
                    b[node] -= h * (f1 * MEAN_DS[a] + f2 * MEAN_DT[a]);
                }
            }
        }
        b
    }

    /// Element coefficient of element `e` (lower-left node index).
    pub fn element_coefficient(&self, e: usize) -> [f64; 3] {
        self.elements[e]
    }

    pub fn energy(&self, u: &[f64], v: &[f64]) -> f64 {
        let mut y = vec![0.0; u.len()];
        self.apply(u, &mut y);
        dot(&y, v)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn project_mean(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
}

/// Outcome of one preconditioned CG run.
#[derive(Clone, Debug)]
pub struct CgReport {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Jacobi-preconditioned CG on the mean-zero subspace.
pub fn pcg(op: &CellOperator, b: &[f64], x: &mut [f64], opts: &SolveOptions) -> Result<CgReport> {
    opts.validate()?;
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("right-hand side"));
    }
    let len = b.len();
    let mut rhs = b.to_vec();
    project_mean(&mut rhs);
    let bnorm = dot(&rhs, &rhs).sqrt();
    x.iter_mut().for_each(|v| *v = 0.0);
    if bnorm == 0.0 {
        return Ok(CgReport { iterations: 0, relative_residual: 0.0 });
    }
    let limit = opts.iteration_limit(op.grid);
    let mut r = rhs;
    let mut z: Vec<f64> = r.iter().zip(&op.diag).map(|(r, d)| r / d).collect();
    project_mean(&mut z);
    let mut p = z.clone();
    let mut q = vec![0.0; len];
    let mut rz = dot(&r, &z);
    let mut history = Vec::new();
    for it in 1..=limit {
        op.apply(&p, &mut q);
        let pq = dot(&p, &q);
        if !(pq.is_finite() && pq > 0.0) {
            return Err(Error::NonFinite("conjugate gradient step"));
        }
        let alpha = rz / pq;
        for k in 0..len {
            x[k] += alpha * p[k];
            r[k] -= alpha * q[k];
        }
        let res = dot(&r, &r).sqrt() / bnorm;
        if !res.is_finite() {
            return Err(Error::NonFinite("conjugate gradient residual"));
        }
        history.push(res);
        if res <= opts.cg_tolerance {
            project_mean(x);
            return Ok(CgReport { iterations: it, relative_residual: res });
        }
        for k in 0..len {
            z[k] = r[k] / op.diag[k];
        }
        project_mean(&mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..len {
            p[k] = z[k] + beta * p[k];
        }
    }
    Err(Error::NonConvergence {
        iterations: limit,
        residual: history.last().copied().unwrap_or(1.0),
        history,
    })
}

/// Both correctors with their nodal gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSolution {
    pub grid: PeriodicGrid,
    pub chi: [ScalarField<f64>; 2],
    /// `grad_chi[l]` = nodal average of the four adjacent element gradients.
    pub grad_chi: [VectorField<f64>; 2],
    /// Largest final relative residual of the two solves.
    pub residual_norm: f64,
    /// Total CG iterations over both solves.
    pub iterations: usize,
}

impl CellSolution {
    /// `(sum_l |chi_l|_{H^1}^2)^{1/2}`, integrated exactly per element.
    pub fn h1_seminorm(&self) -> f64 {
        (h1_seminorm_sq(&self.chi[0]) + h1_seminorm_sq(&self.chi[1])).sqrt()
    }

    pub fn shifted(&self, di: isize, dj: isize) -> Self {
        let sv = |v: &VectorField<f64>| VectorField {
            grid: v.grid,
            components: [0, 1].map(|c| {
                ScalarField { grid: v.grid, values: v.components[c].clone() }.shifted(di, dj).values
            }),
        };
        Self {
            grid: self.grid,
            chi: [self.chi[0].shifted(di, dj), self.chi[1].shifted(di, dj)],
            grad_chi: [sv(&self.grad_chi[0]), sv(&self.grad_chi[1])],
            residual_norm: self.residual_norm,
            iterations: self.iterations,
        }
    }
}

/// Gradient of the bilinear interpolant at the centre of element `(i, j)`.
pub fn element_center_gradient(u: &ScalarField<f64>, i: usize, j: usize) -> [f64; 2] {
    let g = u.grid;
    let [u0, u1, u2, u3] = element_nodes(g, i, j).map(|q| u.values[q]);
    let h = g.h();
    [(u1 - u0 + u3 - u2) / (2.0 * h), (u2 - u0 + u3 - u1) / (2.0 * h)]
}

/// Gradients of the bilinear interpolant at the 2x2 Gauss points of every
/// element, `[e * 4 + q]` with `q` iterating `t` outer, `s` inner.
pub fn gauss_gradients(u: &ScalarField<f64>) -> Vec<[f64; 2]> {
    let g = u.grid;
    let h = g.h();
    let mut out = Vec::with_capacity(4 * g.len());
    for j in 0..g.n() {
        for i in 0..g.n() {
            let ue = element_nodes(g, i, j).map(|q| u.values[q]);
            for &t in &GAUSS {
                for &s in &GAUSS {
                    let (ds, dt) = shape_derivs(s, t);
                    let gx = (0..4).map(|a| ds[a] * ue[a]).sum::<f64>() / h;
                    let gy = (0..4).map(|a| dt[a] * ue[a]).sum::<f64>() / h;
                    out.push([gx, gy]);
                }
            }
        }
    }
    out
}

pub fn nodal_gradient(u: &ScalarField<f64>) -> VectorField<f64> {
    let g = u.grid;
    let mut centre = vec![[0.0; 2]; g.len()];
    for j in 0..g.n() {
        for i in 0..g.n() {
            centre[g.index(i, j)] = element_center_gradient(u, i, j);
        }
    }
    let mut out = VectorField::zeros(g);
    for j in 0..g.n() {
        for i in 0..g.n() {
            let p = g.index(i, j);
            for (di, dj) in [(-1, -1), (0, -1), (-1, 0), (0, 0)] {
                let e = g.offset(i, j, di, dj);
                out.components[0][p] += 0.25 * centre[e][0];
                out.components[1][p] += 0.25 * centre[e][1];
            }
        }
    }
    out
}

/// `int |grad u_h|^2` for the bilinear interpolant, exact.
pub fn h1_seminorm_sq(u: &ScalarField<f64>) -> f64 {
    let g = u.grid;
    let k = reference_stiffness();
    let mut total = 0.0;
    for j in 0..g.n() {
        for i in 0..g.n() {
            let ue = element_nodes(g, i, j).map(|q| u.values[q]);
            for a in 0..4 {
                for b in 0..4 {
                    total += ue[a] * (k[0][a][b] + k[2][a][b]) * ue[b];
                }
            }
        }
    }
    total
}

pub fn solve_with(op: &CellOperator, opts: &SolveOptions) -> Result<CellSolution> {
    let g = op.grid;
    let mut chi = [ScalarField::zeros(g), ScalarField::zeros(g)];
    let mut residual_norm: f64 = 0.0;
    let mut iterations = 0;
    for (l, c) in chi.iter_mut().enumerate() {
        let b = op.rhs(l);
        let report = pcg(op, &b, &mut c.values, opts)?;
        residual_norm = residual_norm.max(report.relative_residual);
        iterations += report.iterations;
    }
    let grad_chi = [nodal_gradient(&chi[0]), nodal_gradient(&chi[1])];
    Ok(CellSolution { grid: g, chi, grad_chi, residual_norm, iterations })
}

pub fn solve_cell(a: &CoefficientField, opts: &SolveOptions) -> Result<CellSolution> {
    solve_with(&CellOperator::assemble(a)?, opts)
}

/// Bilinear interpolation of a nodal field onto the grid of size `2n`.
pub fn prolongate(u: &ScalarField<f64>) -> Result<ScalarField<f64>> {
    let g = u.grid;
    let fine = PeriodicGrid::new(2 * g.n())?;
    let mut values = vec![0.0; fine.len()];
    for j in 0..fine.n() {
        for i in 0..fine.n() {
            let (ci, cj) = (i / 2, j / 2);
            let (oi, oj) = ((i % 2) as isize, (j % 2) as isize);
            let mut acc = 0.0;
            let mut w = 0.0;
            for dj in 0..=oj {
                for di in 0..=oi {
                    acc += u.values[g.offset(ci, cj, di, dj)];
                    w += 1.0;
                }
            }
            values[fine.index(i, j)] = acc / w;
        }
    }
    Ok(ScalarField { grid: fine, values })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub n: usize,
    /// `|chi_n - chi_2n|_{H^1}` with `chi_n` interpolated onto the finer grid.
    pub h1_difference: f64,
    /// Frobenius norm of the difference of homogenized tensors.
    pub abar_difference: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    /// Least-squares slopes of `-log2(difference)` against `log2 n`.
    pub h1_rate: f64,
    pub abar_rate: f64,
}

/// Least-squares slope of `-log y` against `log x`; zero differences are
/// skipped, NaN when fewer than two remain.
pub fn fitted_rate(xs: &[f64], ys: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(_, y)| **y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let m = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / m, sy / m);
    let num: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    -num / den
}

/// Self-convergence of one continuum microstructure over nested grids.
pub fn convergence_study(m: &Microstructure, sizes: &[usize], opts: &SolveOptions) -> Result<ConvergenceTable> {
    if sizes.len() < 2 || sizes.windows(2).any(|w| w[1] != 2 * w[0]) {
        return Err(Error::InvalidArgument("grid sizes must double at every step".into()));
    }
    let mut sols = Vec::new();
    for &n in sizes {
        let a = m.rasterize(PeriodicGrid::new(n)?)?;
        let sol = solve_cell(&a, opts)?;
        let abar = crate::homogenize::compute_abar(&a, &sol)?.abar;
        sols.push((sol, abar));
    }
    let mut rows = Vec::new();
    for w in sols.windows(2) {
        let (coarse, ac) = &w[0];
        let (fine, af) = &w[1];
        let mut diff = 0.0;
        for l in 0..2 {
            let mut p = prolongate(&coarse.chi[l])?;
            for (v, f) in p.values.iter_mut().zip(&fine.chi[l].values) {
                *v -= f;
            }
            diff += h1_seminorm_sq(&p);
        }
        let mut ad = 0.0;
        for r in 0..2 {
            for c in 0..2 {
                ad += (ac[r][c] - af[r][c]).powi(2);
            }
        }
        rows.push(ConvergenceRow { n: coarse.grid.n(), h1_difference: diff.sqrt(), abar_difference: ad.sqrt() });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let h1: Vec<f64> = rows.iter().map(|r| r.h1_difference).collect();
    let ab: Vec<f64> = rows.iter().map(|r| r.abar_difference).collect();
    Ok(ConvergenceTable { h1_rate: fitted_rate(&xs, &h1), abar_rate: fitted_rate(&xs, &ab), rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microstructure::{self as ms, MicrostructureKind, SamplerConfig};
    use rand::{Rng, SeedableRng};

    fn grid(n: usize) -> PeriodicGrid {
        PeriodicGrid::new(n).unwrap()
    }

    #[test]
    fn reference_stiffness_closed_form() {
        let k = reference_stiffness();
        // int (1-t)^2 = 1/3, int t(1-t) = 1/6
        let want_ss = [
            [1.0 / 3.0, -1.0 / 3.0, 1.0 / 6.0, -1.0 / 6.0],
            [-1.0 / 3.0, 1.0 / 3.0, -1.0 / 6.0, 1.0 / 6.0],
            [1.0 / 6.0, -1.0 / 6.0, 1.0 / 3.0, -1.0 / 3.0],
            [-1.0 / 6.0, 1.0 / 6.0, -1.0 / 3.0, 1.0 / 3.0],
        ];
        for a in 0..4 {
            for b in 0..4 {
                assert!((k[0][a][b] - want_ss[a][b]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn identity_gives_q1_laplacian() {
        let a = ms::constant(grid(8), [1.0, 0.0, 1.0]);
        let op = CellOperator::assemble(&a).unwrap();
        for p in 0..64 {
            let w = op.stencil_at(p);
            for (s, &v) in w.iter().enumerate() {
                let want = if s == 4 { 8.0 / 3.0 } else { -1.0 / 3.0 };
                assert!((v - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn operator_is_symmetric_with_constant_kernel() {
        let c = SamplerConfig::new(MicrostructureKind::Voronoi, 3, 32);
        let a = ms::sample(&c, 0).unwrap();
        let op = CellOperator::assemble(&a).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let u: Vec<f64> = (0..1024).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..1024).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (uv, vu) = (op.energy(&u, &v), op.energy(&v, &u));
        assert!((uv - vu).abs() < 1e-12 * uv.abs().max(1.0));
        let mut y = vec![1.0; 1024];
        op.apply(&[3.5; 1024], &mut y);
        assert!(y.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn rejects_indefinite_coefficients() {
        let mut a = ms::constant(grid(4), [1.0, 0.0, 1.0]);
        a.entries.a12[5] = 2.0;
        assert!(matches!(CellOperator::assemble(&a), Err(Error::NotPositiveDefinite { node: 5, .. })));
    }

    #[test]
    fn constant_coefficient_has_zero_corrector() {
        let a = ms::constant(grid(16), [2.0, 0.3, 1.5]);
        let sol = solve_cell(&a, &SolveOptions::default()).unwrap();
        assert_eq!(sol.iterations, 0);
        assert!(sol.chi.iter().all(|c| c.values.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn layered_matches_closed_form() {
        let n = 64;
        let g = grid(n);
        let a = ms::layered(g, 1.0, 4.0);
        let sol = solve_cell(&a, &SolveOptions::default()).unwrap();
        let harmonic = 1.0 / (0.5 * (1.0 + 0.25));
        assert!((harmonic - 1.6f64).abs() < 1e-15);
        // chi_1(x) = int_0^x (a_h / a - 1)
        let exact = |x: f64| {
            if x <= 0.5 {
                (harmonic - 1.0) * x
            } else {
                (harmonic - 1.0) * 0.5 + (harmonic / 4.0 - 1.0) * (x - 0.5)
            }
        };
        let nodal: Vec<f64> = (0..n).map(|i| exact(i as f64 / n as f64)).collect();
        let mean = nodal.iter().sum::<f64>() / n as f64;
        let mut worst: f64 = 0.0;
        for (i, j, _) in g.nodes() {
            worst = worst.max((sol.chi[0].values[g.index(i, j)] - (nodal[i] - mean)).abs());
            worst = worst.max(sol.chi[1].values[g.index(i, j)].abs());
        }
        assert!(worst < 1e-8, "{worst}");
    }

    #[test]
    fn stability_bound_holds_for_samplers() {
        for kind in MicrostructureKind::RANDOM {
            for idx in 0..4 {
                let a = ms::sample(&SamplerConfig::new(kind, 13, 32), idx).unwrap();
                let sol = solve_cell(&a, &SolveOptions::default()).unwrap();
                let bound = 2f64.sqrt() * a.beta / a.alpha;
                assert!(sol.h1_seminorm() <= bound * (1.0 + 1e-6));
                for c in &sol.chi {
                    assert!(c.mean().abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn energy_identity() {
        let a = ms::sample(&SamplerConfig::new(MicrostructureKind::Smooth, 4, 32), 0).unwrap();
        let op = CellOperator::assemble(&a).unwrap();
        let opts = SolveOptions { cg_tolerance: 1e-13, ..Default::default() };
        let sol = solve_with(&op, &opts).unwrap();
        let g = a.grid();
        let h = g.h();
        for l in 0..2 {
            let chi = &sol.chi[l].values;
            let lhs = op.energy(chi, chi);
            // -sum_e int grad chi . A_e e_l, element integral of grad chi exact
            let mut rhs = 0.0;
            for j in 0..g.n() {
                for i in 0..g.n() {
                    let [a11, a12, a22] = a.at(g.index(i, j));
                    let gc = element_center_gradient(&sol.chi[l], i, j);
                    let ae = if l == 0 { [a11, a12] } else { [a12, a22] };
                    rhs -= h * h * (gc[0] * ae[0] + gc[1] * ae[1]);
                }
            }
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs(), "{lhs} {rhs}");
        }
    }

    #[test]
    fn scaling_invariance() {
        let a = ms::sample(&SamplerConfig::new(MicrostructureKind::Star, 4, 32), 1).unwrap();
        let s1 = solve_cell(&a, &SolveOptions::default()).unwrap();
        let s2 = solve_cell(&a.scaled(3.7), &SolveOptions::default()).unwrap();
        for l in 0..2 {
            for (x, y) in s1.chi[l].values.iter().zip(&s2.chi[l].values) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn translation_equivariance() {
        let a = ms::sample(&SamplerConfig::new(MicrostructureKind::Voronoi, 8, 32), 0).unwrap();
        let s = solve_cell(&a, &SolveOptions::default()).unwrap();
        let t = solve_cell(&a.shifted(1, 0), &SolveOptions::default()).unwrap();
        let shifted = s.shifted(1, 0);
        for l in 0..2 {
            for (x, y) in shifted.chi[l].values.iter().zip(&t.chi[l].values) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn non_convergence_carries_history() {
        let a = ms::sample(&SamplerConfig::new(MicrostructureKind::Smooth, 1, 16), 0).unwrap();
        let opts = SolveOptions { cg_tolerance: 1e-12, max_iterations: Some(3) };
        match solve_cell(&a, &opts) {
            Err(Error::NonConvergence { iterations, history, .. }) => {
                assert_eq!(iterations, 3);
                assert_eq!(history.len(), 3);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn nodal_gradient_of_linear_profile() {
        // periodic sawtooth is linear away from the wrap
        let g = grid(16);
        let u = ScalarField::<f64>::from_fn(g, |x| x[0] * 2.0 + x[1]);
        let d = nodal_gradient(&u);
        let p = g.index(5, 7);
        assert!((d.components[0][p] - 2.0).abs() < 1e-12);
        assert!((d.components[1][p] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prolongation_preserves_seminorm() {
        let g = grid(16);
        let u = ScalarField::<f64>::from_fn(g, |x| (6.0 * x[0]).sin() + x[1].cos());
        let p = prolongate(&u).unwrap();
        assert!((h1_seminorm_sq(&u) - h1_seminorm_sq(&p)).abs() < 1e-12);
    }

    #[test]
    fn layered_convergence_is_exact() {
        let m = ms::Microstructure::Layered { low: 1.0, high: 4.0 };
        let t = convergence_study(&m, &[16, 32, 64], &SolveOptions::default()).unwrap();
        for r in &t.rows {
            assert!(r.h1_difference < 1e-8 && r.abar_difference < 1e-8, "{r:?}");
        }
    }

    #[test]
    fn fitted_rate_of_power_law() {
        let xs = [8.0, 16.0, 32.0];
        let ys = xs.map(|x: f64| 3.0 * x.powf(-1.5));
        assert!((fitted_rate(&xs, &ys) - 1.5).abs() < 1e-12);
    }
}
