//! Coefficient fields: the four random microstructure classes plus a few
//! deterministic fixtures with closed-form homogenized tensors.
//!
//! Sampling is split in two stages. [`draw`] consumes the random stream of
//! one sample and returns a continuum [`Microstructure`]; rasterizing it onto a
//! grid is deterministic. The same draw can therefore be evaluated on nested
//! grids or under translations without touching the random stream again.
//!
//! Draw order per sample (part of the reproducibility contract):
//! - smooth: five series fields `lambda_1, lambda_2, v11, v12, v21`, each as
//!   16 normals for the `sin cos` terms then 16 for the `cos sin` terms,
//!   `(k1, k2)` row-major;
//! - star: five `U[-1, 1]` radius weights, then the inside and outside phase;
//! - square: `zeta ~ U[0, 1)`, then inside and outside phase;
//! - voronoi: `cells` centres (unless the geometry is fixed) then one phase per
//!   cell.
//!
//! A phase is `lambda_1, lambda_2 ~ U[1/e, e]` followed by three standard
//! normal eigenvector components.

use std::f64::consts::{E, PI, TAU};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{PeriodicGrid, ScalarField, SymMatrixField};
use crate::rng::{self, Domain};
use crate::scalar::Scalar;

/// Smallest admissible norm of the first eigenvector before resampling.
pub const DEGENERATE_DIRECTION: f64 = 1e-8;

/// Symmetric positive-definite field with certified ellipticity bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientField {
    pub entries: SymMatrixField<f64>,
    pub alpha: f64,
    pub beta: f64,
}

/// Closed-form eigenvalues `(min, max)` of a symmetric 2x2 matrix.
pub fn sym_eigenvalues([a, b, c]: [f64; 3]) -> (f64, f64) {
    let mean = 0.5 * (a + c);
    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    (mean - rad, mean + rad)
}

impl CoefficientField {
    pub fn grid(&self) -> PeriodicGrid {
        self.entries.grid
    }

    pub fn at(&self, node: usize) -> [f64; 3] {
        self.entries.at(node)
    }

    pub fn from_fn(grid: PeriodicGrid, alpha: f64, beta: f64, f: impl Fn([f64; 2]) -> [f64; 3]) -> Self {
        let mut entries = SymMatrixField::zeros(grid);
        for (i, j, x) in grid.nodes() {
            let q = grid.index(i, j);
            let [a, b, c] = f(x);
            entries.a11[q] = a;
            entries.a12[q] = b;
            entries.a22[q] = c;
        }
        Self { entries, alpha, beta }
    }

    /// Checks finiteness and that every nodal eigenvalue is positive and
    /// inside the certified `[alpha, beta]` (relative slack `1e-12`).
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta >= self.alpha && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "invalid ellipticity bounds [{}, {}]",
                self.alpha, self.beta
            )));
        }
        for node in 0..self.grid().len() {
            let m = self.at(node);
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("coefficient field"));
            }
            let (lo, hi) = sym_eigenvalues(m);
            if lo <= 0.0 {
                return Err(Error::NotPositiveDefinite { node, min_eig: lo });
            }
            if lo < self.alpha * (1.0 - 1e-12) || hi > self.beta * (1.0 + 1e-12) {
                return Err(Error::InvalidArgument(format!(
                    "eigenvalues ({lo}, {hi}) at node {node} outside [{}, {}]",
                    self.alpha, self.beta
                )));
            }
        }
        Ok(())
    }

    /// Extreme nodal eigenvalues over the field.
    pub fn eigen_range(&self) -> (f64, f64) {
        (0..self.grid().len()).fold((f64::INFINITY, 0.0f64), |(lo, hi), q| {
            let (a, b) = sym_eigenvalues(self.at(q));
            (lo.min(a), hi.max(b))
        })
    }

    pub fn scaled(&self, c: f64) -> Self {
        let e = &self.entries;
        Self {
            entries: SymMatrixField {
                grid: e.grid,
                a11: e.a11.iter().map(|v| v * c).collect(),
                a12: e.a12.iter().map(|v| v * c).collect(),
                a22: e.a22.iter().map(|v| v * c).collect(),
            },
            alpha: self.alpha * c,
            beta: self.beta * c,
        }
    }

    /// Node-shifted copy: value at node `(i, j)` moves to `(i + di, j + dj)`.
    pub fn shifted(&self, di: isize, dj: isize) -> Self {
        let g = self.grid();
        let mv = |v: &Vec<f64>| ScalarField { grid: g, values: v.clone() }.shifted(di, dj).values;
        Self {
            entries: SymMatrixField {
                grid: g,
                a11: mv(&self.entries.a11),
                a12: mv(&self.entries.a12),
                a22: mv(&self.entries.a22),
            },
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn component(&self, c: usize) -> ScalarField<f64> {
        let values = match c {
            0 => self.entries.a11.clone(),
            1 => self.entries.a12.clone(),
            _ => self.entries.a22.clone(),
        };
        ScalarField { grid: self.grid(), values }
    }

    /// The three entry planes `(a11, a12, a22)` concatenated, in `T`.
    pub fn channels<T: Scalar>(&self) -> Vec<T> {
        self.entries
            .a11
            .iter()
            .chain(&self.entries.a12)
            .chain(&self.entries.a22)
            .map(|&v| T::lit(v))
            .collect()
    }

    /// Number of distinct nodal matrices (exact comparison).
    pub fn distinct_values(&self) -> usize {
        let mut seen: Vec<[u64; 3]> = (0..self.grid().len())
            .map(|q| self.at(q).map(f64::to_bits))
            .collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }
}

/// `lam1 v1 v1^T + lam2 v2 v2^T` with `v1 = normalize(v11, v12)` and `v2` the
/// orthogonal complement whose orientation follows the sign of `v21`.
pub fn build_spd(lam1: f64, lam2: f64, v11: f64, v12: f64, v21: f64) -> Result<[f64; 3]> {
    if !(lam1 > 0.0 && lam2 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "eigenvalues must be positive, got {lam1}, {lam2}"
        )));
    }
    let norm = v11.hypot(v12);
    if !(norm >= DEGENERATE_DIRECTION) {
        return Err(Error::DegenerateEigenvector(norm));
    }
    let (c, s) = (v11 / norm, v12 / norm);
    // In 2-D the orthogonality condition leaves only the orientation of v2
    // free: v2 = +-(-s, c). It drops out of the outer product.
    let sign = if v21 * -s >= 0.0 { 1.0 } else { -1.0 };
    let (w1, w2) = (-s * sign, c * sign);
    Ok([
        lam1 * c * c + lam2 * w1 * w1,
        lam1 * c * s + lam2 * w1 * w2,
        lam1 * s * s + lam2 * w2 * w2,
    ])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MicrostructureKind {
    Smooth,
    Star,
    Square,
    Voronoi,
    /// `a(x1) I`, `a = low` on `[0, 1/2)` and `high` on `[1/2, 1)`.
    Layered,
    /// Two-phase scalar checkerboard, `low` on the diagonal quadrants.
    Checkerboard,
    Constant,
}

impl MicrostructureKind {
    pub const RANDOM: [MicrostructureKind; 4] = [Self::Smooth, Self::Star, Self::Square, Self::Voronoi];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Smooth => "smooth",
            Self::Star => "star",
            Self::Square => "square",
            Self::Voronoi => "voronoi",
            Self::Layered => "layered",
            Self::Checkerboard => "checkerboard",
            Self::Constant => "constant",
        }
    }

    pub fn is_piecewise_constant(&self) -> bool {
        !matches!(self, Self::Smooth)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeConstants {
    pub a: f64,
    pub b: f64,
    pub margin: f64,
}

/// How nodes exactly on a grid-aligned square boundary are attributed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SquareBoundary {
    /// Radius drawn from the continuum; boundary nodes are outside.
    Free,
    /// Radius snapped to grid lines; boundary nodes belong to the outside.
    Open,
    /// Radius snapped to grid lines; boundary nodes belong to the inclusion.
    Closed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub kind: MicrostructureKind,
    pub seed: u64,
    pub grid_n: usize,
    pub voronoi_fixed_geometry: bool,
    pub voronoi_cells: usize,
    pub star: ShapeConstants,
    pub square: ShapeConstants,
    pub square_boundary: SquareBoundary,
    /// Phase values for the layered/checkerboard fixtures.
    pub fixture_low: f64,
    pub fixture_high: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: MicrostructureKind::Smooth,
            seed: 0,
            grid_n: 64,
            voronoi_fixed_geometry: false,
            voronoi_cells: 5,
            star: ShapeConstants { a: 0.25, b: 0.04, margin: 0.05 },
            square: ShapeConstants { a: 0.1, b: 0.3, margin: 0.05 },
            square_boundary: SquareBoundary::Free,
            fixture_low: 1.0,
            fixture_high: 4.0,
        }
    }
}

impl SamplerConfig {
    pub fn new(kind: MicrostructureKind, seed: u64, grid_n: usize) -> Self {
        Self { kind, seed, grid_n, ..Self::default() }
    }

    pub fn grid(&self) -> Result<PeriodicGrid> {
        PeriodicGrid::new(self.grid_n)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        let ShapeConstants { a, b, margin } = self.star;
        // |sum_{k=1}^5 xi_k sin(k theta)| < 5 almost surely
        if !(margin > 0.0 && b >= 0.0 && a - 5.0 * b >= margin - 1e-12 && a + 5.0 * b <= 0.5 - margin + 1e-12) {
            return Err(Error::Config(format!(
                "star constants a = {a}, b = {b} do not keep r in ({margin}, {})",
                0.5 - margin
            )));
        }
        let ShapeConstants { a, b, margin } = self.square;
        if !(margin > 0.0 && b >= 0.0 && a > margin && a + b < 0.5 - margin) {
            return Err(Error::Config(format!(
                "square constants a = {a}, b = {b} do not keep r in ({margin}, {})",
                0.5 - margin
            )));
        }
        if self.voronoi_cells == 0 {
            return Err(Error::Config("voronoi_cells must be positive".into()));
        }
        if !(self.fixture_low > 0.0 && self.fixture_high >= self.fixture_low) {
            return Err(Error::Config("fixture phases must satisfy 0 < low <= high".into()));
        }
        Ok(())
    }
}

/// Truncated trigonometric series
/// `sum_{k1,k2=1}^4 p sin(2 pi k1 x1) cos(2 pi k2 x2) + q cos(2 pi k1 x1) sin(2 pi k2 x2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrigSeries {
    pub sin_cos: [[f64; 4]; 4],
    pub cos_sin: [[f64; 4]; 4],
}

impl TrigSeries {
    fn draw(rng: &mut impl Rng) -> Self {
        let mut s = Self { sin_cos: [[0.0; 4]; 4], cos_sin: [[0.0; 4]; 4] };
        for row in s.sin_cos.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
        }
        for row in s.cos_sin.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
        }
        s
    }

    pub fn eval(&self, x: [f64; 2]) -> f64 {
        self.eval_derivs(x).0
    }

    /// Value, gradient and Hessian `(f, [fx, fy], [fxx, fxy, fyy])`.
    pub fn eval_derivs(&self, x: [f64; 2]) -> (f64, [f64; 2], [f64; 3]) {
        let mut f = 0.0;
        let mut g = [0.0; 2];
        let mut hs = [0.0; 3];
        for k1 in 1..=4 {
            let w1 = TAU * k1 as f64;
            let (s1, c1) = (w1 * x[0]).sin_cos();
            for k2 in 1..=4 {
                let w2 = TAU * k2 as f64;
                let (s2, c2) = (w2 * x[1]).sin_cos();
                let p = self.sin_cos[k1 - 1][k2 - 1];
                let q = self.cos_sin[k1 - 1][k2 - 1];
                let val = p * s1 * c2 + q * c1 * s2;
                f += val;
                g[0] += w1 * (p * c1 * c2 - q * s1 * s2);
                g[1] += w2 * (-p * s1 * s2 + q * c1 * c2);
                hs[0] -= w1 * w1 * val;
                hs[1] -= w1 * w2 * (p * c1 * s2 + q * s1 * c2);
                hs[2] -= w2 * w2 * val;
            }
        }
        (f, g, hs)
    }

    /// `max |f|` over the unit square: a 128 x 128 scan followed by Newton
    /// refinement of the best candidates. Independent of any simulation grid.
    pub fn max_abs(&self) -> f64 {
        const SCAN: usize = 128;
        let mut candidates: Vec<(f64, [f64; 2])> = Vec::with_capacity(SCAN * SCAN);
        for j in 0..SCAN {
            for i in 0..SCAN {
                let x = [i as f64 / SCAN as f64, j as f64 / SCAN as f64];
                candidates.push((self.eval(x).abs(), x));
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut best = candidates[0].0;
        for &(_, x0) in candidates.iter().take(16) {
            let mut x = x0;
            for _ in 0..20 {
                let (_, g, [hxx, hxy, hyy]) = self.eval_derivs(x);
                let det = hxx * hyy - hxy * hxy;
                if det.abs() < 1e-300 {
                    break;
                }
                let dx = (hyy * g[0] - hxy * g[1]) / det;
                let dy = (-hxy * g[0] + hxx * g[1]) / det;
                // stay in the basin of the scanned candidate
                if dx.hypot(dy) > 2.0 / SCAN as f64 {
                    break;
                }
                x = [x[0] - dx, x[1] - dy];
                if dx.hypot(dy) < 1e-14 {
                    break;
                }
            }
            best = best.max(self.eval(x).abs());
        }
        best
    }
}

/// Normalised smooth class: five series and the sup-norms of the two
/// eigenvalue series.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothMicrostructure {
    pub lambda: [TrigSeries; 2],
    pub lambda_max: [f64; 2],
    pub vectors: [TrigSeries; 3],
}

impl SmoothMicrostructure {
    pub fn eigenvalues(&self, x: [f64; 2]) -> [f64; 2] {
        [0, 1].map(|i| (self.lambda[i].eval(x) / self.lambda_max[i]).exp())
    }

    fn eval(&self, x: [f64; 2]) -> Result<[f64; 3]> {
        let [l1, l2] = self.eigenvalues(x);
        let [v11, v12, v21] = [0, 1, 2].map(|i| self.vectors[i].eval(x));
        match build_spd(l1, l2, v11, v12, v21) {
            // Every series term vanishes on {0, 1/2}^2, so the direction is
            // undefined there; both eigenvalues are exp(0) and the matrix is
            // the identity whatever the direction.
            Err(Error::DegenerateEigenvector(_)) if (l1 - l2).abs() <= DEGENERATE_DIRECTION => {
                let l = 0.5 * (l1 + l2);
                Ok([l, 0.0, l])
            }
            other => other,
        }
    }
}

/// One constant phase: eigenvalues plus the raw eigenvector draws.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Phase {
    pub lambda: [f64; 2],
    pub vector: [f64; 3],
    pub matrix: [f64; 3],
}

impl Phase {
    fn draw(rng: &mut impl Rng) -> Self {
        loop {
            let lambda = [rng.gen_range(1.0 / E..=E), rng.gen_range(1.0 / E..=E)];
            let vector: [f64; 3] = [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ];
            if let Ok(matrix) = build_spd(lambda[0], lambda[1], vector[0], vector[1], vector[2]) {
                return Self { lambda, vector, matrix };
            }
        }
    }

    pub fn isotropic(a: f64) -> Self {
        Self { lambda: [a, a], vector: [1.0, 0.0, 0.0], matrix: [a, 0.0, a] }
    }
}

/// A continuum coefficient field on the unit torus.
#[derive(Clone, Debug, PartialEq)]
pub enum Microstructure {
    Smooth(SmoothMicrostructure),
    Star {
        a: f64,
        b: f64,
        weights: [f64; 5],
        inside: Phase,
        outside: Phase,
    },
    Square {
        half_width: f64,
        boundary: SquareBoundary,
        inside: Phase,
        outside: Phase,
    },
    Voronoi {
        centers: Vec<[f64; 2]>,
        phases: Vec<Phase>,
    },
    Layered {
        low: f64,
        high: f64,
    },
    Checkerboard {
        low: f64,
        high: f64,
    },
    Constant([f64; 3]),
}

/// Squared toroidal distance.
pub fn torus_dist2(x: [f64; 2], y: [f64; 2]) -> f64 {
    let d = |a: f64, b: f64| {
        let t = (a - b).rem_euclid(1.0);
        t.min(1.0 - t)
    };
    let (d1, d2) = (d(x[0], y[0]), d(x[1], y[1]));
    d1 * d1 + d2 * d2
}

fn draw_centers(rng: &mut impl Rng, cells: usize) -> Vec<[f64; 2]> {
    'outer: loop {
        let centers: Vec<[f64; 2]> = (0..cells).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect();
        for a in 0..cells {
            for b in a + 1..cells {
                if torus_dist2(centers[a], centers[b]).sqrt() < 1e-9 {
                    continue 'outer;
                }
            }
        }
        return centers;
    }
}

/// Star radius `a + b sum_k w_k sin(k theta)`.
pub fn star_radius(a: f64, b: f64, weights: &[f64; 5], theta: f64) -> f64 {
    a + b * weights
        .iter()
        .enumerate()
        .map(|(k, w)| w * ((k + 1) as f64 * theta).sin())
        .sum::<f64>()
}

impl Microstructure {
    pub fn kind(&self) -> MicrostructureKind {
        match self {
            Self::Smooth(_) => MicrostructureKind::Smooth,
            Self::Star { .. } => MicrostructureKind::Star,
            Self::Square { .. } => MicrostructureKind::Square,
            Self::Voronoi { .. } => MicrostructureKind::Voronoi,
            Self::Layered { .. } => MicrostructureKind::Layered,
            Self::Checkerboard { .. } => MicrostructureKind::Checkerboard,
            Self::Constant(_) => MicrostructureKind::Constant,
        }
    }

    /// Certified `(alpha, beta)`.
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            Self::Layered { low, high } | Self::Checkerboard { low, high } => (*low, *high),
            Self::Constant(m) => sym_eigenvalues(*m),
            _ => (1.0 / E, E),
        }
    }

    /// Index of the Voronoi cell owning `x` (ties go to the lowest index).
    pub fn voronoi_cell(centers: &[[f64; 2]], x: [f64; 2]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (c, &p) in centers.iter().enumerate() {
            let d = torus_dist2(x, p);
            if d < best.0 {
                best = (d, c);
            }
        }
        best.1
    }

    /// Matrix at a point of the torus.
    pub fn eval(&self, x: [f64; 2]) -> Result<[f64; 3]> {
        let x = [x[0].rem_euclid(1.0), x[1].rem_euclid(1.0)];
        Ok(match self {
            Self::Smooth(s) => s.eval(x)?,
            Self::Star { a, b, weights, inside, outside } => {
                let (dx, dy) = (x[0] - 0.5, x[1] - 0.5);
                let rho = dx.hypot(dy);
                let theta = dy.atan2(dx);
                if rho < star_radius(*a, *b, weights, theta) {
                    inside.matrix
                } else {
                    outside.matrix
                }
            }
            Self::Square { half_width, boundary, inside, outside } => {
                let d = (x[0] - 0.5).abs().max((x[1] - 0.5).abs());
                let is_inside = match boundary {
                    SquareBoundary::Closed => d <= *half_width,
                    _ => d < *half_width,
                };
                if is_inside {
                    inside.matrix
                } else {
                    outside.matrix
                }
            }
            Self::Voronoi { centers, phases } => phases[Self::voronoi_cell(centers, x)].matrix,
            Self::Layered { low, high } => {
                let a = if x[0] < 0.5 { *low } else { *high };
                [a, 0.0, a]
            }
            Self::Checkerboard { low, high } => {
                let a = if (x[0] < 0.5) == (x[1] < 0.5) { *low } else { *high };
                [a, 0.0, a]
            }
            Self::Constant(m) => *m,
        })
    }

    pub fn rasterize(&self, grid: PeriodicGrid) -> Result<CoefficientField> {
        self.rasterize_shifted(grid, [0.0, 0.0])
    }

    /// Nodal values of `A(x - shift)`.
    pub fn rasterize_shifted(&self, grid: PeriodicGrid, shift: [f64; 2]) -> Result<CoefficientField> {
        let (alpha, beta) = self.bounds();
        let mut entries = SymMatrixField::zeros(grid);
        for (i, j, x) in grid.nodes() {
            let q = grid.index(i, j);
            let [a, b, c] = self.eval([x[0] - shift[0], x[1] - shift[1]])?;
            entries.a11[q] = a;
            entries.a12[q] = b;
            entries.a22[q] = c;
        }
        Ok(CoefficientField { entries, alpha, beta })
    }

    /// Same geometry with the square half-width changed; other kinds unchanged.
    pub fn with_square_half_width(&self, r: f64) -> Self {
        match self {
            Self::Square { boundary, inside, outside, .. } => Self::Square {
                half_width: r,
                boundary: *boundary,
                inside: *inside,
                outside: *outside,
            },
            other => other.clone(),
        }
    }
}

fn draw_smooth(rng: &mut impl Rng) -> SmoothMicrostructure {
    let lambda = [TrigSeries::draw(rng), TrigSeries::draw(rng)];
    let vectors = [TrigSeries::draw(rng), TrigSeries::draw(rng), TrigSeries::draw(rng)];
    let lambda_max = [lambda[0].max_abs(), lambda[1].max_abs()];
    SmoothMicrostructure { lambda, lambda_max, vectors }
}

/// Shared Voronoi centres used when the geometry is fixed across samples.
pub fn fixed_voronoi_centers(cfg: &SamplerConfig) -> Vec<[f64; 2]> {
    let mut rng = rng::stream(cfg.seed, Domain::Microstructure, rng::GEOMETRY_STREAM);
    draw_centers(&mut rng, cfg.voronoi_cells)
}

/// Draws the continuum microstructure of sample `index`.
pub fn draw(cfg: &SamplerConfig, index: u64) -> Result<Microstructure> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, Domain::Microstructure, index);
    Ok(match cfg.kind {
        MicrostructureKind::Smooth => Microstructure::Smooth(draw_smooth(&mut rng)),
        MicrostructureKind::Star => {
            let weights: [f64; 5] = std::array::from_fn(|_| rng.gen_range(-1.0..=1.0));
            let inside = Phase::draw(&mut rng);
            let outside = Phase::draw(&mut rng);
            Microstructure::Star { a: cfg.star.a, b: cfg.star.b, weights, inside, outside }
        }
        MicrostructureKind::Square => {
            let zeta: f64 = rng.gen();
            let mut half_width = cfg.square.a + cfg.square.b * zeta;
            if cfg.square_boundary != SquareBoundary::Free {
                let n = cfg.grid_n as f64;
                half_width = (half_width * n).round().max(1.0) / n;
            }
            let inside = Phase::draw(&mut rng);
            let outside = Phase::draw(&mut rng);
            Microstructure::Square { half_width, boundary: cfg.square_boundary, inside, outside }
        }
        MicrostructureKind::Voronoi => {
            let centers = if cfg.voronoi_fixed_geometry {
                fixed_voronoi_centers(cfg)
            } else {
                draw_centers(&mut rng, cfg.voronoi_cells)
            };
            let phases = (0..centers.len()).map(|_| Phase::draw(&mut rng)).collect();
            Microstructure::Voronoi { centers, phases }
        }
        MicrostructureKind::Layered => Microstructure::Layered { low: cfg.fixture_low, high: cfg.fixture_high },
        MicrostructureKind::Checkerboard => {
            Microstructure::Checkerboard { low: cfg.fixture_low, high: cfg.fixture_high }
        }
        MicrostructureKind::Constant => Microstructure::Constant([cfg.fixture_low, 0.0, cfg.fixture_low]),
    })
}

/// Draws and rasterizes sample `index` on the configured grid. A smooth draw
/// whose eigenvector field degenerates at a node is redrawn from the
/// continuation of the same stream.
pub fn sample(cfg: &SamplerConfig, index: u64) -> Result<CoefficientField> {
    let grid = cfg.grid()?;
    if cfg.kind == MicrostructureKind::Smooth {
        cfg.validate()?;
        let mut rng = rng::stream(cfg.seed, Domain::Microstructure, index);
        loop {
            let m = Microstructure::Smooth(draw_smooth(&mut rng));
            match m.rasterize(grid) {
                Err(Error::DegenerateEigenvector(_)) => continue,
                other => return other,
            }
        }
    }
    draw(cfg, index)?.rasterize(grid)
}

pub fn sample_smooth(cfg: &SamplerConfig, index: u64) -> Result<CoefficientField> {
    expect_kind(cfg, MicrostructureKind::Smooth)?;
    sample(cfg, index)
}

pub fn sample_star(cfg: &SamplerConfig, index: u64) -> Result<CoefficientField> {
    expect_kind(cfg, MicrostructureKind::Star)?;
    sample(cfg, index)
}

pub fn sample_square(cfg: &SamplerConfig, index: u64) -> Result<CoefficientField> {
    expect_kind(cfg, MicrostructureKind::Square)?;
    sample(cfg, index)
}

pub fn sample_voronoi(cfg: &SamplerConfig, index: u64) -> Result<CoefficientField> {
    expect_kind(cfg, MicrostructureKind::Voronoi)?;
    sample(cfg, index)
}

fn expect_kind(cfg: &SamplerConfig, kind: MicrostructureKind) -> Result<()> {
    if cfg.kind != kind {
        return Err(Error::Config(format!(
            "sampler expects kind {}, config has {}",
            kind.name(),
            cfg.kind.name()
        )));
    }
    Ok(())
}

/// Layered fixture on a grid, certified with its own phase bounds.
pub fn layered(grid: PeriodicGrid, low: f64, high: f64) -> CoefficientField {
    Microstructure::Layered { low, high }.rasterize(grid).expect("fixture is total")
}

pub fn checkerboard(grid: PeriodicGrid, low: f64, high: f64) -> CoefficientField {
    Microstructure::Checkerboard { low, high }.rasterize(grid).expect("fixture is total")
}

pub fn constant(grid: PeriodicGrid, m: [f64; 3]) -> CoefficientField {
    Microstructure::Constant(m).rasterize(grid).expect("fixture is total")
}

/// Angle in `[0, 2 pi)` of `x` about the cell centre.
pub fn polar_angle(x: [f64; 2]) -> f64 {
    (x[1] - 0.5).atan2(x[0] - 0.5).rem_euclid(2.0 * PI)
}
