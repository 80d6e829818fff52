//! Numerical checks of the corrector stability estimates.
//!
//! Norms of corrector gradients use 2x2 Gauss quadrature per element, with
//! the coefficient constant per element exactly as in the solver. With that
//! choice the coercivity, Cauchy-Schwarz and Holder steps of the estimates
//! hold for the discrete solutions as written, so a failing check points to a
//! bug rather than to discretization error.

use std::f64::consts::SQRT_2;

use serde::{Deserialize, Serialize};

use crate::cellsolver::{gauss_gradients, solve_cell, CellSolution, SolveOptions};
use crate::error::{Error, Result};
use crate::metrics::quantile;
use crate::microstructure::{self as ms, CoefficientField, Microstructure, SamplerConfig};

/// Relative slack allowed on the a-priori bound.
pub const APRIORI_TOLERANCE: f64 = 1e-6;
/// Allowed `lhs / rhs` for the Lipschitz estimates.
pub const LIPSCHITZ_SLACK: f64 = 1.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InequalityCheck {
    pub lhs: f64,
    pub rhs: f64,
    /// `lhs / rhs`, zero when both sides vanish.
    pub slack: f64,
    pub pass: bool,
}

impl InequalityCheck {
    fn new(lhs: f64, rhs: f64, allowed: f64) -> Self {
        let slack = if lhs == 0.0 { 0.0 } else { lhs / rhs };
        Self { lhs, rhs, slack, pass: lhs.is_finite() && slack <= allowed }
    }
}

/// `|chi_1 - chi_2|_{H^1}` summed over both correctors, exact per element.
pub fn h1_distance(s1: &CellSolution, s2: &CellSolution) -> Result<f64> {
    s1.grid.ensure_same(&s2.grid)?;
    let mut total = 0.0;
    for l in 0..2 {
        let mut d = s1.chi[l].clone();
        for (v, w) in d.values.iter_mut().zip(&s2.chi[l].values) {
            *v -= w;
        }
        total += crate::cellsolver::h1_seminorm_sq(&d);
    }
    Ok(total.sqrt())
}

/// `L^p` norm of the Frobenius magnitude of `grad chi` (both correctors)
/// under element Gauss quadrature; `p = inf` gives the max over Gauss points.
pub fn grad_lp_norm(sol: &CellSolution, p: f64) -> f64 {
    let g0 = gauss_gradients(&sol.chi[0]);
    let g1 = gauss_gradients(&sol.chi[1]);
    let mags: Vec<f64> = g0
        .iter()
        .zip(&g1)
        .map(|(a, b)| (a[0] * a[0] + a[1] * a[1] + b[0] * b[0] + b[1] * b[1]).sqrt())
        .collect();
    let peak = mags.iter().copied().fold(0.0, f64::max);
    if p.is_infinite() || peak == 0.0 {
        return peak;
    }
    let w = sol.grid.cell_area() / 4.0;
    peak * (mags.iter().map(|m| (m / peak).powf(p)).sum::<f64>() * w).powf(1.0 / p)
}

/// Pointwise Frobenius norms of `A_1 - A_2` at the nodes (one per element).
fn coefficient_gap(a1: &CoefficientField, a2: &CoefficientField) -> Result<Vec<f64>> {
    a1.grid().ensure_same(&a2.grid())?;
    Ok((0..a1.grid().len())
        .map(|q| {
            let (x, y) = (a1.at(q), a2.at(q));
            let d = [x[0] - y[0], x[1] - y[1], x[2] - y[2]];
            (d[0] * d[0] + 2.0 * d[1] * d[1] + d[2] * d[2]).sqrt()
        })
        .collect())
}

fn field_lq(values: &[f64], q: f64, area: f64) -> f64 {
    let peak = values.iter().copied().fold(0.0, f64::max);
    if q.is_infinite() || peak == 0.0 {
        return peak;
    }
    peak * (values.iter().map(|v| (v / peak).powf(q)).sum::<f64>() * area).powf(1.0 / q)
}

/// `|chi|_{H^1} <= sqrt(2) beta / alpha`.
pub fn check_apriori(a: &CoefficientField, sol: &CellSolution) -> InequalityCheck {
    let rhs = SQRT_2 * a.beta / a.alpha;
    InequalityCheck::new(sol.h1_seminorm(), rhs, 1.0 + APRIORI_TOLERANCE)
}

fn common_bounds(a1: &CoefficientField, a2: &CoefficientField) -> (f64, f64) {
    (a1.alpha.min(a2.alpha), a1.beta.max(a2.beta))
}

/// `|chi_2 - chi_1| <= (sqrt 2 / alpha)(1 + beta / alpha) |A_1 - A_2|_{L^inf}`.
pub fn check_linf_lipschitz(
    a1: &CoefficientField,
    s1: &CellSolution,
    a2: &CoefficientField,
    s2: &CellSolution,
) -> Result<InequalityCheck> {
    let (alpha, beta) = common_bounds(a1, a2);
    let gap = coefficient_gap(a1, a2)?;
    let linf = gap.iter().copied().fold(0.0, f64::max);
    let rhs = SQRT_2 / alpha * (1.0 + beta / alpha) * linf;
    Ok(InequalityCheck::new(h1_distance(s1, s2)?, rhs, LIPSCHITZ_SLACK))
}

/// Conjugate exponent `q = 2p / (p - 2)`; `p = inf` maps to 2.
pub fn conjugate_exponent(p: f64) -> Result<f64> {
    if !(p > 2.0) {
        return Err(Error::InvalidArgument(format!("p must exceed 2, got {p}")));
    }
    Ok(if p.is_infinite() { 2.0 } else { 2.0 * p / (p - 2.0) })
}

/// `|chi_1 - chi_2| <= (sqrt 2 / alpha)(|dA|_{L^2} + |grad chi_2|_{L^p} |dA|_{L^q})`
/// with `alpha` the lower bound of `A_1`.
pub fn check_lq_lipschitz(
    a1: &CoefficientField,
    s1: &CellSolution,
    a2: &CoefficientField,
    s2: &CellSolution,
    p: f64,
    q: f64,
) -> Result<InequalityCheck> {
    let expected = conjugate_exponent(p)?;
    if (q - expected).abs() > 1e-12 {
        return Err(Error::ExponentMismatch { q, expected });
    }
    let area = a1.grid().cell_area();
    let gap = coefficient_gap(a1, a2)?;
    let l2 = field_lq(&gap, 2.0, area);
    let lq = field_lq(&gap, q, area);
    let rhs = SQRT_2 / a1.alpha * (l2 + grad_lp_norm(s2, p) * lq);
    Ok(InequalityCheck::new(h1_distance(s1, s2)?, rhs, LIPSCHITZ_SLACK))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    /// `A(x - t e_1)`.
    Translation,
    /// Square inclusion with half-width `r + t`.
    SquareInterface,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModulusRow {
    pub amplitude: f64,
    pub coefficient_l2: f64,
    pub corrector_h1: f64,
}

/// `(|A_t - A|_{L^2}, |chi_t - chi|_{H^1})` for each amplitude.
pub fn empirical_l2_modulus(
    m: &Microstructure,
    grid: crate::grid::PeriodicGrid,
    family: Perturbation,
    amplitudes: &[f64],
    opts: &SolveOptions,
) -> Result<Vec<ModulusRow>> {
    let base = m.rasterize(grid)?;
    base.validate()?;
    let s0 = solve_cell(&base, opts)?;
    let mut rows = Vec::with_capacity(amplitudes.len());
    for &t in amplitudes {
        let field = match family {
            Perturbation::Translation => m.rasterize_shifted(grid, [t, 0.0])?,
            Perturbation::SquareInterface => match m {
                Microstructure::Square { half_width, .. } => {
                    let r = half_width + t;
                    if !(r > 0.0 && r < 0.5) {
                        return Err(Error::InvalidArgument(format!("perturbed half-width {r} leaves (0, 1/2)")));
                    }
                    m.with_square_half_width(r).rasterize(grid)?
                }
                _ => return Err(Error::InvalidArgument("interface shift needs a square inclusion".into())),
            },
        };
        field.validate()?;
        let st = solve_cell(&field, opts)?;
        let gap = coefficient_gap(&field, &base)?;
        rows.push(ModulusRow {
            amplitude: t,
            coefficient_l2: field_lq(&gap, 2.0, grid.cell_area()),
            corrector_h1: h1_distance(&st, &s0)?,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurveyRow {
    pub p: f64,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

/// Quantiles of `|grad chi|_{L^p}` over samples `0..count` of a sampler.
pub fn grad_lp_survey(cfg: &SamplerConfig, count: u64, p_list: &[f64], opts: &SolveOptions) -> Result<Vec<SurveyRow>> {
    if let Some(p) = p_list.iter().find(|p| !(**p > 2.0 && **p <= 10.0)) {
        return Err(Error::InvalidArgument(format!("survey exponents must lie in (2, 10], got {p}")));
    }
    let mut norms = vec![Vec::with_capacity(count as usize); p_list.len()];
    for idx in 0..count {
        let a = ms::sample(cfg, idx)?;
        let sol = solve_cell(&a, opts)?;
        for (k, &p) in p_list.iter().enumerate() {
            norms[k].push(grad_lp_norm(&sol, p));
        }
    }
    Ok(p_list
        .iter()
        .zip(&norms)
        .map(|(&p, v)| SurveyRow {
            p,
            min: quantile(v, 0.0),
            q25: quantile(v, 0.25),
            median: quantile(v, 0.5),
            q75: quantile(v, 0.75),
            max: quantile(v, 1.0),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub kind: ms::MicrostructureKind,
    pub grid_n: usize,
    pub p: f64,
    pub q: f64,
    pub apriori: Vec<InequalityCheck>,
    pub linf: Vec<InequalityCheck>,
    pub lq: Vec<InequalityCheck>,
    pub survey: Vec<SurveyRow>,
}

impl StabilityReport {
    pub fn passed(checks: &[InequalityCheck]) -> usize {
        checks.iter().filter(|c| c.pass).count()
    }

    pub fn all_pass(&self) -> bool {
        [&self.apriori, &self.linf, &self.lq].iter().all(|c| Self::passed(c) == c.len())
    }

    pub fn max_slack(checks: &[InequalityCheck]) -> f64 {
        checks.iter().map(|c| c.slack).fold(0.0, f64::max)
    }

    /// One CSV row per pair.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("pair,apriori_lhs,apriori_rhs,linf_lhs,linf_rhs,lq_lhs,lq_rhs\n");
        for k in 0..self.linf.len() {
            s.push_str(&format!(
                "{k},{:e},{:e},{:e},{:e},{:e},{:e}\n",
                self.apriori[k].lhs, self.apriori[k].rhs, self.linf[k].lhs, self.linf[k].rhs, self.lq[k].lhs, self.lq[k].rhs
            ));
        }
        s
    }
}

/// Runs all three inequalities on `pairs` same-class pairs (samples `2k`,
/// `2k + 1`) plus a gradient survey over the `2 * pairs` samples.
pub fn run_harness(cfg: &SamplerConfig, pairs: usize, p: f64, opts: &SolveOptions) -> Result<StabilityReport> {
    let q = conjugate_exponent(p)?;
    let mut report = StabilityReport {
        kind: cfg.kind,
        grid_n: cfg.grid_n,
        p,
        q,
        apriori: Vec::new(),
        linf: Vec::new(),
        lq: Vec::new(),
        survey: Vec::new(),
    };
    let survey_p = [4.0, 6.0, 8.0, 10.0];
    let mut norms = vec![Vec::new(); survey_p.len()];
    for k in 0..pairs as u64 {
        let a1 = ms::sample(cfg, 2 * k)?;
        let a2 = ms::sample(cfg, 2 * k + 1)?;
        let s1 = solve_cell(&a1, opts)?;
        let s2 = solve_cell(&a2, opts)?;
        report.apriori.push(check_apriori(&a1, &s1));
        report.linf.push(check_linf_lipschitz(&a1, &s1, &a2, &s2)?);
        report.lq.push(check_lq_lipschitz(&a1, &s1, &a2, &s2, p, q)?);
        for s in [&s1, &s2] {
            for (i, &pp) in survey_p.iter().enumerate() {
                norms[i].push(grad_lp_norm(s, pp));
            }
        }
    }
    report.survey = survey_p
        .iter()
        .zip(&norms)
        .map(|(&p, v)| SurveyRow {
            p,
            min: quantile(v, 0.0),
            q25: quantile(v, 0.25),
            median: quantile(v, 0.5),
            q75: quantile(v, 0.75),
            max: quantile(v, 1.0),
        })
        .collect();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::PeriodicGrid;
    use crate::microstructure::{MicrostructureKind, SquareBoundary};

    fn grid(n: usize) -> PeriodicGrid {
        PeriodicGrid::new(n).unwrap()
    }

    fn solve(a: &CoefficientField) -> CellSolution {
        solve_cell(a, &SolveOptions::default()).unwrap()
    }

    #[test]
    fn identity_has_zero_corrector_norm() {
        let a = ms::constant(grid(16), [1.0, 0.0, 1.0]);
        let c = check_apriori(&a, &solve(&a));
        assert_eq!(c.lhs, 0.0);
        assert!((c.rhs - SQRT_2).abs() < 1e-15 && c.pass);
    }

    #[test]
    fn layered_passes_with_own_bounds() {
        let a = ms::layered(grid(32), 1.0, 4.0);
        let c = check_apriori(&a, &solve(&a));
        assert!(c.pass && c.lhs > 0.0);
        assert!((c.rhs - 4.0 * SQRT_2).abs() < 1e-14);
        // the same field also passes against the looser [1/e, e]^2 ratio
        assert!(c.lhs <= SQRT_2 * std::f64::consts::E.powi(2));
    }

    #[test]
    fn identical_pair_has_zero_gap() {
        let a = ms::sample(&SamplerConfig::new(MicrostructureKind::Star, 1, 32), 0).unwrap();
        let s = solve(&a);
        let c = check_linf_lipschitz(&a, &s, &a, &s).unwrap();
        assert_eq!(c.lhs, 0.0);
        let c = check_lq_lipschitz(&a, &s, &a, &s, 10.0, 2.5).unwrap();
        assert_eq!(c.lhs, 0.0);
    }

    #[test]
    fn scaled_pair_has_zero_gap() {
        let a = ms::sample(&SamplerConfig::new(MicrostructureKind::Smooth, 2, 32), 0).unwrap();
        let b = a.scaled(1.5);
        let c = check_linf_lipschitz(&a, &solve(&a), &b, &solve(&b)).unwrap();
        assert!(c.lhs < 1e-9 && c.rhs > 0.0 && c.slack < 1e-8);
    }

    #[test]
    fn exponent_mismatch_is_rejected() {
        let a = ms::constant(grid(8), [1.0, 0.0, 1.0]);
        let s = solve(&a);
        assert!(matches!(
            check_lq_lipschitz(&a, &s, &a, &s, 10.0, 3.0),
            Err(Error::ExponentMismatch { .. })
        ));
        assert_eq!(conjugate_exponent(f64::INFINITY).unwrap(), 2.0);
        assert!(conjugate_exponent(2.0).is_err());
    }

    #[test]
    fn constant_coefficient_has_zero_gradient_norm() {
        let a = ms::constant(grid(8), [2.0, 0.0, 2.0]);
        assert_eq!(grad_lp_norm(&solve(&a), 6.0), 0.0);
    }

    #[test]
    fn all_inequalities_hold_on_random_pairs() {
        for kind in MicrostructureKind::RANDOM {
            let report = run_harness(&SamplerConfig::new(kind, 5, 32), 6, 10.0, &SolveOptions::default()).unwrap();
            assert!(report.all_pass(), "{kind:?}: {report:?}");
            assert!(StabilityReport::max_slack(&report.lq) <= 1.0 + 1e-9);
            assert!(StabilityReport::max_slack(&report.linf) <= 1.0 + 1e-9);
            assert!(StabilityReport::max_slack(&report.lq) > 0.0);
        }
    }

    #[test]
    fn lq_bound_tightens_towards_linf_ordering() {
        // as p grows, q -> 2 and the L^q bound is never looser than the
        // L^inf one with the a-priori gradient bound substituted
        let cfg = SamplerConfig::new(MicrostructureKind::Smooth, 9, 32);
        let (a1, a2) = (ms::sample(&cfg, 0).unwrap(), ms::sample(&cfg, 1).unwrap());
        let (s1, s2) = (solve(&a1), solve(&a2));
        let linf = check_linf_lipschitz(&a1, &s1, &a2, &s2).unwrap();
        let big = check_lq_lipschitz(&a1, &s1, &a2, &s2, 1e6, conjugate_exponent(1e6).unwrap()).unwrap();
        assert!((big.lhs - linf.lhs).abs() < 1e-15);
        assert!(big.rhs <= linf.rhs * (1.0 + 1e-6));
    }

    #[test]
    fn translation_modulus_decays() {
        let m = ms::draw(&SamplerConfig::new(MicrostructureKind::Smooth, 3, 32), 0).unwrap();
        let amps = [0.1, 0.03, 0.01, 1e-3, 1e-4];
        let rows = empirical_l2_modulus(&m, grid(32), Perturbation::Translation, &amps, &SolveOptions::default()).unwrap();
        assert!(rows.last().unwrap().corrector_h1 < 1e-2 * rows[0].corrector_h1);
        assert!(rows.last().unwrap().coefficient_l2 < 1e-2 * rows[0].coefficient_l2);
        let zero = empirical_l2_modulus(&m, grid(32), Perturbation::Translation, &[0.0], &SolveOptions::default()).unwrap();
        assert_eq!((zero[0].coefficient_l2, zero[0].corrector_h1), (0.0, 0.0));
    }

    #[test]
    fn interface_shift_is_continuous_but_not_lipschitz() {
        let mut cfg = SamplerConfig::new(MicrostructureKind::Square, 4, 128);
        cfg.square_boundary = SquareBoundary::Free;
        let m = ms::draw(&cfg, 0).unwrap();
        let amps = [0.08, 0.04, 0.02, 0.01];
        let rows = empirical_l2_modulus(&m, grid(128), Perturbation::SquareInterface, &amps, &SolveOptions::default()).unwrap();
        for w in rows.windows(2) {
            assert!(w[1].coefficient_l2 < w[0].coefficient_l2);
            assert!(w[1].corrector_h1 < w[0].corrector_h1);
        }
        // symmetric-difference area ~ t, so |dA|_{L^2} ~ sqrt t
        let ratio = rows[0].coefficient_l2 / rows[3].coefficient_l2;
        assert!(ratio > 2.0 && ratio < 4.0, "{ratio}");
    }

    #[test]
    fn survey_is_finite_and_zero_for_constants() {
        let rows = grad_lp_survey(&SamplerConfig::new(MicrostructureKind::Smooth, 0, 32), 4, &[4.0, 10.0], &SolveOptions::default()).unwrap();
        assert!(rows.iter().all(|r| r.max.is_finite() && r.min > 0.0));
        let mut c = SamplerConfig::new(MicrostructureKind::Constant, 0, 16);
        c.fixture_low = 1.3;
        let rows = grad_lp_survey(&c, 2, &[3.0], &SolveOptions::default()).unwrap();
        assert_eq!(rows[0].max, 0.0);
        assert!(grad_lp_survey(&c, 1, &[2.0], &SolveOptions::default()).is_err());
    }
}
