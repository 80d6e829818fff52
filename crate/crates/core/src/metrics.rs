//! Training loss and relative error measures for corrector predictions.
//!
//! Norms use nodal quadrature (`h^2` per node). Pointwise magnitudes are
//! Euclidean over the two corrector components and Frobenius over the four
//! gradient planes.

use serde::{Deserialize, Serialize};

use crate::cellsolver::CellSolution;
use crate::error::{Error, Result};
use crate::grid::{PeriodicGrid, SpectralDiff};

/// Reference norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-14;

/// A corrector pair with its gradient planes
/// `[d1 chi_1, d2 chi_1, d1 chi_2, d2 chi_2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Corrector {
    pub grid: PeriodicGrid,
    pub chi: [Vec<f64>; 2],
    pub grad: [Vec<f64>; 4],
}

impl Corrector {
    pub fn new(grid: PeriodicGrid, chi: [Vec<f64>; 2], grad: [Vec<f64>; 4]) -> Result<Self> {
        if chi.iter().chain(grad.iter()).any(|v| v.len() != grid.len()) {
            return Err(Error::InvalidArgument("corrector planes do not match the grid".into()));
        }
        Ok(Self { grid, chi, grad })
    }

    /// Solver output with its finite-element gradients.
    pub fn from_solution(sol: &CellSolution) -> Self {
        Self {
            grid: sol.grid,
            chi: [sol.chi[0].values.clone(), sol.chi[1].values.clone()],
            grad: [
                sol.grad_chi[0].components[0].clone(),
                sol.grad_chi[0].components[1].clone(),
                sol.grad_chi[1].components[0].clone(),
                sol.grad_chi[1].components[1].clone(),
            ],
        }
    }

    /// Corrector whose gradients are computed spectrally from `chi`.
    pub fn with_spectral_gradient(grid: PeriodicGrid, chi: [Vec<f64>; 2]) -> Result<Self> {
        let mut diff = SpectralDiff::<f64>::new(grid)?;
        let mut grad: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; grid.len()]);
        for l in 0..2 {
            let (a, b) = grad.split_at_mut(2 * l + 1);
            diff.gradient_into(&chi[l], &mut a[2 * l], &mut b[0]);
        }
        Self::new(grid, chi, grad)
    }

    pub fn respectral(&self) -> Result<Self> {
        Self::with_spectral_gradient(self.grid, self.chi.clone())
    }

    /// Planes `chi_1, chi_2` followed by the four gradient planes.
    pub fn plane(&self, k: usize) -> &[f64] {
        if k < 2 {
            &self.chi[k]
        } else {
            &self.grad[k - 2]
        }
    }

    fn check_pair(&self, other: &Self) -> Result<()> {
        self.grid.ensure_same(&other.grid)
    }
}

/// `(sum |u|^p h^2, sum |grad u|^p h^2)` of `pred - truth` (of `truth`
/// alone when `pred` is `None`), with every value divided by `scale`.
fn powered_norms(truth: &Corrector, pred: Option<&Corrector>, p: f64, scale: f64) -> (f64, f64) {
    let value = |k: usize, q: usize| {
        let t = truth.plane(k)[q];
        pred.map_or(t, |pr| pr.plane(k)[q] - t) / scale
    };
    let mut u = 0.0;
    let mut g = 0.0;
    for q in 0..truth.grid.len() {
        let su = value(0, q).powi(2) + value(1, q).powi(2);
        let sg: f64 = (2..6).map(|k| value(k, q).powi(2)).sum();
        if p == 2.0 {
            u += su;
            g += sg;
        } else {
            u += su.powf(0.5 * p);
            g += sg.powf(0.5 * p);
        }
    }
    let area = truth.grid.cell_area();
    (u * area, g * area)
}

fn max_abs(truth: &Corrector, pred: Option<&Corrector>) -> f64 {
    let mut m: f64 = 0.0;
    for k in 0..6 {
        let t = truth.plane(k);
        for q in 0..t.len() {
            m = m.max(pred.map_or(t[q], |pr| pr.plane(k)[q] - t[q]).abs());
        }
    }
    m
}

/// Squared `H^1` distance `|chi - chi^|_{L^2}^2 + |grad chi - grad chi^|_{L^2}^2`.
pub fn h1_error_sq(pred: &Corrector, truth: &Corrector) -> Result<f64> {
    pred.check_pair(truth)?;
    let (u, g) = powered_norms(truth, Some(pred), 2.0, 1.0);
    Ok(u + g)
}

pub fn h1_norm_sq(truth: &Corrector) -> f64 {
    let (u, g) = powered_norms(truth, None, 2.0, 1.0);
    u + g
}

/// Mean squared `H^1` distance over a batch.
pub fn h1_loss(preds: &[Corrector], truths: &[Corrector]) -> Result<f64> {
    if preds.len() != truths.len() || preds.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "batch sizes differ or are empty: {} vs {}",
            preds.len(),
            truths.len()
        )));
    }
    let mut total = 0.0;
    for (p, t) in preds.iter().zip(truths) {
        total += h1_error_sq(p, t)?;
    }
    Ok(total / preds.len() as f64)
}

/// Per-sample relative `W^{1,p}` error
/// `((|e|_p^p + |grad e|_p^p) / (|chi|_p^p + |grad chi|_p^p))^{1/p}`.
pub fn relative_error(pred: &Corrector, truth: &Corrector, p: f64) -> Result<Option<f64>> {
    pred.check_pair(truth)?;
    let ts = max_abs(truth, None);
    if ts == 0.0 {
        return Ok(None);
    }
    let (tu, tg) = powered_norms(truth, None, p, ts);
    let tnorm = (tu + tg).powf(1.0 / p) * ts;
    if tnorm < ZERO_NORM {
        return Ok(None);
    }
    let es = max_abs(truth, Some(pred));
    if es == 0.0 {
        return Ok(Some(0.0));
    }
    let (eu, eg) = powered_norms(truth, Some(pred), p, es);
    let enorm = (eu + eg).powf(1.0 / p) * es;
    Ok(Some(enorm / tnorm))
}

fn relative_errors(preds: &[Corrector], truths: &[Corrector], p: f64) -> Result<Vec<f64>> {
    if preds.len() != truths.len() || preds.is_empty() {
        return Err(Error::InvalidArgument("batch sizes differ or are empty".into()));
    }
    let mut out = Vec::with_capacity(preds.len());
    let mut zero = Vec::new();
    for (k, (pr, t)) in preds.iter().zip(truths).enumerate() {
        match relative_error(pr, t, p)? {
            Some(v) => out.push(v),
            None => zero.push(k),
        }
    }
    if !zero.is_empty() {
        return Err(Error::ZeroNorm(zero));
    }
    Ok(out)
}

pub fn rhe_samples(preds: &[Corrector], truths: &[Corrector]) -> Result<Vec<f64>> {
    relative_errors(preds, truths, 2.0)
}

pub fn rwe_samples(preds: &[Corrector], truths: &[Corrector]) -> Result<Vec<f64>> {
    relative_errors(preds, truths, 10.0)
}

pub fn rhe(preds: &[Corrector], truths: &[Corrector]) -> Result<f64> {
    Ok(mean(&rhe_samples(preds, truths)?))
}

pub fn rwe(preds: &[Corrector], truths: &[Corrector]) -> Result<f64> {
    Ok(mean(&rwe_samples(preds, truths)?))
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (`n - 1` denominator, zero for one sample).
pub fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len();
    if k == 0 {
        f64::NAN
    } else if k % 2 == 1 {
        s[k / 2]
    } else {
        0.5 * (s[k / 2 - 1] + s[k / 2])
    }
}

/// Linear-interpolated quantile, `q` in `[0, 1]`.
pub fn quantile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    if s.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub mean_rhe: f64,
    pub std_rhe: f64,
    pub mean_rwe: f64,
    pub std_rwe: f64,
    pub median_rae: f64,
    pub std_rae: f64,
    pub rhe: Vec<f64>,
    pub rwe: Vec<f64>,
    pub rae: Vec<f64>,
    /// Same errors with reference gradients recomputed spectrally.
    pub spectral_mean_rhe: f64,
    pub spectral_mean_rwe: f64,
}

impl ErrorReport {
    pub fn from_samples(rhe: Vec<f64>, rwe: Vec<f64>, rae: Vec<f64>, spectral_rhe: &[f64], spectral_rwe: &[f64]) -> Result<Self> {
        if rhe.iter().chain(&rwe).chain(&rae).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::NonFinite("error report"));
        }
        Ok(Self {
            mean_rhe: mean(&rhe),
            std_rhe: std_dev(&rhe),
            mean_rwe: mean(&rwe),
            std_rwe: std_dev(&rwe),
            median_rae: median(&rae),
            std_rae: std_dev(&rae),
            spectral_mean_rhe: mean(spectral_rhe),
            spectral_mean_rwe: mean(spectral_rwe),
            rhe,
            rwe,
            rae,
        })
    }

    /// CSV with one row per sample.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample,rhe,rwe,rae\n");
        for k in 0..self.rhe.len() {
            let rae = self.rae.get(k).map_or(String::new(), |v| format!("{v:e}"));
            s.push_str(&format!("{k},{:e},{:e},{rae}\n", self.rhe[k], self.rwe[k]));
        }
        s
    }
}
