//! End-to-end acceptance checks. Runs every criterion, prints one PASS/FAIL
//! line each, and exits non-zero if any failed.
//!
//! The learning criteria train 46 desk-scale models and take about two and a half
//! hours on one core. Set `CELLHOM_ACCEPTANCE_SKIP_TRAINING=1` to run only
//! the fast criteria.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::time::Instant;

use cellhom::cellsolver::{fitted_rate, solve_cell, SolveOptions};
use cellhom::dataio::{self, Dataset, Record};
use cellhom::fno::{self, FnoConfig, FnoParams, TrainConfig, Workspace};
use cellhom::homogenize::{compute_abar, frobenius, frobenius_distance};
use cellhom::microstructure::{self as ms, MicrostructureKind, SamplerConfig, SquareBoundary};
use cellhom::stability::{empirical_l2_modulus, run_harness, Perturbation, StabilityReport};
use cellhom::{PeriodicGrid, Result};
use rand::{Rng, SeedableRng};

const N: usize = 64;
const TRAIN: usize = 512;
const TEST: usize = 64;
const SEEDS: u64 = 5;
const SIZES: [usize; 4] = [64, 128, 256, 512];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { pass, detail: detail.into() })
}

fn grid(n: usize) -> PeriodicGrid {
    PeriodicGrid::new(n).expect("valid grid")
}

fn opts() -> SolveOptions {
    SolveOptions::default()
}

fn solver_exactness() -> Result<Outcome> {
    let c = 2.7;
    let a = ms::constant(grid(32), [c, 0.0, c]);
    let sol = solve_cell(&a, &opts())?;
    let h = compute_abar(&a, &sol)?;
    let chi_max = sol.chi.iter().flat_map(|f| f.values.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    let const_err = frobenius_distance(&h.abar, &[[c, 0.0], [0.0, c]]);

    let a = ms::layered(grid(64), 1.0, 4.0);
    let sol = solve_cell(&a, &opts())?;
    let h = compute_abar(&a, &sol)?;
    let layered_err = frobenius_distance(&h.abar, &[[1.6, 0.0], [0.0, 2.5]]);
    let chi2_max = sol.chi[1].values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    outcome(
        chi_max < 1e-10 && const_err < 1e-10 && layered_err < 1e-8 && chi2_max < 1e-10,
        format!("cI: max|chi| {chi_max:.1e}, |abar - cI| {const_err:.1e}; layered: |abar - diag(1.6, 2.5)| {layered_err:.1e}, max|chi_2| {chi2_max:.1e}"),
    )
}

fn checkerboard() -> Result<Outcome> {
    let a = ms::checkerboard(grid(256), 1.0, 4.0);
    let h = compute_abar(&a, &solve_cell(&a, &opts())?)?;
    let rel = frobenius_distance(&h.abar, &[[2.0, 0.0], [0.0, 2.0]]) / 2.0;
    outcome(rel < 0.02, format!("|abar - 2I|_F / 2 = {rel:.4} at n = 256"))
}

fn stability_suite() -> Result<Outcome> {
    let mut pass = true;
    let mut parts = Vec::new();
    for kind in MicrostructureKind::RANDOM {
        let r = run_harness(&SamplerConfig::new(kind, 11, N), 50, 10.0, &opts())?;
        let slack = [&r.apriori, &r.linf, &r.lq].iter().map(|c| StabilityReport::max_slack(c)).fold(0.0, f64::max);
        pass &= r.all_pass() && slack <= 1.05;
        parts.push(format!("{} max ratio {slack:.3}", kind.name()));
    }
    // Star interfaces pass exactly through grid nodes on the centre row, so a
    // rasterized star jumps under any nonzero shift; its table is not used here.
    let amps = [5e-2, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6];
    let families = [
        (MicrostructureKind::Smooth, Perturbation::Translation, "translation"),
        (MicrostructureKind::Voronoi, Perturbation::Translation, "translation"),
        (MicrostructureKind::Square, Perturbation::SquareInterface, "interface shift"),
    ];
    for (kind, family, label) in families {
        let m = ms::draw(&SamplerConfig::new(kind, 11, N), 0)?;
        let rows = empirical_l2_modulus(&m, grid(N), family, &amps, &opts())?;
        let decay = rows.last().map(|r| r.corrector_h1).unwrap_or(f64::NAN) / rows[0].corrector_h1;
        pass &= decay < 0.01;
        parts.push(format!("{} {label} decay {decay:.2e}", kind.name()));
    }
    outcome(pass, parts.join("; "))
}

fn voigt_reuss() -> Result<Outcome> {
    let mut worst = f64::NEG_INFINITY;
    for kind in MicrostructureKind::RANDOM {
        let cfg = SamplerConfig::new(kind, 21, N);
        for idx in 0..100 {
            let a = ms::sample(&cfg, idx)?;
            let h = compute_abar(&a, &solve_cell(&a, &opts())?)?;
            let f = frobenius(&h.abar);
            let below = (h.a_h - 1e-6 * h.a_m - f) / h.a_m;
            let above = (f - h.a_m * (1.0 + 1e-6)) / h.a_m;
            worst = worst.max(below).max(above);
        }
    }
    outcome(worst <= 0.0, format!("400 samples, largest relative violation {worst:.2e} (must be <= 0)"))
}

fn gradient_check() -> Result<Outcome> {
    let n = 8;
    let cfg = FnoConfig { width: 2, modes: 2, layers: 4, normalize_inputs: false };
    let mut p = FnoParams::<f64>::init(&cfg, 5)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    for l in p.layers.iter_mut() {
        l.spectral.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
    }
    let input: Vec<f64> = (0..3 * n * n).map(|_| rng.gen_range(0.4..2.5)).collect();
    let chi: Vec<f64> = (0..2 * n * n).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let grad: Vec<f64> = (0..4 * n * n).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let mut ws = Workspace::new(&cfg, n)?;
    let loss = |p: &FnoParams<f64>, ws: &mut Workspace<f64>| -> Result<f64> {
        let mut g = FnoParams::zeros(&cfg);
        p.forward_backward(&input, &chi, &grad, 1.0, ws, &mut g)
    };
    let mut g = FnoParams::zeros(&cfg);
    p.forward_backward(&input, &chi, &grad, 1.0, &mut ws, &mut g)?;
    let analytic: Vec<(String, Vec<f64>)> = g.tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
    let mut worst: (f64, String) = (0.0, String::new());
    for (ti, (name, values)) in analytic.iter().enumerate() {
        for (k, &a) in values.iter().enumerate() {
            let orig = p.tensors()[ti].1[k];
            p.tensors_mut()[ti][k] = orig + 1e-6;
            let lp = loss(&p, &mut ws)?;
            p.tensors_mut()[ti][k] = orig - 1e-6;
            let lm = loss(&p, &mut ws)?;
            p.tensors_mut()[ti][k] = orig;
            let fd = (lp - lm) / 2e-6;
            let err = (fd - a).abs() / a.abs().max(fd.abs()).max(1e-4);
            if err > worst.0 {
                worst = (err, format!("{name}[{k}]"));
            }
        }
    }
    outcome(worst.0 < 1e-5, format!("{} parameters, max relative error {:.2e} at {}", g.parameter_count(), worst.0, worst.1))
}

type ModelKey = (&'static str, usize, u64);
type TrainedModel = (FnoParams<f32>, fno::TrainHistory, cellhom::metrics::ErrorReport);

/// Generated train/test sets and trained models shared by the learning
/// criteria.
struct Lab {
    data: HashMap<&'static str, (Dataset, Dataset)>,
    /// `(class, N, seed)` -> best-by-test-RHE model and its test report.
    models: HashMap<ModelKey, TrainedModel>,
}

fn class_sampler(kind: MicrostructureKind) -> SamplerConfig {
    SamplerConfig::new(kind, 2024, N)
}

impl Lab {
    fn new() -> Self {
        Self { data: HashMap::new(), models: HashMap::new() }
    }

    fn data(&mut self, kind: MicrostructureKind) -> Result<&(Dataset, Dataset)> {
        if !self.data.contains_key(kind.name()) {
            let s = class_sampler(kind);
            let (train, q1) = dataio::generate(&s, &opts(), 0, TRAIN, 0)?;
            let (test, q2) = dataio::generate(&s, &opts(), TRAIN as u64, TEST, 0)?;
            assert!(q1.is_empty() && q2.is_empty(), "solver failures during generation");
            self.data.insert(kind.name(), (train, test));
        }
        Ok(&self.data[kind.name()])
    }

    fn model(&mut self, kind: MicrostructureKind, n_train: usize, seed: u64) -> Result<&(FnoParams<f32>, fno::TrainHistory, cellhom::metrics::ErrorReport)> {
        let key = (kind.name(), n_train, seed);
        if !self.models.contains_key(&key) {
            let (train, test) = self.data(kind)?;
            let tc = TrainConfig { seed, ..TrainConfig::default() };
            let start = Instant::now();
            let out = fno::train::<f32>(&train.records[..n_train], &test.records, N, &FnoConfig::default(), &tc)?;
            let report = fno::evaluate(&out.best, &test.records, N)?;
            eprintln!(
                "  trained {} N={n_train} seed={seed}: RHE {:.4}, median RAE {:.4} ({:.0}s)",
                kind.name(),
                report.mean_rhe,
                report.median_rae,
                start.elapsed().as_secs_f64()
            );
            self.models.insert(key, (out.best, out.history, report));
        }
        Ok(&self.models[&key])
    }
}

fn figure_ordering(lab: &mut Lab) -> Result<Outcome> {
    let classes = [MicrostructureKind::Smooth, MicrostructureKind::Star, MicrostructureKind::Voronoi];
    let mut rhe: HashMap<&str, Vec<f64>> = HashMap::new();
    for seed in 0..SEEDS {
        for kind in classes {
            let r = lab.model(kind, TRAIN, seed)?.2.mean_rhe;
            rhe.entry(kind.name()).or_default().push(r);
        }
    }
    let mean = |k: &str| cellhom::metrics::mean(&rhe[k]);
    let ordered = (0..SEEDS as usize)
        .filter(|&s| rhe["smooth"][s] < rhe["star"][s] && rhe["star"][s] < rhe["voronoi"][s])
        .count();
    let (sm, st, vo) = (mean("smooth"), mean("star"), mean("voronoi"));
    outcome(
        sm < 0.10 && vo < 0.25 && ordered >= 4,
        format!("mean RHE smooth {sm:.4} (< 0.10), star {st:.4}, voronoi {vo:.4} (< 0.25); ordering in {ordered}/5 replicas"),
    )
}

fn data_scaling(lab: &mut Lab) -> Result<Outcome> {
    let xs: Vec<f64> = SIZES.iter().map(|&n| n as f64).collect();
    let mut slopes: HashMap<&str, Vec<f64>> = HashMap::new();
    let mut curves: HashMap<&str, Vec<f64>> = HashMap::new();
    for kind in [MicrostructureKind::Smooth, MicrostructureKind::Voronoi] {
        let mut mean_curve = vec![0.0; SIZES.len()];
        for seed in 0..SEEDS {
            let ys: Vec<f64> = SIZES.iter().map(|&n| lab.model(kind, n, seed).map(|m| m.2.mean_rhe)).collect::<Result<_>>()?;
            for (m, y) in mean_curve.iter_mut().zip(&ys) {
                *m += y / SEEDS as f64;
            }
            slopes.entry(kind.name()).or_default().push(-fitted_rate(&xs, &ys));
        }
        curves.insert(kind.name(), mean_curve);
    }
    let mean_slope = |k: &str| -fitted_rate(&xs, &curves[k]);
    let (ss, vs) = (mean_slope("smooth"), mean_slope("voronoi"));
    let steeper = (0..SEEDS as usize).filter(|&s| slopes["smooth"][s] < slopes["voronoi"][s]).count();
    outcome(
        ss < 0.0 && vs < 0.0 && steeper >= 4,
        format!("slope smooth {ss:.3}, voronoi {vs:.3}; smooth steeper in {steeper}/5 replicas"),
    )
}

fn band_limited_input(n: usize) -> Vec<f64> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    let waves: Vec<[f64; 4]> = (0..6)
        .map(|_| [rng.gen_range(0..=12) as f64, rng.gen_range(-12..=12) as f64, rng.gen_range(-0.15..0.15), rng.gen_range(0.0..TAU)])
        .collect();
    let mut v = vec![0.0; 3 * n * n];
    for c in 0..3 {
        let base = if c == 1 { 0.0 } else { 1.2 };
        for j in 0..n {
            for i in 0..n {
                let x = [i as f64 / n as f64, j as f64 / n as f64];
                v[c * n * n + j * n + i] = base
                    + waves.iter().map(|w| w[2] * (TAU * (w[0] * x[0] + w[1] * x[1]) + w[3] + c as f64).cos()).sum::<f64>();
            }
        }
    }
    v
}

fn resolution_transfer(lab: &mut Lab) -> Result<Outcome> {
    let (params, _, report) = lab.model(MicrostructureKind::Smooth, TRAIN, 0)?.clone();
    let base = report.mean_rhe;
    let mut factors = Vec::new();
    for m in [32, 128] {
        let s = SamplerConfig { grid_n: m, ..class_sampler(MicrostructureKind::Smooth) };
        let (test, _) = dataio::generate(&s, &opts(), TRAIN as u64, TEST, 0)?;
        factors.push((m, fno::evaluate(&params, &test.records, m)?.mean_rhe / base));
    }
    let wide: FnoParams<f64> = params.cast();
    let coarse = wide.predict(&band_limited_input(N), N)?;
    let fine = wide.predict(&band_limited_input(2 * N), 2 * N)?;
    let mut gap = 0.0f64;
    for l in 0..2 {
        for j in 0..N {
            for i in 0..N {
                gap = gap.max((coarse[l][j * N + i] - fine[l][2 * j * 2 * N + 2 * i]).abs());
            }
        }
    }
    let ok = factors.iter().all(|(_, f)| *f < 3.0) && gap <= 1e-6;
    outcome(
        ok,
        format!(
            "RHE at 64: {base:.4}; degradation x{:.2} at 32, x{:.2} at 128; band-limited max node gap {gap:.2e} (<= 1e-6)",
            factors[0].1, factors[1].1
        ),
    )
}

fn rae_quality(lab: &mut Lab) -> Result<Outcome> {
    let mut parts = Vec::new();
    let mut pass = true;
    for kind in [MicrostructureKind::Smooth, MicrostructureKind::Voronoi] {
        let med: Vec<f64> = (0..SEEDS).map(|s| lab.model(kind, TRAIN, s).map(|m| m.2.median_rae)).collect::<Result<_>>()?;
        let m = cellhom::metrics::mean(&med);
        pass &= m < 0.05;
        parts.push(format!("{} median RAE {m:.4}", kind.name()));
    }
    outcome(pass, format!("{} (each < 0.05, mean over 5 replicas)", parts.join(", ")))
}

fn grid_ambiguity(lab: &mut Lab) -> Result<Outcome> {
    let params = lab.model(MicrostructureKind::Square, TRAIN, 0)?.0.clone();
    let sets: Vec<Vec<Record>> = [SquareBoundary::Open, SquareBoundary::Closed]
        .into_iter()
        .map(|b| {
            let s = SamplerConfig { square_boundary: b, ..class_sampler(MicrostructureKind::Square) };
            dataio::generate(&s, &opts(), TRAIN as u64, TEST, 0).map(|d| d.0.records)
        })
        .collect::<Result<_>>()?;
    let r = fno::grid_ambiguity(&params, &sets[0], &sets[1], N)?;
    let ratio = r.ratio();
    outcome(
        (0.5..=4.0).contains(&ratio),
        format!("|out(open) - out(closed)|_H1 {:.4}, true error {:.4}, ratio {ratio:.2} (in [0.5, 4])", r.output_difference, r.true_error),
    )
}

fn format_and_determinism() -> Result<Outcome> {
    let s = SamplerConfig::new(MicrostructureKind::Smooth, 8, N);
    let (one, _) = dataio::generate(&s, &opts(), 0, 8, 1)?;
    let (many, _) = dataio::generate(&s, &opts(), 0, 8, 8)?;
    let bytes = one.encode()?;
    let workers_equal = bytes == many.encode()?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("set.chd");
    one.write(&path)?;
    let back = Dataset::read(&path)?;
    let round_trip = back == one && back.encode()? == bytes && std::fs::read(&path)? == bytes;

    let small = SamplerConfig::new(MicrostructureKind::Star, 8, 32);
    let (train, _) = dataio::generate(&small, &opts(), 0, 24, 0)?;
    let (test, _) = dataio::generate(&small, &opts(), 24, 8, 0)?;
    let cfg = FnoConfig { width: 8, modes: 6, ..FnoConfig::default() };
    let tc = TrainConfig { epochs: 3, batch_size: 5, seed: 4, ..TrainConfig::default() };
    let a = fno::train::<f32>(&train.records, &test.records, 32, &cfg, &tc)?;
    let b = fno::train::<f32>(&train.records, &test.records, 32, &cfg, &tc)?;
    let bits = |h: &fno::TrainHistory| h.train_loss.iter().chain(&h.test_rhe).map(|v| v.to_bits()).collect::<Vec<_>>();
    let training_equal = bits(&a.history) == bits(&b.history) && a.last == b.last;
    outcome(
        workers_equal && round_trip && training_equal,
        format!("round trip {round_trip}, 1 vs 8 workers identical {workers_equal}, repeated training identical {training_equal}"),
    )
}

fn main() {
    let skip_training = std::env::var_os("CELLHOM_ACCEPTANCE_SKIP_TRAINING").is_some();
    let mut lab = Lab::new();
    type Check<'a> = (u32, &'a str, Box<dyn FnMut(&mut Lab) -> Result<Outcome>>, bool);
    let checks: Vec<Check> = vec![
        (1, "solver exactness", Box::new(|_| solver_exactness()), false),
        (2, "checkerboard", Box::new(|_| checkerboard()), false),
        (3, "stability suite", Box::new(|_| stability_suite()), false),
        (4, "Voigt-Reuss containment", Box::new(|_| voigt_reuss()), false),
        (5, "gradient exactness", Box::new(|_| gradient_check()), false),
        (6, "desk-scale learning", Box::new(figure_ordering), true),
        (7, "data scaling", Box::new(data_scaling), true),
        (8, "resolution transfer", Box::new(resolution_transfer), true),
        (9, "RAE quality", Box::new(rae_quality), true),
        (10, "grid ambiguity", Box::new(grid_ambiguity), true),
        (11, "format and determinism", Box::new(|_| format_and_determinism()), false),
    ];
    let mut failed = 0;
    for (id, name, mut run, trains) in checks {
        if trains && skip_training {
            println!("SKIP criterion {id:>2} {name}: training disabled");
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match run(&mut lab) {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!(
            "{} criterion {id:>2} {name}: {detail} [{:.0}s]",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
