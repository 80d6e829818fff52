use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cellhom::cellsolver::convergence_study;
use cellhom::dataio::{self, Dataset, RunConfig};
use cellhom::fno::{self, FnoParams};
use cellhom::metrics::{mean, std_dev, ErrorReport};
use cellhom::microstructure::{self, SamplerConfig};
use cellhom::stability::{run_harness, StabilityReport};
use cellhom::{Error, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

/// Periodic cell-problem homogenization and its neural-operator surrogate.
#[derive(Parser)]
#[command(name = "cellhom", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample and solve training and test sets.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured worker count (0 = all cores).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Train one model per replica on generated data.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Error report of a checkpoint on a dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Second dataset with the same samples and the other boundary
        /// convention; adds the grid-ambiguity comparison.
        #[arg(long)]
        against: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stability inequalities over the configured classes.
    Stability {
        #[arg(long)]
        config: PathBuf,
    },
    /// Self-convergence of the solver on the configured sampler.
    Convergence {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the JSON header of a dataset or checkpoint.
    Inspect { file: PathBuf },
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    dataio::write_atomic(path, text.as_bytes())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    dataio::write_atomic(path, text.as_bytes())
}

fn generate(cfg: &RunConfig, workers: Option<usize>) -> Result<bool> {
    let workers = workers.unwrap_or(cfg.workers);
    let mut quarantined = Vec::new();
    for (path, first, count) in [
        (cfg.train_path(), 0, cfg.train_count),
        (cfg.test_path(), cfg.train_count as u64, cfg.test_count),
    ] {
        let (data, q) = dataio::generate(&cfg.sampler, &cfg.solver, first, count, workers)?;
        data.write(&path)?;
        println!("{}: {} records", path.display(), data.records.len());
        quarantined.extend(q);
    }
    let sidecar = cfg.output_dir.join("quarantine.json");
    if quarantined.is_empty() {
        return Ok(true);
    }
    eprintln!("{} samples quarantined, see {}", quarantined.len(), sidecar.display());
    write_json(&sidecar, &quarantined)?;
    Ok(false)
}

#[derive(Serialize)]
struct ReplicaSummary {
    replicas: usize,
    mean_rhe: f64,
    sd_rhe: f64,
    mean_rwe: f64,
    sd_rwe: f64,
    median_rae: f64,
    sd_median_rae: f64,
    reports: Vec<ErrorReport>,
}

fn train(cfg: &RunConfig, train_path: Option<PathBuf>, test_path: Option<PathBuf>) -> Result<()> {
    let train_set = Dataset::read(&train_path.unwrap_or_else(|| cfg.train_path()))?;
    let test_set = Dataset::read(&test_path.unwrap_or_else(|| cfg.test_path()))?;
    let n = cfg.sampler.grid_n;
    for d in [&train_set, &test_set] {
        if d.header.grid_n != n {
            return Err(Error::GridMismatch { expected: n, found: d.header.grid_n });
        }
    }
    let mut reports = Vec::new();
    for r in 0..cfg.replicas {
        let mut tc = cfg.train.clone();
        tc.seed = cfg.seed + r as u64;
        let outcome = fno::train_with::<f32>(&train_set.records, &test_set.records, n, &cfg.fno, &tc, |e, h| {
            eprintln!("replica {r} epoch {e}: loss {:.4e}, test RHE {:.4}", h.train_loss[e - 1], h.test_rhe[e - 1]);
        })?;
        let dir = &cfg.output_dir;
        dataio::write_checkpoint(&outcome.best, &dir.join(format!("model_r{r}.ckpt")))?;
        write_text(&dir.join(format!("history_r{r}.csv")), &outcome.history.to_csv())?;
        write_json(
            &dir.join(format!("train_r{r}.log.json")),
            &serde_json::json!({ "wall_seconds": outcome.history.wall_seconds, "best_epoch": outcome.history.best_epoch }),
        )?;
        let report = fno::evaluate(&outcome.best, &test_set.records, n)?;
        write_json(&dir.join(format!("report_r{r}.json")), &report)?;
        write_text(&dir.join(format!("report_r{r}.csv")), &report.to_csv())?;
        println!("replica {r}: mean RHE {:.4}, mean RWE {:.4}, median RAE {:.4}", report.mean_rhe, report.mean_rwe, report.median_rae);
        reports.push(report);
    }
    let col = |f: fn(&ErrorReport) -> f64| reports.iter().map(f).collect::<Vec<f64>>();
    let (rhe, rwe, rae) = (col(|r| r.mean_rhe), col(|r| r.mean_rwe), col(|r| r.median_rae));
    let summary = ReplicaSummary {
        replicas: reports.len(),
        mean_rhe: mean(&rhe),
        sd_rhe: std_dev(&rhe),
        mean_rwe: mean(&rwe),
        sd_rwe: std_dev(&rwe),
        median_rae: mean(&rae),
        sd_median_rae: std_dev(&rae),
        reports,
    };
    if summary.replicas > 1 {
        println!("RHE {:.4} ± {:.4} over {} replicas", summary.mean_rhe, summary.sd_rhe, summary.replicas);
    }
    write_json(&cfg.output_dir.join("summary.json"), &summary)
}

fn evaluate(checkpoint: &Path, dataset: &Path, against: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let params: FnoParams<f32> = dataio::read_checkpoint(checkpoint)?;
    let data = Dataset::read(dataset)?;
    let n = data.header.grid_n;
    let report = fno::evaluate(&params, &data.records, n)?;
    let mut value = serde_json::to_value(&report)?;
    println!("mean RHE {:.4}, mean RWE {:.4}, median RAE {:.4}", report.mean_rhe, report.mean_rwe, report.median_rae);
    if let Some(other) = against {
        let other = Dataset::read(&other)?;
        if other.header.grid_n != n {
            return Err(Error::GridMismatch { expected: n, found: other.header.grid_n });
        }
        let amb = fno::grid_ambiguity(&params, &data.records, &other.records, n)?;
        println!("output difference {:.4}, true error {:.4}", amb.output_difference, amb.true_error);
        value["ambiguity"] = serde_json::to_value(amb)?;
    }
    if let Some(path) = out {
        write_json(&path.with_extension("json"), &value)?;
        write_text(&path.with_extension("csv"), &report.to_csv())?;
    }
    Ok(())
}

fn stability(cfg: &RunConfig) -> Result<bool> {
    let mut all = true;
    for &kind in &cfg.stability_classes {
        let sampler = SamplerConfig { kind, ..cfg.sampler.clone() };
        let report = run_harness(&sampler, cfg.stability_pairs, cfg.stability_p, &cfg.solver)?;
        let name = kind.name();
        write_json(&cfg.output_dir.join(format!("stability_{name}.json")), &report)?;
        write_text(&cfg.output_dir.join(format!("stability_{name}.csv")), &report.to_csv())?;
        println!(
            "{name}: a priori {}/{}, L-infinity {}/{}, Lq {}/{}",
            StabilityReport::passed(&report.apriori),
            report.apriori.len(),
            StabilityReport::passed(&report.linf),
            report.linf.len(),
            StabilityReport::passed(&report.lq),
            report.lq.len()
        );
        all &= report.all_pass();
    }
    Ok(all)
}

/// Differences below this are reported as exact.
const EXACT: f64 = 1e-10;

fn convergence(cfg: &RunConfig) -> Result<()> {
    let m = microstructure::draw(&cfg.sampler, 0)?;
    let table = convergence_study(&m, &cfg.convergence_sizes, &cfg.solver)?;
    let exact = table.rows.iter().all(|r| r.h1_difference < EXACT && r.abar_difference < EXACT);
    let mut csv = String::from("n,h1_difference,abar_difference\n");
    for r in &table.rows {
        csv.push_str(&format!("{},{:e},{:e}\n", r.n, r.h1_difference, r.abar_difference));
    }
    let name = cfg.sampler.kind.name();
    write_text(&cfg.output_dir.join(format!("convergence_{name}.csv")), &csv)?;
    let mut value = serde_json::to_value(&table)?;
    value["exact"] = serde_json::json!(exact);
    write_json(&cfg.output_dir.join(format!("convergence_{name}.json")), &value)?;
    if exact {
        println!("{name}: exact (all differences below {EXACT:e})");
    } else {
        println!("{name}: H1 rate {:.3}, abar rate {:.3}", table.h1_rate, table.abar_rate);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let ok = match cli.command {
        Command::Generate { config, workers } => generate(&RunConfig::load(&config)?, workers)?,
        Command::Train { config, train: tr, test } => {
            train(&RunConfig::load(&config)?, tr, test)?;
            true
        }
        Command::Evaluate { checkpoint, dataset, against, out } => {
            evaluate(&checkpoint, &dataset, against, out)?;
            true
        }
        Command::Stability { config } => stability(&RunConfig::load(&config)?)?,
        Command::Convergence { config } => {
            convergence(&RunConfig::load(&config)?)?;
            true
        }
        Command::Inspect { file } => {
            println!("{}", serde_json::to_string_pretty(&dataio::inspect(&file)?)?);
            true
        }
    };
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(3) })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
