//! Binary container for datasets and checkpoints, run configuration, and
//! parallel dataset generation.
//!
//! Layout: `b"CELLHOM1"`, header length as `u64` little-endian, UTF-8 JSON
//! header, payload, then CRC-64/XZ of the payload as `u64` little-endian.
//! Readers validate the whole file before returning anything.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crc::{Crc, CRC_64_XZ};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cellsolver::{solve_cell, CellSolution, SolveOptions};
use crate::error::{Error, Result};
use crate::fno::{FnoConfig, FnoParams, TrainConfig};
use crate::grid::{PeriodicGrid, SymMatrixField};
use crate::homogenize::{compute_abar, HomogenizedTensor};
use crate::metrics::Corrector;
use crate::microstructure::{self, CoefficientField, SamplerConfig};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"CELLHOM1";
pub const FORMAT_VERSION: u32 = 1;
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);
/// Refuse headers larger than this before allocating.
const MAX_HEADER: u64 = 1 << 24;

/// Raw container contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: serde_json::Value,
    pub payload: Vec<u8>,
}

pub fn encode_container(header: &serde_json::Value, payload: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    out.extend_from_slice(&CRC64.checksum(payload).to_le_bytes());
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < MAGIC.len() + 16 {
        return Err(Error::Format(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    if hlen > MAX_HEADER || hlen as usize > bytes.len() - 24 {
        return Err(Error::Format(format!("header length {hlen} exceeds file size {}", bytes.len())));
    }
    let hend = 16 + hlen as usize;
    let header: serde_json::Value =
        serde_json::from_slice(&bytes[16..hend]).map_err(|e| Error::Format(format!("header is not valid JSON: {e}")))?;
    let version = header.get("format_version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(Error::Format(format!("unsupported format version {version:?}")));
    }
    let payload = &bytes[hend..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
    if CRC64.checksum(payload) != stored {
        return Err(Error::Format("payload checksum mismatch".into()));
    }
    Ok(Container { header, payload: payload.to_vec() })
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// One solved sample: coefficient channels, correctors, nodal gradients and
/// homogenized quantities.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    /// `a11, a12, a22` planes.
    pub a: Vec<f32>,
    /// `chi_1, chi_2` planes.
    pub chi: Vec<f32>,
    /// `d1 chi_1, d2 chi_1, d1 chi_2, d2 chi_2` planes.
    pub grad: Vec<f32>,
    /// Row-major `abar`.
    pub abar: [f64; 4],
    pub a_m: f64,
    pub a_h: f64,
}

impl Record {
    pub fn from_solution(a: &CoefficientField, sol: &CellSolution, h: &HomogenizedTensor) -> Self {
        let c = Corrector::from_solution(sol);
        Self {
            a: a.channels::<f32>(),
            chi: c.chi.iter().flatten().map(|&x| x as f32).collect(),
            grad: c.grad.iter().flatten().map(|&x| x as f32).collect(),
            abar: [h.abar[0][0], h.abar[0][1], h.abar[1][0], h.abar[1][1]],
            a_m: h.a_m,
            a_h: h.a_h,
        }
    }

    /// Solves the cell problem for `a` and packs the result.
    pub fn solve(a: &CoefficientField, opts: &SolveOptions) -> Result<Self> {
        let sol = solve_cell(a, opts)?;
        let h = compute_abar(a, &sol)?;
        Ok(Self::from_solution(a, &sol, &h))
    }

    pub fn byte_len(n: usize) -> usize {
        9 * n * n * 4 + 6 * 8
    }

    pub fn check_grid(&self, grid: PeriodicGrid) -> Result<()> {
        let len = grid.len();
        let found = self.chi.len() / 2;
        if self.a.len() != 3 * len || self.chi.len() != 2 * len || self.grad.len() != 4 * len {
            return Err(Error::GridMismatch { expected: grid.n(), found: (found as f64).sqrt() as usize });
        }
        Ok(())
    }

    /// Coefficient field rebuilt from the stored channels, with bounds taken
    /// from its own nodal eigenvalues.
    pub fn coefficient(&self, grid: PeriodicGrid) -> Result<CoefficientField> {
        self.check_grid(grid)?;
        let len = grid.len();
        let plane = |c: usize| self.a[c * len..(c + 1) * len].iter().map(|&v| v as f64).collect();
        let entries = SymMatrixField { grid, a11: plane(0), a12: plane(1), a22: plane(2) };
        let mut field = CoefficientField { entries, alpha: 1.0, beta: 1.0 };
        let (lo, hi) = field.eigen_range();
        field.alpha = lo;
        field.beta = hi;
        Ok(field)
    }

    pub fn corrector(&self, grid: PeriodicGrid) -> Result<Corrector> {
        self.check_grid(grid)?;
        let len = grid.len();
        let plane = |v: &[f32], k: usize| v[k * len..(k + 1) * len].iter().map(|&x| x as f64).collect::<Vec<f64>>();
        Corrector::new(grid, [0, 1].map(|k| plane(&self.chi, k)), [0, 1, 2, 3].map(|k| plane(&self.grad, k)))
    }

    /// Coefficient channels converted to the network scalar.
    pub fn input<T: Scalar>(&self) -> Vec<T> {
        self.a.iter().map(|&x| T::lit(x as f64)).collect()
    }

    fn write_to(&self, out: &mut Vec<u8>) {
        for v in self.a.iter().chain(&self.chi).chain(&self.grad) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.abar.iter().chain([&self.a_m, &self.a_h]) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read_from(bytes: &[u8], n: usize) -> Self {
        let len = n * n;
        let f32s = |off: usize, count: usize| -> Vec<f32> {
            bytes[off..off + 4 * count].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()
        };
        let f64_at = |off: usize| f64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"));
        let tail = 36 * len;
        Self {
            a: f32s(0, 3 * len),
            chi: f32s(12 * len, 2 * len),
            grad: f32s(20 * len, 4 * len),
            abar: [f64_at(tail), f64_at(tail + 8), f64_at(tail + 16), f64_at(tail + 24)],
            a_m: f64_at(tail + 32),
            a_h: f64_at(tail + 40),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub dtype: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub kind: String,
    pub grid_n: usize,
    pub count: usize,
    /// Sampler index of the first record; record `k` is sample `first_index + k`.
    pub first_index: u64,
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub solver: SolveOptions,
    pub fields: Vec<FieldSpec>,
}

impl DatasetHeader {
    pub fn new(sampler: &SamplerConfig, solver: &SolveOptions, first_index: u64, count: usize) -> Self {
        let n2 = sampler.grid_n * sampler.grid_n;
        let field = |name: &str, dtype: &str, count: usize| FieldSpec { name: name.into(), dtype: dtype.into(), count };
        Self {
            format_version: FORMAT_VERSION,
            kind: "dataset".into(),
            grid_n: sampler.grid_n,
            count,
            first_index,
            seed: sampler.seed,
            sampler: sampler.clone(),
            solver: *solver,
            fields: vec![
                field("a", "f32", 3 * n2),
                field("chi", "f32", 2 * n2),
                field("grad_chi", "f32", 4 * n2),
                field("abar", "f64", 4),
                field("a_m_a_h", "f64", 2),
            ],
        }
    }

    fn expected_fields(&self) -> Vec<FieldSpec> {
        Self::new(&self.sampler, &self.solver, self.first_index, self.count).fields
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn grid(&self) -> Result<PeriodicGrid> {
        PeriodicGrid::new(self.header.grid_n)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.header.count != self.records.len() {
            return Err(Error::InvalidArgument(format!(
                "header count {} but {} records",
                self.header.count,
                self.records.len()
            )));
        }
        let grid = self.grid()?;
        let mut payload = Vec::with_capacity(self.records.len() * Record::byte_len(grid.n()));
        for r in &self.records {
            r.check_grid(grid)?;
            r.write_to(&mut payload);
        }
        encode_container(&serde_json::to_value(&self.header)?, &payload)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let c = decode_container(bytes)?;
        let header: DatasetHeader =
            serde_json::from_value(c.header).map_err(|e| Error::Format(format!("dataset header: {e}")))?;
        if header.kind != "dataset" {
            return Err(Error::Format(format!("expected a dataset, found {:?}", header.kind)));
        }
        let grid = PeriodicGrid::new(header.grid_n).map_err(|e| Error::Format(e.to_string()))?;
        if header.fields != header.expected_fields() {
            return Err(Error::Format("unexpected field list".into()));
        }
        let size = Record::byte_len(grid.n());
        if c.payload.len() != header.count * size {
            return Err(Error::Format(format!(
                "payload has {} bytes, expected {} records x {size}",
                c.payload.len(),
                header.count
            )));
        }
        let records = c.payload.chunks_exact(size).map(|b| Record::read_from(b, grid.n())).collect();
        Ok(Self { header, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

/// Header-only view of any container file.
pub fn inspect(path: &Path) -> Result<serde_json::Value> {
    Ok(decode_container(&fs::read(path)?)?.header)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quarantined {
    pub index: u64,
    pub error: String,
}

/// Samples and solves `first_index .. first_index + count` on `workers`
/// threads (0 = all cores). Records come back in index order whatever the
/// worker count; failed samples are listed separately.
pub fn generate(
    sampler: &SamplerConfig,
    solver: &SolveOptions,
    first_index: u64,
    count: usize,
    workers: usize,
) -> Result<(Dataset, Vec<Quarantined>)> {
    sampler.validate()?;
    solver.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let results: Vec<Result<Record>> = pool.install(|| {
        (0..count as u64)
            .into_par_iter()
            .map(|k| Record::solve(&microstructure::sample(sampler, first_index + k)?, solver))
            .collect()
    });
    let mut records = Vec::with_capacity(count);
    let mut quarantined = Vec::new();
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Ok(rec) => records.push(rec),
            Err(e @ (Error::NonConvergence { .. } | Error::NonFinite(_) | Error::NotPositiveDefinite { .. })) => {
                quarantined.push(Quarantined { index: first_index + k as u64, error: e.to_string() })
            }
            Err(e) => return Err(e),
        }
    }
    let header = DatasetHeader::new(sampler, solver, first_index, records.len());
    Ok((Dataset { header, records }, quarantined))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format_version: u32,
    kind: String,
    scalar: String,
    fno: FnoConfig,
    input_shift: [f64; 3],
    input_scale: [f64; 3],
    tensors: Vec<(String, usize)>,
}

pub fn encode_checkpoint<T: Scalar>(params: &FnoParams<T>) -> Result<Vec<u8>> {
    let tensors = params.tensors();
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        kind: "checkpoint".into(),
        scalar: T::NAME.into(),
        fno: params.config.clone(),
        input_shift: params.input_shift.map(|v| v.as_f64()),
        input_scale: params.input_scale.map(|v| v.as_f64()),
        tensors: tensors.iter().map(|(n, t)| (n.clone(), t.len())).collect(),
    };
    let mut payload = Vec::with_capacity(8 * params.parameter_count());
    for (_, t) in &tensors {
        for v in t.iter() {
            payload.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    encode_container(&serde_json::to_value(header)?, &payload)
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<FnoParams<T>> {
    let c = decode_container(bytes)?;
    let h: CheckpointHeader =
        serde_json::from_value(c.header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if h.kind != "checkpoint" {
        return Err(Error::Format(format!("expected a checkpoint, found {:?}", h.kind)));
    }
    let total: usize = h.tensors.iter().map(|(_, l)| l).sum();
    if c.payload.len() != 8 * total {
        return Err(Error::Format(format!("payload has {} bytes, expected {}", c.payload.len(), 8 * total)));
    }
    let mut values = c.payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")));
    let named: Vec<(String, Vec<f64>)> =
        h.tensors.iter().map(|(name, len)| (name.clone(), values.by_ref().take(*len).collect())).collect();
    FnoParams::from_tensors(&h.fno, h.input_shift, h.input_scale, &named).map_err(|e| match e {
        Error::Config(m) => Error::Format(m),
        e => e,
    })
}

pub fn write_checkpoint<T: Scalar>(params: &FnoParams<T>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params)?)
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<FnoParams<T>> {
    decode_checkpoint(&fs::read(path)?)
}

/// Everything a CLI run needs. `seed` is copied into the sampler and the
/// trainer; replica `r` trains with `seed + r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub solver: SolveOptions,
    pub fno: FnoConfig,
    pub train: TrainConfig,
    pub train_count: usize,
    pub test_count: usize,
    pub replicas: usize,
    /// Generation threads, 0 = all cores.
    pub workers: usize,
    pub output_dir: PathBuf,
    /// Lebesgue exponent of the stability run (`q` is its conjugate).
    pub stability_p: f64,
    pub stability_pairs: usize,
    pub stability_classes: Vec<microstructure::MicrostructureKind>,
    pub convergence_sizes: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sampler: SamplerConfig::default(),
            solver: SolveOptions::default(),
            fno: FnoConfig::default(),
            train: TrainConfig::default(),
            train_count: 512,
            test_count: 64,
            replicas: 1,
            workers: 0,
            output_dir: PathBuf::from("out"),
            stability_p: 10.0,
            stability_pairs: 50,
            stability_classes: microstructure::MicrostructureKind::RANDOM.to_vec(),
            convergence_sizes: vec![32, 64, 128, 256],
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.sampler.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.solver.validate()?;
        self.fno.validate()?;
        self.train.validate()?;
        if self.train_count == 0 || self.test_count == 0 || self.replicas == 0 {
            return Err(Error::Config("train_count, test_count and replicas must be positive".into()));
        }
        if !(self.stability_p > 2.0) {
            return Err(Error::Config(format!("stability_p must exceed 2, got {}", self.stability_p)));
        }
        Ok(())
    }

    pub fn train_path(&self) -> PathBuf {
        self.output_dir.join("train.chd")
    }

    pub fn test_path(&self) -> PathBuf {
        self.output_dir.join("test.chd")
    }
}
