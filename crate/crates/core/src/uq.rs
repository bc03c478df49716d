//! Uncertainty propagation for the cavity problem.
//!
//! Case A treats Ra and Pr as normal random inputs with uniform walls and
//! builds polynomial chaos surrogates from tensor-grid ensembles. Case B
//! splits the hot wall into strips with i.i.d. normal temperatures and
//! trains one network per output field on Latin hypercube ensembles.
//!
//! Every ensemble lives in its own directory holding `manifest.csv` and one
//! `samples/NNNNN/` folder per sample. Runs resume from the manifest.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use log::{info, warn};
use nalgebra::DMatrix;
use thiserror::Error;

use crate::dnn::{self, DnnError, MlpNetwork, PresetKind, Scaling, TrainConfig};
use crate::grid::{fmt_real, midplane_slice, Axis, GridError, Plane, StructuredGrid};
use crate::pce::{fit_collocation, PceBasis, PceError, PceModel, ResponseSurface};
use crate::sampling::{latin_hypercube, tensor_grid, CounterRng, Marginal, SampleMatrix, SamplingError};
use crate::solver::{
    mean_nusselt, nusselt_field, run_to_steady, BoundarySpec, FlowState, HotWall, SolverConfig, SolverError,
    SteadyDiagnostics,
};

#[derive(Debug, Error)]
pub enum UqError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Pce(#[from] PceError),
    #[error(transparent)]
    Dnn(#[from] DnnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: line {line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },
    #[error("{path} was produced by a different specification; remove it or use another output directory")]
    SpecMismatch { path: PathBuf },
    #[error("{failed} of {total} ensemble samples failed (limit 10%)")]
    TooManyFailures { failed: usize, total: usize },
    #[error("shift of mean undefined: deterministic field is identically zero")]
    UndefinedShift,
    #[error("missing prerequisite {0}")]
    Missing(PathBuf),
    #[error("invalid request: {0}")]
    Invalid(String),
}

/// Largest failed fraction an ensemble tolerates.
pub const MAX_FAILED_FRACTION: f64 = 0.1;

/// Hot wall split into `temps.len()` equal bands along y, bottom first,
/// with the cold wall at 0.95.
pub fn make_strip_boundary(temps: &[f64]) -> Result<BoundarySpec, UqError> {
    strip_boundary(temps, 0.95)
}

fn strip_boundary(temps: &[f64], cold: f64) -> Result<BoundarySpec, UqError> {
    let bc = BoundarySpec {
        cold_wall_theta: cold,
        hot_wall: HotWall::Strips(temps.to_vec()),
    };
    bc.validate()?;
    Ok(bc)
}

/// Field outputs stored per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    /// Local Nusselt number over the hot wall, indexed (j, k).
    NuHot,
    /// Temperature on the z mid-plane, indexed (i, j).
    Theta,
    U,
    V,
}

impl Quantity {
    pub const ALL: [Quantity; 4] = [Quantity::NuHot, Quantity::Theta, Quantity::U, Quantity::V];

    pub fn name(self) -> &'static str {
        match self {
            Quantity::NuHot => "nu_hot",
            Quantity::Theta => "theta_mid",
            Quantity::U => "u_mid",
            Quantity::V => "v_mid",
        }
    }

    pub fn preset(self) -> PresetKind {
        match self {
            Quantity::NuHot => PresetKind::Nusselt,
            Quantity::Theta => PresetKind::Temperature,
            Quantity::U | Quantity::V => PresetKind::Velocity,
        }
    }
}

/// Names of the scalar outputs, in [`Scalars::values`] order.
pub const SCALAR_NAMES: [&str; 6] = ["mean_nu", "max_nu", "mean_u", "max_u", "mean_v", "max_v"];

/// Scalar summaries of one steady solution. Nusselt statistics are over the
/// hot wall; velocity statistics are of |u| and |v| over the whole cube.
#[derive(Debug, Clone, PartialEq)]
pub struct Scalars {
    pub mean_nu: f64,
    pub max_nu: f64,
    pub mean_u: f64,
    pub max_u: f64,
    pub mean_v: f64,
    pub max_v: f64,
    pub steps: usize,
    pub converged: bool,
}

impl Scalars {
    pub fn values(&self) -> [f64; 6] {
        [self.mean_nu, self.max_nu, self.mean_u, self.max_u, self.mean_v, self.max_v]
    }

    pub fn to_json_line(&self) -> String {
        let mut parts: Vec<String> = SCALAR_NAMES
            .iter()
            .zip(self.values())
            .map(|(k, v)| format!("\"{k}\": {}", fmt_real(v)))
            .collect();
        parts.push(format!("\"steps\": {}", self.steps));
        parts.push(format!("\"converged\": {}", self.converged));
        format!("{{{}}}", parts.join(", "))
    }

    pub fn parse_json_line(line: &str) -> Option<Self> {
        let body = line.trim().strip_prefix('{')?.strip_suffix('}')?;
        let mut values = [f64::NAN; 6];
        let (mut steps, mut converged) = (None, None);
        for part in body.split(',') {
            let (k, v) = part.split_once(':')?;
            let (k, v) = (k.trim().trim_matches('"'), v.trim());
            match k {
                "steps" => steps = v.parse().ok(),
                "converged" => converged = v.parse().ok(),
                _ => {
                    let slot = SCALAR_NAMES.iter().position(|n| *n == k)?;
                    values[slot] = v.parse().ok()?;
                }
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some(Self {
            mean_nu: values[0],
            max_nu: values[1],
            mean_u: values[2],
            max_u: values[3],
            mean_v: values[4],
            max_v: values[5],
            steps: steps?,
            converged: converged?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutputs {
    /// In [`Quantity::ALL`] order.
    pub fields: [Plane; 4],
    pub scalars: Scalars,
}

impl SampleOutputs {
    pub fn field(&self, q: Quantity) -> &Plane {
        &self.fields[q as usize]
    }
}

/// Output fields and scalars of a converged (or step-limited) state.
pub fn extract_outputs(state: &FlowState, bc: &BoundarySpec, diag: &SteadyDiagnostics) -> Result<SampleOutputs, UqError> {
    let grid = *state.grid();
    let nu = nusselt_field(state, bc, &grid);
    let abs_stats = |values: &[f64]| {
        let max = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let mean = values.iter().map(|v| v.abs()).sum::<f64>() / values.len() as f64;
        (mean, max)
    };
    let (mean_u, max_u) = abs_stats(state.velocity.u.values());
    let (mean_v, max_v) = abs_stats(state.velocity.v.values());
    let scalars = Scalars {
        mean_nu: mean_nusselt(&nu, grid.h()),
        max_nu: nu.data().iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)),
        mean_u,
        max_u,
        mean_v,
        max_v,
        steps: diag.steps,
        converged: diag.converged,
    };
    let fields = [
        nu,
        midplane_slice(&state.theta, Axis::Z, 0.5)?,
        midplane_slice(&state.velocity.u, Axis::Z, 0.5)?,
        midplane_slice(&state.velocity.v, Axis::Z, 0.5)?,
    ];
    Ok(SampleOutputs { fields, scalars })
}

/// How an ensemble row maps to a solver case.
#[derive(Debug, Clone, PartialEq)]
pub enum EnsembleKind {
    /// Row is (Ra, Pr); walls at the default 0.95 / 1.05.
    RaPr,
    /// Row holds strip temperatures; the cold wall is fixed.
    Strips { cold: f64 },
}

impl EnsembleKind {
    fn tag(&self) -> String {
        match self {
            EnsembleKind::RaPr => "ra_pr".into(),
            EnsembleKind::Strips { cold } => format!("strips(cold={})", fmt_real(*cold)),
        }
    }

    /// Solver configuration and walls for one sample.
    pub fn setup(&self, row: &[f64], base: &SolverConfig) -> Result<(SolverConfig, BoundarySpec), UqError> {
        match self {
            EnsembleKind::RaPr => {
                if row.len() != 2 {
                    return Err(UqError::Invalid("Ra/Pr samples need 2 columns".into()));
                }
                let mut cfg = base.clone();
                cfg.rayleigh = row[0];
                cfg.prandtl = row[1];
                Ok((cfg, BoundarySpec::default()))
            }
            EnsembleKind::Strips { cold } => Ok((base.clone(), strip_boundary(row, *cold)?)),
        }
    }
}

/// Runs one sample to steady state.
pub fn solve_sample(
    kind: &EnsembleKind,
    row: &[f64],
    base: &SolverConfig,
    grid: StructuredGrid,
) -> Result<SampleOutputs, UqError> {
    let (cfg, bc) = kind.setup(row, base)?;
    let (state, diag) = run_to_steady(&cfg, &bc, grid)?;
    if !diag.converged {
        warn!("sample stopped at the step limit ({} steps) before reaching steady state", diag.steps);
    }
    extract_outputs(&state, &bc, &diag)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleStatus {
    Pending,
    Done,
    Failed,
}

impl SampleStatus {
    fn name(self) -> &'static str {
        match self {
            SampleStatus::Pending => "pending",
            SampleStatus::Done => "done",
            SampleStatus::Failed => "failed",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "pending" => Some(SampleStatus::Pending),
            "done" => Some(SampleStatus::Done),
            "failed" => Some(SampleStatus::Failed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub id: usize,
    pub inputs: Vec<f64>,
    pub status: SampleStatus,
}

/// Sample id, inputs and status of every ensemble member. Output paths
/// follow from the id (see [`sample_file`]).
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleManifest {
    pub kind: String,
    pub seed: u64,
    pub spec_hash: u64,
    pub rows: Vec<ManifestRow>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";
const SCALARS_FILE: &str = "scalars.json";

/// Relative path of one output file of sample `id`.
pub fn sample_file(id: usize, name: &str) -> PathBuf {
    Path::new("samples").join(format!("{id:05}")).join(name)
}

fn field_file(id: usize, q: Quantity) -> PathBuf {
    sample_file(id, &format!("{}.csv", q.name()))
}

impl EnsembleManifest {
    pub fn counts(&self) -> (usize, usize, usize) {
        let count = |s| self.rows.iter().filter(|r| r.status == s).count();
        (count(SampleStatus::Done), count(SampleStatus::Failed), count(SampleStatus::Pending))
    }

    pub fn done_ids(&self) -> Vec<usize> {
        self.rows
            .iter()
            .filter(|r| r.status == SampleStatus::Done)
            .map(|r| r.id)
            .collect()
    }

    pub fn failed_ids(&self) -> Vec<usize> {
        self.rows
            .iter()
            .filter(|r| r.status == SampleStatus::Failed)
            .map(|r| r.id)
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<(), UqError> {
        let d = self.rows.first().map(|r| r.inputs.len()).unwrap_or(0);
        let mut s = format!(
            "# kind={} seed={} spec_hash={:016x}\nsample_id",
            self.kind, self.seed, self.spec_hash
        );
        for c in 1..=d {
            s.push_str(&format!(",xi_{c}"));
        }
        s.push_str(",status");
        for q in Quantity::ALL {
            s.push(',');
            s.push_str(q.name());
        }
        s.push_str(",scalars\n");
        for r in &self.rows {
            s.push_str(&r.id.to_string());
            for v in &r.inputs {
                s.push(',');
                s.push_str(&fmt_real(*v));
            }
            s.push(',');
            s.push_str(r.status.name());
            for q in Quantity::ALL {
                s.push(',');
                s.push_str(&field_file(r.id, q).to_string_lossy());
            }
            s.push(',');
            s.push_str(&sample_file(r.id, SCALARS_FILE).to_string_lossy());
            s.push('\n');
        }
        // Write-then-rename so a crash never leaves a truncated manifest.
        let tmp = path.with_extension("csv.tmp");
        fs::write(&tmp, s)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, UqError> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => UqError::Missing(path.to_path_buf()),
            _ => UqError::Io(e),
        })?;
        let bad = |line: usize, msg: &str| UqError::Manifest {
            path: path.to_path_buf(),
            line,
            msg: msg.to_string(),
        };
        let mut lines = text.lines();
        let meta = lines.next().ok_or_else(|| bad(1, "empty manifest"))?;
        let meta = meta.strip_prefix("# ").ok_or_else(|| bad(1, "missing metadata line"))?;
        let (mut kind, mut seed, mut hash) = (None, None, None);
        for part in meta.split_whitespace() {
            match part.split_once('=') {
                Some(("kind", v)) => kind = Some(v.to_string()),
                Some(("seed", v)) => seed = v.parse().ok(),
                Some(("spec_hash", v)) => hash = u64::from_str_radix(v, 16).ok(),
                _ => {}
            }
        }
        let header = lines.next().ok_or_else(|| bad(2, "missing header"))?;
        let cols: Vec<&str> = header.split(',').collect();
        let d = cols
            .iter()
            .filter(|c| c.starts_with("xi_"))
            .count();
        if cols.len() != d + 7 || cols[0] != "sample_id" || cols[d + 1] != "status" {
            return Err(bad(2, "unexpected header"));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let ln = i + 3;
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != cols.len() {
                return Err(bad(ln, "wrong column count"));
            }
            let id: usize = parts[0].parse().map_err(|_| bad(ln, "bad sample id"))?;
            if id != rows.len() {
                return Err(bad(ln, "sample ids must be dense and ordered"));
            }
            let inputs = parts[1..=d]
                .iter()
                .map(|v| v.parse::<f64>().map_err(|_| bad(ln, "bad input value")))
                .collect::<Result<Vec<_>, _>>()?;
            let status = SampleStatus::parse(parts[d + 1]).ok_or_else(|| bad(ln, "bad status"))?;
            rows.push(ManifestRow { id, inputs, status });
        }
        Ok(Self {
            kind: kind.ok_or_else(|| bad(1, "missing kind"))?,
            seed: seed.ok_or_else(|| bad(1, "missing seed"))?,
            spec_hash: hash.ok_or_else(|| bad(1, "missing spec_hash"))?,
            rows,
        })
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn spec_hash(kind: &EnsembleKind, samples: &SampleMatrix, config: &SolverConfig, grid: &StructuredGrid) -> u64 {
    let mut buf = format!("{}|{:?}|{}|", kind.tag(), config, grid.n()).into_bytes();
    samples.write_csv(&mut buf).expect("writing to memory");
    fnv1a(&buf)
}

fn write_outputs(dir: &Path, id: usize, out: &SampleOutputs) -> Result<(), UqError> {
    let folder = dir.join(sample_file(id, ""));
    fs::create_dir_all(&folder)?;
    for q in Quantity::ALL {
        let f = fs::File::create(dir.join(field_file(id, q)))?;
        out.field(q).write_csv(BufWriter::new(f))?;
    }
    fs::write(dir.join(sample_file(id, SCALARS_FILE)), out.scalars.to_json_line() + "\n")?;
    Ok(())
}

/// Loads the stored outputs of sample `id` of the ensemble in `dir`.
pub fn load_outputs(dir: &Path, id: usize) -> Result<SampleOutputs, UqError> {
    let read_plane = |q: Quantity| -> Result<Plane, UqError> {
        let path = dir.join(field_file(id, q));
        let f = fs::File::open(&path).map_err(|_| UqError::Missing(path.clone()))?;
        Ok(Plane::read_csv(f)?)
    };
    let fields = [
        read_plane(Quantity::NuHot)?,
        read_plane(Quantity::Theta)?,
        read_plane(Quantity::U)?,
        read_plane(Quantity::V)?,
    ];
    let path = dir.join(sample_file(id, SCALARS_FILE));
    let text = fs::read_to_string(&path).map_err(|_| UqError::Missing(path.clone()))?;
    let scalars = Scalars::parse_json_line(&text).ok_or(UqError::Manifest {
        path,
        line: 1,
        msg: "unreadable scalar record".into(),
    })?;
    Ok(SampleOutputs { fields, scalars })
}

/// Runs every sample of `samples` not already completed in `dir`, on up to
/// `workers` threads. Diverged samples are marked `failed`; the ensemble
/// errors if more than 10% fail. The manifest is rewritten after every
/// finished sample, always in sample-id order.
pub fn run_ensemble(
    kind: &EnsembleKind,
    samples: &SampleMatrix,
    config: &SolverConfig,
    grid: StructuredGrid,
    dir: &Path,
    workers: usize,
) -> Result<EnsembleManifest, UqError> {
    config.validate()?;
    fs::create_dir_all(dir)?;
    let path = dir.join(MANIFEST_FILE);
    let hash = spec_hash(kind, samples, config, &grid);
    let mut manifest = if path.exists() {
        let m = EnsembleManifest::read(&path)?;
        if m.spec_hash != hash || m.rows.len() != samples.nrows() {
            return Err(UqError::SpecMismatch { path });
        }
        m
    } else {
        EnsembleManifest {
            kind: kind.tag(),
            seed: samples.seed,
            spec_hash: hash,
            rows: samples
                .rows()
                .enumerate()
                .map(|(id, r)| ManifestRow {
                    id,
                    inputs: r.to_vec(),
                    status: SampleStatus::Pending,
                })
                .collect(),
        }
    };
    let pending: Vec<usize> = manifest
        .rows
        .iter()
        .filter(|r| match r.status {
            SampleStatus::Pending => true,
            SampleStatus::Done => load_outputs(dir, r.id).is_err(),
            SampleStatus::Failed => false,
        })
        .map(|r| r.id)
        .collect();
    for &id in &pending {
        manifest.rows[id].status = SampleStatus::Pending;
    }
    manifest.write(&path)?;
    info!(
        "ensemble {}: {} samples, {} to run",
        dir.display(),
        samples.nrows(),
        pending.len()
    );

    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, Result<(), UqError>)>();
    let workers = workers.max(1).min(pending.len().max(1));
    std::thread::scope(|scope| -> Result<(), UqError> {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, pending) = (&next, &pending);
            scope.spawn(move || loop {
                let slot = next.fetch_add(1, Ordering::SeqCst);
                let Some(&id) = pending.get(slot) else { break };
                let result = solve_sample(kind, samples.row(id), config, grid)
                    .and_then(|out| write_outputs(dir, id, &out));
                if tx.send((id, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (id, result) in rx {
            match result {
                Ok(()) => manifest.rows[id].status = SampleStatus::Done,
                Err(UqError::Solver(e)) => {
                    warn!("sample {id} failed: {e}");
                    manifest.rows[id].status = SampleStatus::Failed;
                }
                Err(e) => return Err(e),
            }
            manifest.write(&path)?;
        }
        Ok(())
    })?;

    let (_, failed, _) = manifest.counts();
    if failed as f64 > MAX_FAILED_FRACTION * manifest.rows.len() as f64 {
        return Err(UqError::TooManyFailures {
            failed,
            total: manifest.rows.len(),
        });
    }
    Ok(manifest)
}

/// Single-pass (Welford) mean and variance of vector-valued samples.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningStats {
    pub fn new(len: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        assert_eq!(x.len(), self.mean.len(), "sample length");
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Unbiased (n - 1) standard deviation.
    pub fn std(&self) -> Vec<f64> {
        let d = (self.n.max(2) - 1) as f64;
        self.m2.iter().map(|s| (s / d).max(0.0).sqrt()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McStats {
    pub n: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Input vector number `i` of a Monte Carlo run: dimension `j` uses draw
/// `i` of stream `j`, so the inputs do not depend on evaluation order.
pub fn mc_input(marginals: &[Marginal], seed: u64, i: usize) -> Result<Vec<f64>, UqError> {
    marginals
        .iter()
        .enumerate()
        .map(|(j, m)| {
            let bits = CounterRng::new(seed, j as u64).at(i as u64);
            let u = ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
            Ok(m.transform(u)?)
        })
        .collect()
}

/// Mean and standard deviation of `surrogate` over `n` i.i.d. draws from
/// `marginals`.
pub fn monte_carlo_stats<F>(mut surrogate: F, marginals: &[Marginal], n: usize, seed: u64) -> Result<McStats, UqError>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>, UqError>,
{
    if n < 2 {
        return Err(UqError::Invalid("Monte Carlo needs at least 2 samples".into()));
    }
    let mut stats: Option<RunningStats> = None;
    for i in 0..n {
        let y = surrogate(&mc_input(marginals, seed, i)?)?;
        stats.get_or_insert_with(|| RunningStats::new(y.len())).push(&y);
    }
    let stats = stats.expect("n >= 2");
    Ok(McStats {
        n,
        mean: stats.mean().to_vec(),
        std: stats.std(),
    })
}

/// `mean - deterministic` per entry, and `100 * max|difference| / max|deterministic|`.
pub fn shift_of_mean(stoch_mean: &[f64], deterministic: &[f64]) -> Result<(Vec<f64>, f64), UqError> {
    if stoch_mean.len() != deterministic.len() {
        return Err(UqError::Invalid("fields differ in size".into()));
    }
    let scale = deterministic.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Err(UqError::UndefinedShift);
    }
    let diff: Vec<f64> = stoch_mean.iter().zip(deterministic).map(|(m, d)| m - d).collect();
    let max_diff = diff.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    Ok((diff, 100.0 * max_diff / scale))
}

/// Statistics of one output field.
#[derive(Debug, Clone, PartialEq)]
pub struct StatFields {
    pub quantity: Quantity,
    pub mean: Plane,
    pub std: Plane,
    pub deterministic: Plane,
    pub difference: Plane,
    /// `std / |mean|`, zero where the mean vanishes.
    pub ratio: Plane,
    pub relative_shift: f64,
}

impl StatFields {
    pub fn new(quantity: Quantity, mc: &McStats, deterministic: &Plane) -> Result<Self, UqError> {
        let (na, nb) = deterministic.dims();
        if mc.mean.len() != na * nb {
            return Err(UqError::Invalid(format!(
                "{} statistics for a {na}x{nb} field",
                mc.mean.len()
            )));
        }
        let (diff, shift) = shift_of_mean(&mc.mean, deterministic.data())?;
        let ratio = mc
            .mean
            .iter()
            .zip(&mc.std)
            .map(|(m, s)| if *m == 0.0 { 0.0 } else { s / m.abs() })
            .collect();
        Ok(Self {
            quantity,
            mean: Plane::new(na, nb, mc.mean.clone()),
            std: Plane::new(na, nb, mc.std.clone()),
            deterministic: deterministic.clone(),
            difference: Plane::new(na, nb, diff),
            ratio: Plane::new(na, nb, ratio),
            relative_shift: shift,
        })
    }

    pub fn max_std(&self) -> f64 {
        self.std.max_abs()
    }

    pub fn max_abs_difference(&self) -> f64 {
        self.difference.max_abs()
    }

    pub fn summary_json(&self) -> String {
        format!(
            "{{\"quantity\": \"{}\", \"relative_shift_percent\": {}, \"max_std\": {}, \"max_abs_difference\": {}}}",
            self.quantity.name(),
            fmt_real(self.relative_shift),
            fmt_real(self.max_std()),
            fmt_real(self.max_abs_difference())
        )
    }

    /// Writes `<quantity>_{mean,std,deterministic,difference,ratio}.csv` and
    /// `<quantity>_summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), UqError> {
        fs::create_dir_all(dir)?;
        let q = self.quantity.name();
        for (tag, plane) in [
            ("mean", &self.mean),
            ("std", &self.std),
            ("deterministic", &self.deterministic),
            ("difference", &self.difference),
            ("ratio", &self.ratio),
        ] {
            let f = fs::File::create(dir.join(format!("{q}_{tag}.csv")))?;
            plane.write_csv(BufWriter::new(f))?;
        }
        fs::write(dir.join(format!("{q}_summary.json")), self.summary_json() + "\n")?;
        Ok(())
    }
}

/// Ratio of the between-strip variance of band means to the mean
/// within-strip variance, for a hot-wall field indexed (j, k).
pub fn strip_variance_ratio(field: &Plane, strips: usize, grid: &StructuredGrid) -> f64 {
    let (nj, nk) = field.dims();
    let mut bands: Vec<Vec<f64>> = vec![Vec::new(); strips];
    for k in 0..nk {
        for j in 0..nj {
            bands[BoundarySpec::strip_index(grid.center(j), strips)].push(field.get(j, k));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64]| {
        let m = mean(v);
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
    };
    let bands: Vec<Vec<f64>> = bands.into_iter().filter(|b| !b.is_empty()).collect();
    let band_means: Vec<f64> = bands.iter().map(|b| mean(b)).collect();
    let between = var(&band_means);
    let within = bands.iter().map(|b| var(b)).sum::<f64>() / bands.len() as f64;
    if within == 0.0 {
        if between == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        between / within
    }
}

// ---------------------------------------------------------------- Case A

#[derive(Debug, Clone, PartialEq)]
pub struct CaseASpec {
    pub mean_ra: f64,
    pub mean_pr: f64,
    /// Standard deviation as a fraction of the mean, for both inputs.
    pub rel_sigma: f64,
    pub levels: Vec<usize>,
    /// Expansion order; `None` uses `level - 1`.
    pub order: Option<usize>,
    pub n_test: usize,
    pub test_seed: u64,
    pub mc_samples: usize,
    pub mc_seed: u64,
    pub surface_resolution: usize,
}

impl Default for CaseASpec {
    fn default() -> Self {
        Self {
            mean_ra: 1e5,
            mean_pr: 7.5,
            rel_sigma: 0.02,
            levels: vec![4, 5, 6, 7],
            order: None,
            n_test: 30,
            test_seed: 101,
            mc_samples: 10_000,
            mc_seed: 202,
            surface_resolution: 41,
        }
    }
}

impl CaseASpec {
    pub fn means(&self) -> [f64; 2] {
        [self.mean_ra, self.mean_pr]
    }

    pub fn sigmas(&self) -> [f64; 2] {
        [self.rel_sigma * self.mean_ra, self.rel_sigma * self.mean_pr]
    }

    pub fn marginals(&self) -> Vec<Marginal> {
        self.means()
            .iter()
            .zip(self.sigmas())
            .map(|(&mean, std)| Marginal::Normal { mean, std })
            .collect()
    }

    pub fn order_for(&self, level: usize) -> usize {
        self.order.unwrap_or(level.saturating_sub(1)).max(1)
    }

    pub fn validate(&self) -> Result<(), UqError> {
        if self.levels.is_empty() {
            return Err(UqError::Invalid("case A needs at least one level".into()));
        }
        if !(self.mean_ra > 0.0 && self.mean_pr > 0.0 && self.rel_sigma >= 0.0) {
            return Err(UqError::Invalid("case A means must be positive and sigma non-negative".into()));
        }
        for &l in &self.levels {
            let p = self.order_for(l);
            if l < p + 1 {
                return Err(UqError::Invalid(format!(
                    "level {l} cannot support order {p} (need level >= order + 1)"
                )));
            }
        }
        if self.n_test == 0 || self.mc_samples < 2 || self.surface_resolution < 2 {
            return Err(UqError::Invalid(
                "case A needs test points, >= 2 Monte Carlo samples and surface resolution >= 2".into(),
            ));
        }
        Ok(())
    }

    /// Test inputs: a uniform Latin hypercube over the mean +/- 3 sigma box.
    pub fn test_samples(&self) -> Result<SampleMatrix, UqError> {
        let box_marginals: Vec<Marginal> = self
            .means()
            .iter()
            .zip(self.sigmas())
            .map(|(&m, s)| Marginal::Uniform {
                low: m - 3.0 * s,
                high: m + 3.0 * s,
            })
            .collect();
        Ok(latin_hypercube(self.n_test, 2, self.test_seed)?.transform(&box_marginals)?)
    }

    fn level_dir(root: &Path, level: usize) -> PathBuf {
        root.join(format!("level_{level}"))
    }
}

/// Runs the collocation ensembles for every level, the test points and the
/// deterministic reference at the mean input.
pub fn case_a_ensembles(
    spec: &CaseASpec,
    config: &SolverConfig,
    grid: StructuredGrid,
    root: &Path,
    workers: usize,
) -> Result<Vec<EnsembleManifest>, UqError> {
    spec.validate()?;
    let mut out = Vec::new();
    for &level in &spec.levels {
        let samples = tensor_grid(level, 2, &spec.means(), &spec.sigmas())?;
        out.push(run_ensemble(
            &EnsembleKind::RaPr,
            &samples,
            config,
            grid,
            &CaseASpec::level_dir(root, level),
            workers,
        )?);
    }
    out.push(run_ensemble(
        &EnsembleKind::RaPr,
        &spec.test_samples()?,
        config,
        grid,
        &root.join("test"),
        workers,
    )?);
    out.push(run_ensemble(
        &EnsembleKind::RaPr,
        &reference_samples(&spec.means()),
        config,
        grid,
        &root.join("reference"),
        workers,
    )?);
    Ok(out)
}

fn reference_samples(means: &[f64]) -> SampleMatrix {
    let marginals = means
        .iter()
        .map(|&mean| Marginal::Normal { mean, std: 0.0 })
        .collect();
    SampleMatrix::from_rows(vec![means.to_vec()], marginals, 0).expect("finite means")
}

/// Done samples of an ensemble with their outputs, in id order.
fn collect_done(dir: &Path) -> Result<(EnsembleManifest, Vec<(Vec<f64>, SampleOutputs)>), UqError> {
    let manifest = EnsembleManifest::read(&dir.join(MANIFEST_FILE))?;
    let mut out = Vec::new();
    for row in manifest.rows.iter().filter(|r| r.status == SampleStatus::Done) {
        out.push((row.inputs.clone(), load_outputs(dir, row.id)?));
    }
    if out.is_empty() {
        return Err(UqError::Invalid(format!("{} holds no completed samples", dir.display())));
    }
    Ok((manifest, out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelReport {
    pub level: usize,
    pub order: usize,
    pub samples: usize,
    /// `RMS(pce - solver) / max|solver|` on the test points, per scalar output.
    pub test_error: [f64; 6],
    /// Relative least-squares residual of the fit, per scalar output.
    pub fit_residual: [f64; 6],
}

#[derive(Debug, Clone)]
pub struct CaseAFit {
    pub reports: Vec<LevelReport>,
    /// Scalar-output model at the highest level.
    pub scalars: PceModel,
    /// Field models at the highest level, in [`Quantity::ALL`] order.
    pub fields: Vec<PceModel>,
}

pub const PCE_SCALARS_FILE: &str = "pce_scalars.txt";

fn pce_field_file(q: Quantity) -> String {
    format!("pce_{}.txt", q.name())
}

fn samples_with_marginals(rows: Vec<Vec<f64>>, marginals: &[Marginal]) -> Result<SampleMatrix, UqError> {
    Ok(SampleMatrix::from_rows(rows, marginals.to_vec(), 0)?)
}

/// Fits the scalar surrogates at every level, scores them on the test
/// points, fits field surrogates at the top level and writes all models
/// plus `collocation_error.csv` into `root`.
pub fn case_a_fit(spec: &CaseASpec, root: &Path) -> Result<CaseAFit, UqError> {
    spec.validate()?;
    let (_, test) = collect_done(&root.join("test"))?;
    let marginals = spec.marginals();
    let mut reports = Vec::new();
    let mut top = None;
    for &level in &spec.levels {
        let dir = CaseASpec::level_dir(root, level);
        let (_, done) = collect_done(&dir)?;
        let order = spec.order_for(level);
        let inputs = samples_with_marginals(done.iter().map(|(x, _)| x.clone()).collect(), &marginals)?;
        let y = DMatrix::from_fn(done.len(), 6, |r, c| done[r].1.scalars.values()[c]);
        let model = fit_collocation(&inputs, &y, PceBasis::new(2, order)?)?.with_names(&SCALAR_NAMES)?;
        let mut test_error = [0.0; 6];
        for (k, slot) in test_error.iter_mut().enumerate() {
            let mut sq = 0.0;
            let mut scale = 0.0_f64;
            for (x, out) in &test {
                let truth = out.scalars.values()[k];
                sq += (model.predict(x)?[k] - truth).powi(2);
                scale = scale.max(truth.abs());
            }
            let rms = (sq / test.len() as f64).sqrt();
            *slot = if scale > 0.0 { rms / scale } else { rms };
        }
        let mut fit_residual = [0.0; 6];
        fit_residual.copy_from_slice(&model.report.relative_rms);
        info!("level {level}: {} samples, mean-Nu test error {:.3e}", done.len(), test_error[0]);
        reports.push(LevelReport {
            level,
            order,
            samples: done.len(),
            test_error,
            fit_residual,
        });
        model.write(fs::File::create(root.join(format!("pce_level_{level}.txt")))?)?;
        top = Some((level, inputs, done, model));
    }
    let (_, inputs, done, scalars) = top.expect("levels validated non-empty");
    scalars.write(fs::File::create(root.join(PCE_SCALARS_FILE))?)?;
    let mut fields = Vec::new();
    for q in Quantity::ALL {
        let width = done[0].1.field(q).data().len();
        let y = DMatrix::from_fn(done.len(), width, |r, c| done[r].1.field(q).data()[c]);
        let model = fit_collocation(&inputs, &y, scalars.basis.clone())?;
        model.write(fs::File::create(root.join(pce_field_file(q)))?)?;
        fields.push(model);
    }
    write_collocation_table(&reports, &root.join("collocation_error.csv"))?;
    Ok(CaseAFit {
        reports,
        scalars,
        fields,
    })
}

fn write_collocation_table(reports: &[LevelReport], path: &Path) -> Result<(), UqError> {
    let mut s = String::from("level,samples,order");
    for n in SCALAR_NAMES {
        s.push_str(&format!(",test_error_{n}"));
    }
    s.push('\n');
    for r in reports {
        s.push_str(&format!("{},{},{}", r.level, r.samples, r.order));
        for e in r.test_error {
            s.push(',');
            s.push_str(&fmt_real(e));
        }
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Total Sobol indices per scalar output, one entry per input; `None`
/// where the output has no variance.
pub type SobolTable = Vec<(String, Option<Vec<f64>>)>;

pub fn sobol_table(model: &PceModel) -> SobolTable {
    model
        .output_names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let indices = (0..model.dims())
                .map(|j| model.total_sobol_output(j, k).ok())
                .collect::<Option<Vec<f64>>>();
            (name.clone(), indices)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct CaseAPropagation {
    pub stats: Vec<StatFields>,
    pub surface: ResponseSurface,
    /// Scalar means and variances from the expansion coefficients.
    pub moments: (Vec<f64>, Vec<f64>),
}

/// Monte Carlo through the field surrogates, compared with the reference
/// run at the mean input. Writes `stats/` and the mean-Nu response surface.
pub fn case_a_propagate(spec: &CaseASpec, root: &Path) -> Result<CaseAPropagation, UqError> {
    spec.validate()?;
    let (_, reference) = collect_done(&root.join("reference"))?;
    let reference = &reference[0].1;
    let read = |name: &str| -> Result<PceModel, UqError> {
        let path = root.join(name);
        let f = fs::File::open(&path).map_err(|_| UqError::Missing(path.clone()))?;
        Ok(PceModel::read(f)?)
    };
    let scalars = read(PCE_SCALARS_FILE)?;
    let marginals = spec.marginals();
    let stats_dir = root.join("stats");
    let mut stats = Vec::new();
    for q in Quantity::ALL {
        let model = read(&pce_field_file(q))?;
        let mc = monte_carlo_stats(|x| Ok(model.predict(x)?), &marginals, spec.mc_samples, spec.mc_seed)?;
        let sf = StatFields::new(q, &mc, reference.field(q))?;
        sf.write(&stats_dir)?;
        stats.push(sf);
    }
    let surface = scalars.response_surface(0, spec.surface_resolution)?;
    surface.write_csv(BufWriter::new(fs::File::create(root.join("response_surface_mean_nu.csv"))?))?;
    Ok(CaseAPropagation {
        stats,
        surface,
        moments: scalars.moments(),
    })
}

#[derive(Debug, Clone)]
pub struct CaseAResult {
    pub fit: CaseAFit,
    pub propagation: CaseAPropagation,
    pub sobol: SobolTable,
}

/// Ensembles, fits, propagation and sensitivities for Case A.
pub fn case_a_pipeline(
    spec: &CaseASpec,
    config: &SolverConfig,
    grid: StructuredGrid,
    root: &Path,
    workers: usize,
) -> Result<CaseAResult, UqError> {
    case_a_ensembles(spec, config, grid, root, workers)?;
    let fit = case_a_fit(spec, root)?;
    let propagation = case_a_propagate(spec, root)?;
    let sobol = sobol_table(&fit.scalars);
    Ok(CaseAResult {
        fit,
        propagation,
        sobol,
    })
}

// ---------------------------------------------------------------- Case B

#[derive(Debug, Clone, PartialEq)]
pub struct CaseBSpec {
    pub strips: usize,
    pub mean_temp: f64,
    pub sigma_temp: f64,
    pub cold_temp: f64,
    pub rayleigh: f64,
    pub prandtl: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub train_seed: u64,
    pub val_seed: u64,
    pub test_seed: u64,
    pub mc_samples: usize,
    pub mc_seed: u64,
    /// Use the small 4x32 networks instead of the production sizes.
    pub desk_presets: bool,
    /// Optimizer settings; the regularization constant comes from the preset.
    pub train: TrainConfig,
}

impl Default for CaseBSpec {
    fn default() -> Self {
        Self {
            strips: 4,
            mean_temp: 1.05,
            sigma_temp: 0.01 / 3.0,
            cold_temp: 0.95,
            rayleigh: 1e6,
            prandtl: 7.5,
            n_train: 60,
            n_val: 10,
            n_test: 10,
            train_seed: 11,
            val_seed: 12,
            test_seed: 13,
            mc_samples: 10_000,
            mc_seed: 14,
            desk_presets: true,
            train: TrainConfig::default(),
        }
    }
}

/// Test error above this multiple of the training error flags overfitting.
pub const OVERFIT_RATIO: f64 = 5.0;

impl CaseBSpec {
    pub fn validate(&self) -> Result<(), UqError> {
        if self.strips == 0 {
            return Err(UqError::Invalid("case B needs at least one strip".into()));
        }
        if !(self.sigma_temp >= 0.0) || self.n_train < 2 || self.n_test == 0 || self.mc_samples < 2 {
            return Err(UqError::Invalid(
                "case B needs sigma >= 0, >= 2 training samples, test samples and >= 2 Monte Carlo samples".into(),
            ));
        }
        let seeds = [self.train_seed, self.val_seed, self.test_seed];
        if seeds[0] == seeds[1] || seeds[0] == seeds[2] || seeds[1] == seeds[2] {
            return Err(UqError::Invalid("training, validation and test seeds must differ".into()));
        }
        self.train.validate()?;
        Ok(())
    }

    pub fn marginals(&self) -> Vec<Marginal> {
        vec![
            Marginal::Normal {
                mean: self.mean_temp,
                std: self.sigma_temp,
            };
            self.strips
        ]
    }

    fn design(&self, n: usize, seed: u64) -> Result<SampleMatrix, UqError> {
        if n == 0 {
            let marginals = self.marginals();
            return Ok(SampleMatrix::from_rows(Vec::new(), marginals, seed)?);
        }
        Ok(latin_hypercube(n, self.strips, seed)?.transform(&self.marginals())?)
    }

    pub fn solver_config(&self, base: &SolverConfig) -> SolverConfig {
        let mut cfg = base.clone();
        cfg.rayleigh = self.rayleigh;
        cfg.prandtl = self.prandtl;
        cfg
    }

    fn kind(&self) -> EnsembleKind {
        EnsembleKind::Strips { cold: self.cold_temp }
    }
}

const CASE_B_SETS: [&str; 3] = ["train", "val", "test"];

/// Training, validation and test ensembles plus the uniform-wall reference.
pub fn case_b_ensembles(
    spec: &CaseBSpec,
    config: &SolverConfig,
    grid: StructuredGrid,
    root: &Path,
    workers: usize,
) -> Result<Vec<EnsembleManifest>, UqError> {
    spec.validate()?;
    let cfg = spec.solver_config(config);
    let sets = [
        (spec.n_train, spec.train_seed),
        (spec.n_val, spec.val_seed),
        (spec.n_test, spec.test_seed),
    ];
    let mut out = Vec::new();
    for (name, (n, seed)) in CASE_B_SETS.iter().zip(sets) {
        if n == 0 {
            continue;
        }
        out.push(run_ensemble(&spec.kind(), &spec.design(n, seed)?, &cfg, grid, &root.join(name), workers)?);
    }
    let reference = reference_samples(&vec![spec.mean_temp; spec.strips]);
    out.push(run_ensemble(&spec.kind(), &reference, &cfg, grid, &root.join("reference"), workers)?);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRow {
    pub quantity: Quantity,
    pub train_percent: f64,
    pub test_percent: f64,
    pub overfit: bool,
}

#[derive(Debug, Clone)]
pub struct CaseBTraining {
    pub networks: Vec<(Quantity, MlpNetwork)>,
    pub errors: Vec<ErrorRow>,
    /// Failed training samples left out of the fit.
    pub excluded: Vec<usize>,
}

fn dnn_file(q: Quantity) -> String {
    format!("dnn_{}.txt", q.name())
}

fn field_dataset(done: &[(Vec<f64>, SampleOutputs)], q: Quantity) -> Result<dnn::Dataset, UqError> {
    let d = done.first().map(|s| s.0.len()).unwrap_or(0);
    let width = done.first().map(|s| s.1.field(q).data().len()).unwrap_or(0);
    let x = DMatrix::from_fn(done.len(), d, |r, c| done[r].0[c]);
    let y = DMatrix::from_fn(done.len(), width, |r, c| done[r].1.field(q).data()[c]);
    Ok(dnn::Dataset::new(x, y)?)
}

/// Trains one network per output field and writes the models, loss
/// histories, `dnn_error.csv` and `excluded.txt` into `root`.
pub fn case_b_train(spec: &CaseBSpec, root: &Path) -> Result<CaseBTraining, UqError> {
    spec.validate()?;
    let (train_manifest, train) = collect_done(&root.join("train"))?;
    let (_, test) = collect_done(&root.join("test"))?;
    let val = if spec.n_val > 0 {
        collect_done(&root.join("val"))?.1
    } else {
        Vec::new()
    };
    let excluded = train_manifest.failed_ids();
    let mut networks = Vec::new();
    let mut errors = Vec::new();
    for q in Quantity::ALL {
        let train_set = field_dataset(&train, q)?;
        let test_set = field_dataset(&test, q)?;
        let input_scaling = Scaling::fit(&train_set.inputs);
        let output_scaling = Scaling::fit(&train_set.targets);
        let (hidden, lambda) = dnn::preset(q.preset(), spec.desk_presets);
        let mut sizes = vec![spec.strips];
        sizes.extend(hidden);
        sizes.push(train_set.targets.ncols());
        let mut net = MlpNetwork::new(&sizes, spec.train.seed.wrapping_add(q as u64))?;
        net.input_scaling = input_scaling.clone();
        net.output_scaling = output_scaling.clone();
        let cfg = TrainConfig {
            lambda,
            ..spec.train.clone()
        };
        let val_set = if val.is_empty() {
            dnn::Dataset::new(DMatrix::zeros(0, spec.strips), DMatrix::zeros(0, train_set.targets.ncols()))?
        } else {
            field_dataset(&val, q)?.standardized(&input_scaling, &output_scaling)
        };
        let (net, history) = dnn::train(net, &train_set.standardized(&input_scaling, &output_scaling), &val_set, &cfg)?;
        let train_percent = dnn::relative_average_percent_error(&train_set.targets, &net.predict_rows(&train_set.inputs)?)?;
        let test_percent = dnn::relative_average_percent_error(&test_set.targets, &net.predict_rows(&test_set.inputs)?)?;
        let overfit = test_percent > OVERFIT_RATIO * train_percent;
        if overfit {
            warn!(
                "{}: test error {test_percent:.3}% exceeds {OVERFIT_RATIO}x training error {train_percent:.3}%",
                q.name()
            );
        }
        net.write(fs::File::create(root.join(dnn_file(q)))?)?;
        let mut loss_csv = String::from("epoch,train,validation\n");
        for (e, (t, v)) in history.train.iter().zip(&history.validation).enumerate() {
            loss_csv.push_str(&format!("{e},{},{}\n", fmt_real(*t), fmt_real(*v)));
        }
        fs::write(root.join(format!("loss_{}.csv", q.name())), loss_csv)?;
        networks.push((q, net));
        errors.push(ErrorRow {
            quantity: q,
            train_percent,
            test_percent,
            overfit,
        });
    }
    let mut table = String::from("quantity,train_percent,test_percent,overfit\n");
    for e in &errors {
        table.push_str(&format!(
            "{},{},{},{}\n",
            e.quantity.name(),
            fmt_real(e.train_percent),
            fmt_real(e.test_percent),
            e.overfit
        ));
    }
    fs::write(root.join("dnn_error.csv"), table)?;
    let ids: Vec<String> = excluded.iter().map(|i| i.to_string()).collect();
    fs::write(root.join("excluded.txt"), ids.join("\n") + "\n")?;
    Ok(CaseBTraining {
        networks,
        errors,
        excluded,
    })
}

#[derive(Debug, Clone)]
pub struct CaseBPropagation {
    pub stats: Vec<StatFields>,
    /// Between/within strip variance ratio of the hot-wall Nu difference.
    pub strip_ratio: f64,
}

/// Monte Carlo through the trained networks against the uniform-wall
/// reference. Writes `stats/` into `root`.
pub fn case_b_propagate(spec: &CaseBSpec, root: &Path, grid: &StructuredGrid) -> Result<CaseBPropagation, UqError> {
    spec.validate()?;
    let (_, reference) = collect_done(&root.join("reference"))?;
    let reference = &reference[0].1;
    let marginals = spec.marginals();
    let stats_dir = root.join("stats");
    let mut stats = Vec::new();
    for q in Quantity::ALL {
        let path = root.join(dnn_file(q));
        let f = fs::File::open(&path).map_err(|_| UqError::Missing(path.clone()))?;
        let net = MlpNetwork::read(f)?;
        let mc = monte_carlo_stats(|x| Ok(net.predict(x)?), &marginals, spec.mc_samples, spec.mc_seed)?;
        let sf = StatFields::new(q, &mc, reference.field(q))?;
        sf.write(&stats_dir)?;
        stats.push(sf);
    }
    let strip_ratio = strip_variance_ratio(&stats[0].difference, spec.strips, grid);
    Ok(CaseBPropagation { stats, strip_ratio })
}

#[derive(Debug, Clone)]
pub struct CaseBResult {
    pub training: CaseBTraining,
    pub propagation: CaseBPropagation,
}

/// Ensembles, network training and propagation for Case B.
pub fn case_b_pipeline(
    spec: &CaseBSpec,
    config: &SolverConfig,
    grid: StructuredGrid,
    root: &Path,
    workers: usize,
) -> Result<CaseBResult, UqError> {
    case_b_ensembles(spec, config, grid, root, workers)?;
    let training = case_b_train(spec, root)?;
    let propagation = case_b_propagate(spec, root, &grid)?;
    Ok(CaseBResult { training, propagation })
}
