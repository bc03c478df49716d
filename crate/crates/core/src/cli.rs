//! Subcommand implementations behind the `convect-uq` binary. Each command
//! writes its artifacts under the configured output directory, prints a
//! summary to the given writer and returns the process exit code.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::grid::{make_grid, Axis, ScalarField};
use crate::pce::PceModel;
use crate::solver::{mean_nusselt, nusselt_field, pressure_from_phi, run_to_steady, SolverConfig, SolverError};
use crate::uq::{self, sobol_table, UqError, PCE_SCALARS_FILE, SCALAR_NAMES};

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Success = 0,
    BadConfig = 1,
    NotConverged = 2,
    MissingPrerequisite = 3,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Config { path: PathBuf, source: ConfigError },
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Uq(#[from] UqError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        CliError::Uq(UqError::Solver(e))
    }
}

impl CliError {
    pub fn exit(&self) -> Exit {
        match self {
            CliError::Uq(UqError::Missing(_)) => Exit::MissingPrerequisite,
            CliError::Uq(UqError::Solver(SolverError::Diverged { .. }))
            | CliError::Uq(UqError::Solver(SolverError::LinearSolve(_)))
            | CliError::Uq(UqError::TooManyFailures { .. }) => Exit::NotConverged,
            _ => Exit::BadConfig,
        }
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub workers: Option<usize>,
    pub seed: Option<u64>,
}

pub fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let mut cfg = RunConfig::parse(&text).map_err(|source| CliError::Config {
        path: path.to_path_buf(),
        source,
    })?;
    if let Some(dir) = &overrides.out_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(w) = overrides.workers {
        if w == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        cfg.workers = w;
    }
    if let Some(seed) = overrides.seed {
        cfg.override_seeds(seed);
    }
    Ok(cfg)
}

fn write_field(path: &Path, field: &ScalarField) -> Result<(), CliError> {
    field
        .write_csv(BufWriter::new(fs::File::create(path)?))
        .map_err(|e| CliError::Uq(e.into()))
}

struct CaseRun {
    mean_nu: f64,
    steps: usize,
    converged: bool,
}

fn run_case(cfg: &RunConfig, solver: &SolverConfig, n: usize, dir: &Path, centerline: bool) -> Result<CaseRun, CliError> {
    let grid = make_grid(n).map_err(UqError::from)?;
    let (state, diag) = run_to_steady(solver, &cfg.boundary, grid)?;
    fs::create_dir_all(dir)?;
    let nu = nusselt_field(&state, &cfg.boundary, &grid);
    let mean_nu = mean_nusselt(&nu, grid.h());
    if centerline {
        write_centerlines(&dir.join(format!("centerline_n{n}.csv")), &state.theta, &state.velocity.u, &state.velocity.v)?;
        return Ok(CaseRun {
            mean_nu,
            steps: diag.steps,
            converged: diag.converged,
        });
    }
    let [u, v, w] = state.velocity.components();
    for (name, field) in [("theta", &state.theta), ("u", u), ("v", v), ("w", w)] {
        write_field(&dir.join(format!("{name}.csv")), field)?;
    }
    write_field(&dir.join("pressure.csv"), &pressure_from_phi(&state.phi, solver, diag.final_dt))?;
    nu.write_csv(BufWriter::new(fs::File::create(dir.join("nu_hot.csv"))?))?;
    fs::write(dir.join("diagnostics.json"), diag.to_json_line() + "\n")?;
    Ok(CaseRun {
        mean_nu,
        steps: diag.steps,
        converged: diag.converged,
    })
}

/// One deterministic case on `[grid] n`.
pub fn cmd_simulate(cfg: &RunConfig, out: &mut dyn Write) -> Result<Exit, CliError> {
    let dir = cfg.output_dir.join("simulate");
    let run = run_case(cfg, &cfg.solver, cfg.grid_n, &dir, false)?;
    writeln!(out, "mean Nu = {:.6}", run.mean_nu)?;
    writeln!(out, "steps = {}", run.steps)?;
    writeln!(out, "converged = {}", run.converged)?;
    Ok(if run.converged { Exit::Success } else { Exit::NotConverged })
}

/// Values along the two cavity centerlines through the centre: the line
/// parallel to `along`, at the mid-point of the other two axes. Even grids
/// average the two cells straddling 0.5 in each transverse direction.
pub fn centerline(field: &ScalarField, along: Axis) -> Vec<f64> {
    let n = field.grid().n();
    let mid: Vec<usize> = if n % 2 == 0 { vec![n / 2 - 1, n / 2] } else { vec![n / 2] };
    (0..n)
        .map(|s| {
            let mut sum = 0.0;
            for &a in &mid {
                for &b in &mid {
                    sum += match along {
                        Axis::X => field.at(s, a, b),
                        Axis::Y => field.at(a, s, b),
                        Axis::Z => field.at(a, b, s),
                    };
                }
            }
            sum / (mid.len() * mid.len()) as f64
        })
        .collect()
}

fn write_centerlines(path: &Path, theta: &ScalarField, u: &ScalarField, v: &ScalarField) -> Result<(), CliError> {
    let g = *theta.grid();
    let mut s = String::from("line,coordinate,theta,u,v\n");
    for (name, axis) in [("x", Axis::X), ("y", Axis::Y)] {
        let (t, uu, vv) = (centerline(theta, axis), centerline(u, axis), centerline(v, axis));
        for i in 0..g.n() {
            s.push_str(&format!(
                "{name},{},{},{},{}\n",
                crate::grid::fmt_real(g.center(i)),
                crate::grid::fmt_real(t[i]),
                crate::grid::fmt_real(uu[i]),
                crate::grid::fmt_real(vv[i])
            ));
        }
    }
    fs::write(path, s)?;
    Ok(())
}

/// Outcome of a three-grid Richardson analysis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Richardson {
    /// All grids agree to round-off.
    Exact(f64),
    Converging { order: f64, extrapolated: f64 },
    /// Oscillatory or non-convergent sequence.
    Undefined,
}

/// Observed order and extrapolated value from three grids, coarsest first,
/// for any refinement ratios.
pub fn richardson(sizes: [usize; 3], values: [f64; 3]) -> Richardson {
    let [f1, f2, f3] = values;
    let scale = values.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let (e21, e32) = (f1 - f2, f2 - f3);
    if e21.abs() <= 1e-9 * scale && e32.abs() <= 1e-9 * scale {
        return Richardson::Exact(f3);
    }
    if !(sizes[0] < sizes[1] && sizes[1] < sizes[2]) || e32 == 0.0 || e21 / e32 <= 0.0 {
        return Richardson::Undefined;
    }
    let [h1, h2, h3] = sizes.map(|n| 1.0 / n as f64);
    let target = e21 / e32;
    let g = |p: f64| (h1.powf(p) - h2.powf(p)) / (h2.powf(p) - h3.powf(p));
    let (mut lo, mut hi) = (1e-3, 20.0);
    if !(g(lo) <= target && target <= g(hi)) {
        return Richardson::Undefined;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let p = 0.5 * (lo + hi);
    Richardson::Converging {
        order: p,
        extrapolated: f3 - e32 * h3.powf(p) / (h2.powf(p) - h3.powf(p)),
    }
}

/// Grid study over `[grid] verify_sizes` with Richardson extrapolation.
pub fn cmd_verify(cfg: &RunConfig, out: &mut dyn Write) -> Result<Exit, CliError> {
    let sizes: [usize; 3] = cfg
        .verify_sizes
        .as_slice()
        .try_into()
        .map_err(|_| CliError::Usage(format!("[grid] verify_sizes must list 3 sizes, got {}", cfg.verify_sizes.len())))?;
    let mut sorted = sizes;
    sorted.sort_unstable();
    if sorted != sizes || sizes[0] == sizes[1] || sizes[1] == sizes[2] {
        return Err(CliError::Usage("[grid] verify_sizes must be strictly increasing".into()));
    }
    let dir = cfg.output_dir.join("verify");
    let mut values = [0.0; 3];
    let mut converged = true;
    let mut table = String::from("n,h,mean_nu,steps,converged\n");
    writeln!(out, "{:>6} {:>14} {:>8}", "n", "mean Nu", "steps")?;
    for (slot, &n) in values.iter_mut().zip(&sizes) {
        let run = run_case(cfg, &cfg.solver, n, &dir, true)?;
        *slot = run.mean_nu;
        converged &= run.converged;
        writeln!(out, "{n:>6} {:>14.8} {:>8}", run.mean_nu, run.steps)?;
        table.push_str(&format!(
            "{n},{},{},{},{}\n",
            crate::grid::fmt_real(1.0 / n as f64),
            crate::grid::fmt_real(run.mean_nu),
            run.steps,
            run.converged
        ));
    }
    fs::write(dir.join("grid_study.csv"), table)?;
    let summary = match richardson(sizes, values) {
        Richardson::Exact(v) => format!("richardson: exact (all grids give {v:.8})"),
        Richardson::Converging { order, extrapolated } => {
            format!("richardson: extrapolated mean Nu = {extrapolated:.8}, observed order = {order:.4}")
        }
        Richardson::Undefined => "richardson: observed order undefined (non-monotone sequence)".to_string(),
    };
    writeln!(out, "{summary}")?;
    fs::write(dir.join("richardson.txt"), summary + "\n")?;
    Ok(if converged { Exit::Success } else { Exit::NotConverged })
}

fn case_dirs(cfg: &RunConfig) -> (PathBuf, PathBuf) {
    (cfg.output_dir.join("case_a"), cfg.output_dir.join("case_b"))
}

fn require_case(enabled: bool, name: &str) -> Result<(), CliError> {
    if enabled {
        Ok(())
    } else {
        Err(CliError::Usage(format!("[{name}] enabled = false; nothing to do")))
    }
}

pub fn cmd_ensemble(cfg: &RunConfig, out: &mut dyn Write) -> Result<Exit, CliError> {
    if !cfg.case_a_enabled && !cfg.case_b_enabled {
        return Err(CliError::Usage("neither [case_a] nor [case_b] is enabled".into()));
    }
    let grid = make_grid(cfg.grid_n).map_err(UqError::from)?;
    let (dir_a, dir_b) = case_dirs(cfg);
    let mut manifests = Vec::new();
    if cfg.case_a_enabled {
        let m = uq::case_a_ensembles(&cfg.case_a, &cfg.case_a_solver(), grid, &dir_a, cfg.workers)?;
        let names = cfg
            .case_a
            .levels
            .iter()
            .map(|l| format!("case_a/level_{l}"))
            .chain(["case_a/test".to_string(), "case_a/reference".to_string()]);
        manifests.extend(names.zip(m));
    }
    if cfg.case_b_enabled {
        let m = uq::case_b_ensembles(&cfg.case_b, &cfg.solver, grid, &dir_b, cfg.workers)?;
        let names = [("train", cfg.case_b.n_train), ("val", cfg.case_b.n_val), ("test", cfg.case_b.n_test)]
            .into_iter()
            .filter(|(_, n)| *n > 0)
            .map(|(s, _)| format!("case_b/{s}"))
            .chain(["case_b/reference".to_string()]);
        manifests.extend(names.zip(m));
    }
    writeln!(out, "{:<20} {:>6} {:>6} {:>7}", "ensemble", "done", "failed", "pending")?;
    for (name, m) in &manifests {
        let (done, failed, pending) = m.counts();
        writeln!(out, "{name:<20} {done:>6} {failed:>6} {pending:>7}")?;
    }
    Ok(Exit::Success)
}

pub fn cmd_fit_pce(cfg: &RunConfig, out: &mut dyn Write) -> Result<Exit, CliError> {
    require_case(cfg.case_a_enabled, "case_a")?;
    let fit = uq::case_a_fit(&cfg.case_a, &case_dirs(cfg).0)?;
    writeln!(out, "normalized RMS test error per level")?;
    write!(out, "{:>6} {:>8} {:>6}", "level", "samples", "order")?;
    for n in SCALAR_NAMES {
        write!(out, " {n:>11}")?;
    }
    writeln!(out)?;
    for r in &fit.reports {
        write!(out, "{:>6} {:>8} {:>6}", r.level, r.samples, r.order)?;
        for e in r.test_error {
            write!(out, " {e:>11.3e}")?;
        }
        writeln!(out)?;
    }
    Ok(Exit::Success)
}

pub fn cmd_train_dnn(cfg: &RunConfig, out: &mut dyn Write) -> Result<Exit, CliError> {
    require_case(cfg.case_b_enabled, "case_b")?;
    let t = uq::case_b_train(&cfg.case_b, &case_dirs(cfg).1)?;
    writeln!(out, "relative average percent error")?;
    writeln!(out, "{:<10} {:>10} {:>10}", "quantity", "train", "test")?;
    for e in &t.errors {
        let flag = if e.overfit { "  overfit" } else { "" };
        writeln!(
            out,
            "{:<10} {:>10.4} {:>10.4}{flag}",
            e.quantity.name(),
            e.train_percent,
            e.test_percent
        )?;
    }
    if !t.excluded.is_empty() {
        writeln!(out, "excluded failed training samples: {:?}", t.excluded)?;
    }
    Ok(Exit::Success)
}

fn write_stats_table(out: &mut dyn Write, stats: &[uq::StatFields]) -> Result<(), CliError> {
    writeln!(out, "{:<10} {:>14} {:>12} {:>14}", "quantity", "shift of mean %", "max std", "max |diff|")?;
    for s in stats {
        writeln!(
            out,
            "{:<10} {:>14.4} {:>12.4e} {:>14.4e}",
            s.quantity.name(),
            s.relative_shift,
            s.max_std(),
            s.max_abs_difference()
        )?;
    }
    Ok(())
}

pub fn cmd_propagate(cfg: &RunConfig, out: &mut dyn Write) -> Result<Exit, CliError> {
    if !cfg.case_a_enabled && !cfg.case_b_enabled {
        return Err(CliError::Usage("neither [case_a] nor [case_b] is enabled".into()));
    }
    let (dir_a, dir_b) = case_dirs(cfg);
    if cfg.case_a_enabled {
        let p = uq::case_a_propagate(&cfg.case_a, &dir_a)?;
        writeln!(out, "case A ({} Monte Carlo samples)", cfg.case_a.mc_samples)?;
        write_stats_table(out, &p.stats)?;
        let (means, vars) = &p.moments;
        for (k, name) in SCALAR_NAMES.iter().enumerate() {
            writeln!(out, "{name:<10} mean {:>12.6} std {:>12.4e}", means[k], vars[k].sqrt())?;
        }
    }
    if cfg.case_b_enabled {
        let grid = make_grid(cfg.grid_n).map_err(UqError::from)?;
        let p = uq::case_b_propagate(&cfg.case_b, &dir_b, &grid)?;
        writeln!(out, "case B ({} Monte Carlo samples)", cfg.case_b.mc_samples)?;
        write_stats_table(out, &p.stats)?;
        writeln!(out, "strip variance ratio of the Nu difference: {:.4}", p.strip_ratio)?;
    }
    Ok(Exit::Success)
}

/// Total Sobol indices of the Case A scalar model.
pub fn cmd_sobol(cfg: &RunConfig, out: &mut dyn Write) -> Result<Exit, CliError> {
    let dir = case_dirs(cfg).0;
    let path = dir.join(PCE_SCALARS_FILE);
    let file = fs::File::open(&path).map_err(|_| UqError::Missing(path.clone()))?;
    let model = PceModel::read(file).map_err(UqError::from)?;
    let mut csv = String::from("output");
    for j in 1..=model.dims() {
        csv.push_str(&format!(",S{j}_T"));
    }
    csv.push('\n');
    for (name, indices) in sobol_table(&model) {
        csv.push_str(&name);
        match indices {
            Some(s) => {
                let shown: Vec<String> = s
                    .iter()
                    .enumerate()
                    .map(|(j, v)| format!("S{}_T={v:.2}", j + 1))
                    .collect();
                writeln!(out, "{name:<10} {}", shown.join(" "))?;
                for v in s {
                    csv.push(',');
                    csv.push_str(&crate::grid::fmt_real(v));
                }
            }
            None => {
                writeln!(out, "{name:<10} undefined (zero variance)")?;
                for _ in 0..model.dims() {
                    csv.push_str(",undefined");
                }
            }
        }
        csv.push('\n');
    }
    fs::write(dir.join("sobol.csv"), csv)?;
    info!("wrote {}", dir.join("sobol.csv").display());
    Ok(Exit::Success)
}
