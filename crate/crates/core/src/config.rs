//! Run configuration: an INI document with the sections `[grid]`,
//! `[solver]`, `[boundary]`, `[case_a]`, `[case_b]`, `[pce]`, `[dnn]` and
//! `[output]`. Every section must be present; every key inside has a
//! default. Unknown keys and repeated keys are rejected.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use ini::Ini;
use thiserror::Error;

use crate::grid::make_grid;
use crate::solver::{BoundarySpec, HotWall, SolverConfig, TimeStep};
use crate::uq::{CaseASpec, CaseBSpec};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("config syntax error at {0}")]
    Syntax(String),
    #[error("missing section [{0}]")]
    MissingSection(String),
    #[error("unknown section [{0}]")]
    UnknownSection(String),
    #[error("[{section}] {key}: unknown key")]
    UnknownKey { section: String, key: String },
    #[error("[{section}] {key}: given more than once")]
    DuplicateKey { section: String, key: String },
    #[error("[{section}] {key}: cannot parse {value:?}: {msg}")]
    Value {
        section: String,
        key: String,
        value: String,
        msg: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

pub const SECTIONS: [&str; 8] = ["grid", "solver", "boundary", "case_a", "case_b", "pce", "dnn", "output"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub grid_n: usize,
    /// Grid sizes for the convergence study.
    pub verify_sizes: Vec<usize>,
    pub solver: SolverConfig,
    pub workers: usize,
    pub boundary: BoundarySpec,
    pub case_a_enabled: bool,
    pub case_a: CaseASpec,
    /// Steady tolerance used for the Case A ensembles.
    pub case_a_steady_tol: f64,
    pub case_b_enabled: bool,
    pub case_b: CaseBSpec,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            grid_n: 16,
            verify_sizes: vec![16, 24, 32],
            solver: SolverConfig::default(),
            workers: 1,
            boundary: BoundarySpec::default(),
            case_a_enabled: true,
            case_a: CaseASpec::default(),
            case_a_steady_tol: 1e-9,
            case_b_enabled: false,
            case_b: CaseBSpec::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: Display,
{
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|e| e.to_string()))
        .collect()
}

fn parse_one<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: Display,
{
    s.trim().parse::<T>().map_err(|e| e.to_string())
}

impl RunConfig {
    /// `(section, key, value)` for every recognized key, in file order.
    pub fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
        let s = &self.solver;
        let a = &self.case_a;
        let b = &self.case_b;
        let t = &b.train;
        let (dt, cfl) = match s.time_step {
            TimeStep::Fixed(dt) => (dt.to_string(), SolverConfig::default_cfl().to_string()),
            TimeStep::Cfl(c) => ("auto".to_string(), c.to_string()),
        };
        let (hot, strips) = match &self.boundary.hot_wall {
            HotWall::Uniform(v) => (v.to_string(), String::new()),
            HotWall::Strips(v) => (1.05.to_string(), join(v)),
        };
        vec![
            ("grid", "n", self.grid_n.to_string()),
            ("grid", "verify_sizes", join(&self.verify_sizes)),
            ("solver", "rayleigh", s.rayleigh.to_string()),
            ("solver", "prandtl", s.prandtl.to_string()),
            ("solver", "dt", dt),
            ("solver", "cfl_target", cfl),
            ("solver", "steady_tol", s.steady_tol.to_string()),
            ("solver", "max_steps", s.max_steps.to_string()),
            ("solver", "poisson_tol", s.poisson_tol.to_string()),
            ("solver", "helmholtz_tol", s.helmholtz_tol.to_string()),
            ("solver", "max_cg_iterations", s.max_cg_iterations.to_string()),
            ("solver", "cfl_velocity_floor", s.cfl_velocity_floor.to_string()),
            ("solver", "dt_refresh_interval", s.dt_refresh_interval.to_string()),
            ("solver", "buoyancy", s.buoyancy.to_string()),
            ("solver", "workers", self.workers.to_string()),
            ("boundary", "cold_wall", self.boundary.cold_wall_theta.to_string()),
            ("boundary", "hot_wall", hot),
            ("boundary", "hot_strips", strips),
            ("case_a", "enabled", self.case_a_enabled.to_string()),
            ("case_a", "mean_ra", a.mean_ra.to_string()),
            ("case_a", "mean_pr", a.mean_pr.to_string()),
            ("case_a", "rel_sigma", a.rel_sigma.to_string()),
            ("case_a", "levels", join(&a.levels)),
            ("case_a", "n_test", a.n_test.to_string()),
            ("case_a", "test_seed", a.test_seed.to_string()),
            ("case_a", "mc_samples", a.mc_samples.to_string()),
            ("case_a", "mc_seed", a.mc_seed.to_string()),
            ("case_a", "surface_resolution", a.surface_resolution.to_string()),
            ("case_a", "steady_tol", self.case_a_steady_tol.to_string()),
            ("case_b", "enabled", self.case_b_enabled.to_string()),
            ("case_b", "strips", b.strips.to_string()),
            ("case_b", "mean_temp", b.mean_temp.to_string()),
            ("case_b", "sigma_temp", b.sigma_temp.to_string()),
            ("case_b", "cold_temp", b.cold_temp.to_string()),
            ("case_b", "rayleigh", b.rayleigh.to_string()),
            ("case_b", "prandtl", b.prandtl.to_string()),
            ("case_b", "n_train", b.n_train.to_string()),
            ("case_b", "n_val", b.n_val.to_string()),
            ("case_b", "n_test", b.n_test.to_string()),
            ("case_b", "train_seed", b.train_seed.to_string()),
            ("case_b", "val_seed", b.val_seed.to_string()),
            ("case_b", "test_seed", b.test_seed.to_string()),
            ("case_b", "mc_samples", b.mc_samples.to_string()),
            ("case_b", "mc_seed", b.mc_seed.to_string()),
            ("pce", "order", a.order.map_or("auto".to_string(), |p| p.to_string())),
            ("dnn", "desk_presets", b.desk_presets.to_string()),
            ("dnn", "learning_rate", t.learning_rate.to_string()),
            ("dnn", "beta1", t.beta1.to_string()),
            ("dnn", "beta2", t.beta2.to_string()),
            ("dnn", "amsgrad", t.amsgrad.to_string()),
            ("dnn", "epsilon", t.epsilon.to_string()),
            ("dnn", "epochs", t.epochs.to_string()),
            ("dnn", "batch_size", t.batch_size.to_string()),
            ("dnn", "seed", t.seed.to_string()),
            ("output", "dir", self.output_dir.to_string_lossy().into_owned()),
        ]
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        let a = &mut self.case_a;
        let b = &mut self.case_b;
        match (section, key) {
            ("grid", "n") => self.grid_n = parse_one(v)?,
            ("grid", "verify_sizes") => self.verify_sizes = parse_list(v)?,
            ("solver", "rayleigh") => self.solver.rayleigh = parse_one(v)?,
            ("solver", "prandtl") => self.solver.prandtl = parse_one(v)?,
            ("solver", "dt") => {
                let cfl = match self.solver.time_step {
                    TimeStep::Cfl(c) => c,
                    TimeStep::Fixed(_) => SolverConfig::default_cfl(),
                };
                self.solver.time_step = if v == "auto" {
                    TimeStep::Cfl(cfl)
                } else {
                    TimeStep::Fixed(parse_one(v)?)
                };
            }
            ("solver", "cfl_target") => {
                let c = parse_one(v)?;
                if let TimeStep::Cfl(_) = self.solver.time_step {
                    self.solver.time_step = TimeStep::Cfl(c);
                }
            }
            ("solver", "steady_tol") => self.solver.steady_tol = parse_one(v)?,
            ("solver", "max_steps") => self.solver.max_steps = parse_one(v)?,
            ("solver", "poisson_tol") => self.solver.poisson_tol = parse_one(v)?,
            ("solver", "helmholtz_tol") => self.solver.helmholtz_tol = parse_one(v)?,
            ("solver", "max_cg_iterations") => self.solver.max_cg_iterations = parse_one(v)?,
            ("solver", "cfl_velocity_floor") => self.solver.cfl_velocity_floor = parse_one(v)?,
            ("solver", "dt_refresh_interval") => self.solver.dt_refresh_interval = parse_one(v)?,
            ("solver", "buoyancy") => self.solver.buoyancy = parse_one(v)?,
            ("solver", "workers") => self.workers = parse_one(v)?,
            ("boundary", "cold_wall") => self.boundary.cold_wall_theta = parse_one(v)?,
            ("boundary", "hot_wall") => {
                if let HotWall::Uniform(_) = self.boundary.hot_wall {
                    self.boundary.hot_wall = HotWall::Uniform(parse_one(v)?);
                }
            }
            ("boundary", "hot_strips") => {
                let temps: Vec<f64> = parse_list(v)?;
                if !temps.is_empty() {
                    self.boundary.hot_wall = HotWall::Strips(temps);
                }
            }
            ("case_a", "enabled") => self.case_a_enabled = parse_one(v)?,
            ("case_a", "mean_ra") => a.mean_ra = parse_one(v)?,
            ("case_a", "mean_pr") => a.mean_pr = parse_one(v)?,
            ("case_a", "rel_sigma") => a.rel_sigma = parse_one(v)?,
            ("case_a", "levels") => a.levels = parse_list(v)?,
            ("case_a", "n_test") => a.n_test = parse_one(v)?,
            ("case_a", "test_seed") => a.test_seed = parse_one(v)?,
            ("case_a", "mc_samples") => a.mc_samples = parse_one(v)?,
            ("case_a", "mc_seed") => a.mc_seed = parse_one(v)?,
            ("case_a", "surface_resolution") => a.surface_resolution = parse_one(v)?,
            ("case_a", "steady_tol") => self.case_a_steady_tol = parse_one(v)?,
            ("case_b", "enabled") => self.case_b_enabled = parse_one(v)?,
            ("case_b", "strips") => b.strips = parse_one(v)?,
            ("case_b", "mean_temp") => b.mean_temp = parse_one(v)?,
            ("case_b", "sigma_temp") => b.sigma_temp = parse_one(v)?,
            ("case_b", "cold_temp") => b.cold_temp = parse_one(v)?,
            ("case_b", "rayleigh") => b.rayleigh = parse_one(v)?,
            ("case_b", "prandtl") => b.prandtl = parse_one(v)?,
            ("case_b", "n_train") => b.n_train = parse_one(v)?,
            ("case_b", "n_val") => b.n_val = parse_one(v)?,
            ("case_b", "n_test") => b.n_test = parse_one(v)?,
            ("case_b", "train_seed") => b.train_seed = parse_one(v)?,
            ("case_b", "val_seed") => b.val_seed = parse_one(v)?,
            ("case_b", "test_seed") => b.test_seed = parse_one(v)?,
            ("case_b", "mc_samples") => b.mc_samples = parse_one(v)?,
            ("case_b", "mc_seed") => b.mc_seed = parse_one(v)?,
            ("pce", "order") => a.order = if v == "auto" { None } else { Some(parse_one(v)?) },
            ("dnn", "desk_presets") => b.desk_presets = parse_one(v)?,
            ("dnn", "learning_rate") => b.train.learning_rate = parse_one(v)?,
            ("dnn", "beta1") => b.train.beta1 = parse_one(v)?,
            ("dnn", "beta2") => b.train.beta2 = parse_one(v)?,
            ("dnn", "amsgrad") => b.train.amsgrad = parse_one(v)?,
            ("dnn", "epsilon") => b.train.epsilon = parse_one(v)?,
            ("dnn", "epochs") => b.train.epochs = parse_one(v)?,
            ("dnn", "batch_size") => b.train.batch_size = parse_one(v)?,
            ("dnn", "seed") => b.train.seed = parse_one(v)?,
            ("output", "dir") => {
                if v.is_empty() {
                    return Err("output directory must not be empty".into());
                }
                self.output_dir = PathBuf::from(v);
            }
            _ => return Err(String::new()),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let doc = Ini::load_from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        for (section, props) in doc.iter() {
            match section {
                Some(s) if SECTIONS.contains(&s) => {}
                Some(s) => return Err(ConfigError::UnknownSection(s.to_string())),
                None if props.is_empty() => {}
                None => {
                    let key = props.iter().next().map(|(k, _)| k.to_string()).unwrap_or_default();
                    return Err(ConfigError::Syntax(format!("key {key:?} appears before any section")));
                }
            }
        }
        for s in SECTIONS {
            if doc.section(Some(s)).is_none() {
                return Err(ConfigError::MissingSection(s.to_string()));
            }
        }
        // Strip lists override the uniform hot wall, so they are applied last.
        let mut cfg = Self::default();
        let mut pending_strips = None;
        for (section, props) in doc.iter() {
            let Some(section) = section else { continue };
            let mut seen = Vec::new();
            for (key, value) in props.iter() {
                if seen.contains(&key) {
                    return Err(ConfigError::DuplicateKey {
                        section: section.into(),
                        key: key.into(),
                    });
                }
                seen.push(key);
                if (section, key) == ("boundary", "hot_strips") {
                    pending_strips = Some(value.to_string());
                    continue;
                }
                cfg.set(section, key, value).map_err(|msg| {
                    if msg.is_empty() {
                        ConfigError::UnknownKey {
                            section: section.into(),
                            key: key.into(),
                        }
                    } else {
                        ConfigError::Value {
                            section: section.into(),
                            key: key.into(),
                            value: value.into(),
                            msg,
                        }
                    }
                })?;
            }
        }
        if let Some(v) = pending_strips {
            cfg.set("boundary", "hot_strips", &v).map_err(|msg| ConfigError::Value {
                section: "boundary".into(),
                key: "hot_strips".into(),
                value: v.clone(),
                msg,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every value against the preconditions of the module that
    /// consumes it.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn Display| ConfigError::Invalid(e.to_string());
        make_grid(self.grid_n).map_err(|e| invalid(&e))?;
        for &n in &self.verify_sizes {
            make_grid(n).map_err(|e| invalid(&e))?;
        }
        self.solver.validate().map_err(|e| invalid(&e))?;
        self.boundary.validate().map_err(|e| invalid(&e))?;
        if self.workers == 0 {
            return Err(ConfigError::Invalid("[solver] workers must be at least 1".into()));
        }
        self.case_a.validate().map_err(|e| invalid(&e))?;
        if !(self.case_a_steady_tol > 0.0) {
            return Err(ConfigError::Invalid("[case_a] steady_tol must be positive".into()));
        }
        self.case_b.validate().map_err(|e| invalid(&e))?;
        Ok(())
    }

    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (section, key, value) in self.entries() {
            if section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{section}]\n"));
                current = section;
            }
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    /// One line per key with its default, for `--help`.
    pub fn keys_help() -> String {
        let mut out = String::from("Config keys (defaults):\n");
        for (section, key, value) in Self::default().entries() {
            let shown = if value.is_empty() { "(empty)".to_string() } else { value };
            out.push_str(&format!("  [{section}] {key} = {shown}\n"));
        }
        out
    }

    /// Replaces every seed with `seed` plus a fixed per-use offset, so
    /// seeds stay distinct.
    pub fn override_seeds(&mut self, seed: u64) {
        self.case_a.test_seed = seed;
        self.case_a.mc_seed = seed.wrapping_add(1);
        self.case_b.train_seed = seed.wrapping_add(2);
        self.case_b.val_seed = seed.wrapping_add(3);
        self.case_b.test_seed = seed.wrapping_add(4);
        self.case_b.mc_seed = seed.wrapping_add(5);
        self.case_b.train.seed = seed.wrapping_add(6);
    }

    /// Solver settings for the Case A ensembles.
    pub fn case_a_solver(&self) -> SolverConfig {
        SolverConfig {
            steady_tol: self.case_a_steady_tol,
            ..self.solver.clone()
        }
    }
}
