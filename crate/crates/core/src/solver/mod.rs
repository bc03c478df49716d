//! Steady natural-convection solver for the Boussinesq equations in the unit
//! cube, using a fractional-step (projection) scheme on a collocated grid.
//!
//! Each time step:
//! 1. predicts an intermediate velocity with Adams–Bashforth convection,
//!    Crank–Nicolson diffusion and the buoyancy source ([`predictor_step`]);
//! 2. solves a pure-Neumann Poisson problem for the pressure potential
//!    ([`solve_poisson`]) with face velocities interpolated from the cells;
//! 3. projects face and cell velocities ([`correct_velocity`]);
//! 4. advances temperature with the corrected face fluxes ([`energy_step`]).
//!
//! Velocities are non-dimensionalised with `(alpha/L) Ra^0.5`, time with
//! `(L^2/alpha) Ra^-0.5`. Gravity points along `-y`.

mod linalg;
mod nusselt;
mod run;
mod step;

pub use linalg::{
    dot, pcg, remove_mean, CgSettings, FaceCondition, FaceConditions, Helmholtz, Laplacian,
    LinearSolveError, NegLaplacian, SolveReport, SpdOperator,
};
pub use nusselt::{
    cold_wall_nusselt, mean_nusselt, nusselt_field, nusselt_scale, pressure_from_phi,
    REFERENCE_DELTA_THETA,
};
pub use run::{run_to_steady, run_to_steady_with, select_dt, steady_error, StepMonitor};
pub use step::{
    cell_divergence_free_residual, cell_gradient, convection, correct_faces, correct_velocity, energy_step, subtract_face_gradient,
    face_divergence, interpolate_faces, predictor_step, solve_poisson, solve_poisson_from,
    EnergyUpdate, FaceVelocity, Prediction,
};

use thiserror::Error;

use crate::grid::{Plane, ScalarField, StructuredGrid, VectorField};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid boundary specification: {0}")]
    InvalidBoundary(String),
    #[error("solution diverged: field `{field}` reached {value:.3e} at step {step}")]
    Diverged {
        field: &'static str,
        step: usize,
        value: f64,
    },
    #[error(transparent)]
    LinearSolve(#[from] LinearSolveError),
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
}

/// How the time step is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeStep {
    Fixed(f64),
    /// `dt = cfl * h / max(|u|_max, u_floor)`, refreshed periodically.
    Cfl(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub rayleigh: f64,
    pub prandtl: f64,
    pub time_step: TimeStep,
    pub steady_tol: f64,
    pub max_steps: usize,
    pub poisson_tol: f64,
    pub helmholtz_tol: f64,
    pub max_cg_iterations: usize,
    /// Velocity floor in the CFL time-step rule.
    pub cfl_velocity_floor: f64,
    /// Steps between CFL time-step refreshes.
    pub dt_refresh_interval: usize,
    /// Disables the buoyancy source (conduction-only runs).
    pub buoyancy: bool,
    /// Temperature at which the buoyancy force vanishes.
    pub theta_ref: f64,
    /// Temperature difference that scales the buoyancy source.
    pub delta_theta_ref: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rayleigh: 1e5,
            prandtl: 7.5,
            time_step: TimeStep::Cfl(Self::default_cfl()),
            steady_tol: 1e-4,
            max_steps: 20_000,
            poisson_tol: 1e-8,
            helmholtz_tol: 1e-9,
            max_cg_iterations: 20_000,
            cfl_velocity_floor: 0.1,
            dt_refresh_interval: 10,
            buoyancy: true,
            theta_ref: 1.0,
            delta_theta_ref: REFERENCE_DELTA_THETA,
        }
    }
}

impl SolverConfig {
    pub fn new(rayleigh: f64, prandtl: f64) -> Self {
        Self {
            rayleigh,
            prandtl,
            ..Self::default()
        }
    }

    /// Courant number used when no fixed time step is given.
    pub fn default_cfl() -> f64 {
        0.5
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |msg: String| Err(SolverError::InvalidConfig(msg));
        if !(self.rayleigh > 0.0 && self.rayleigh.is_finite()) {
            return bad(format!("Ra must be positive, got {}", self.rayleigh));
        }
        if !(self.prandtl > 0.0 && self.prandtl.is_finite()) {
            return bad(format!("Pr must be positive, got {}", self.prandtl));
        }
        match self.time_step {
            TimeStep::Fixed(dt) if !(dt > 0.0 && dt.is_finite()) => {
                return bad(format!("dt must be positive, got {dt}"))
            }
            TimeStep::Cfl(c) if !(c > 0.0 && c.is_finite()) => {
                return bad(format!("cfl_target must be positive, got {c}"))
            }
            _ => {}
        }
        if !(self.steady_tol > 0.0) {
            return bad(format!("steady_tol must be positive, got {}", self.steady_tol));
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1".into());
        }
        for (name, tol) in [("poisson_tol", self.poisson_tol), ("helmholtz_tol", self.helmholtz_tol)] {
            if !(tol > 0.0 && tol < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {tol}"));
            }
        }
        if !(self.delta_theta_ref > 0.0) {
            return bad("delta_theta_ref must be positive".into());
        }
        if !(self.cfl_velocity_floor > 0.0) {
            return bad("cfl_velocity_floor must be positive".into());
        }
        if self.dt_refresh_interval == 0 {
            return bad("dt_refresh_interval must be at least 1".into());
        }
        Ok(())
    }

    /// Momentum diffusion coefficient `Pr / sqrt(Ra)`.
    pub fn viscosity(&self) -> f64 {
        self.prandtl / self.rayleigh.sqrt()
    }

    /// Thermal diffusion coefficient `1 / sqrt(Ra)`.
    pub fn diffusivity(&self) -> f64 {
        1.0 / self.rayleigh.sqrt()
    }

    pub fn cg(&self, tol: f64, mean_free: bool) -> CgSettings {
        CgSettings {
            tol,
            max_iter: self.max_cg_iterations,
            mean_free,
        }
    }
}

/// Hot-wall (x = 1) temperature profile.
#[derive(Debug, Clone, PartialEq)]
pub enum HotWall {
    Uniform(f64),
    /// Strip temperatures stacked along y, bottom strip first. Each strip
    /// spans the full z extent.
    Strips(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySpec {
    pub cold_wall_theta: f64,
    pub hot_wall: HotWall,
}

impl Default for BoundarySpec {
    fn default() -> Self {
        Self {
            cold_wall_theta: 0.95,
            hot_wall: HotWall::Uniform(1.05),
        }
    }
}

impl BoundarySpec {
    pub fn uniform(cold: f64, hot: f64) -> Self {
        Self {
            cold_wall_theta: cold,
            hot_wall: HotWall::Uniform(hot),
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if !self.cold_wall_theta.is_finite() {
            return Err(SolverError::InvalidBoundary("cold wall temperature not finite".into()));
        }
        match &self.hot_wall {
            HotWall::Uniform(t) if !t.is_finite() => {
                Err(SolverError::InvalidBoundary("hot wall temperature not finite".into()))
            }
            HotWall::Strips(t) if t.is_empty() => {
                Err(SolverError::InvalidBoundary("strip list is empty".into()))
            }
            HotWall::Strips(t) if t.iter().any(|v| !v.is_finite()) => {
                Err(SolverError::InvalidBoundary("strip temperature not finite".into()))
            }
            _ => Ok(()),
        }
    }

    /// Strip holding height `y`: `floor(y K)`, clamped to `K - 1`.
    pub fn strip_index(y: f64, strips: usize) -> usize {
        ((y * strips as f64).floor().max(0.0) as usize).min(strips - 1)
    }

    /// Hot-wall temperature at height `y`.
    pub fn hot_wall_theta(&self, y: f64) -> f64 {
        match &self.hot_wall {
            HotWall::Uniform(t) => *t,
            HotWall::Strips(ts) => ts[Self::strip_index(y, ts.len())],
        }
    }

    /// Mean hot-wall temperature over the wall area seen by the grid.
    pub fn mean_hot_theta(&self, grid: &StructuredGrid) -> f64 {
        let n = grid.n();
        (0..n).map(|j| self.hot_wall_theta(grid.center(j))).sum::<f64>() / n as f64
    }

    /// Hot-wall face values indexed `(j, k)`; each cell takes the strip
    /// holding its centre.
    pub fn hot_wall_plane(&self, grid: &StructuredGrid) -> Plane {
        let n = grid.n();
        let mut plane = Plane::filled(n, n, 0.0);
        for k in 0..n {
            for j in 0..n {
                plane.set(j, k, self.hot_wall_theta(grid.center(j)));
            }
        }
        plane
    }

    /// Temperature conditions: Dirichlet on the x walls, adiabatic elsewhere.
    pub fn temperature_conditions(&self, grid: &StructuredGrid) -> FaceConditions {
        FaceConditions([
            FaceCondition::dirichlet_uniform(grid.n(), self.cold_wall_theta),
            FaceCondition::Dirichlet(self.hot_wall_plane(grid)),
            FaceCondition::Neumann,
            FaceCondition::Neumann,
            FaceCondition::Neumann,
            FaceCondition::Neumann,
        ])
    }
}

/// Complete solver state at one time level.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub velocity: VectorField,
    /// Face-normal velocities from the last projection; these carry the
    /// divergence-free mass fluxes used for convection.
    pub faces: FaceVelocity,
    pub theta: ScalarField,
    pub phi: ScalarField,
    /// Momentum convection terms from the previous step (Adams–Bashforth).
    pub prev_convection: Option<[ScalarField; 3]>,
    pub prev_energy_convection: Option<ScalarField>,
    /// Time step used for the history terms above.
    pub prev_dt: f64,
    pub step_count: usize,
    pub time: f64,
}

impl FlowState {
    /// Fluid at rest with uniform temperature `theta0`.
    pub fn at_rest(grid: StructuredGrid, theta0: f64) -> Self {
        Self {
            velocity: VectorField::zeros(grid),
            faces: FaceVelocity::zeros(grid),
            theta: grid.scalar(theta0),
            phi: grid.zeros(),
            prev_convection: None,
            prev_energy_convection: None,
            prev_dt: 0.0,
            step_count: 0,
            time: 0.0,
        }
    }

    /// Start state used by [`run_to_steady`]: rest, with the conduction
    /// profile (linear in x between the wall values of each row).
    pub fn initial(grid: StructuredGrid, bc: &BoundarySpec) -> Self {
        let mut state = Self::at_rest(grid, 0.0);
        let cold = bc.cold_wall_theta;
        state.theta = ScalarField::from_fn(grid, |x, y, _| {
            cold + (bc.hot_wall_theta(y) - cold) * x
        });
        state
    }

    pub fn grid(&self) -> &StructuredGrid {
        self.theta.grid()
    }

    pub fn is_finite(&self) -> bool {
        self.velocity.is_finite() && self.theta.is_finite() && self.phi.is_finite()
    }
}

pub const STEADY_FIELDS: [&str; 4] = ["u", "v", "w", "theta"];

#[derive(Debug, Clone, PartialEq)]
pub struct SteadyDiagnostics {
    /// Last relative change per field, in [`STEADY_FIELDS`] order.
    pub errors: [f64; 4],
    pub converged: bool,
    pub steps: usize,
    pub time: f64,
    pub final_dt: f64,
    /// Largest face-divergence max-norm over all steps.
    pub max_divergence: f64,
}

impl SteadyDiagnostics {
    /// One-line JSON record.
    pub fn to_json_line(&self) -> String {
        let errs: Vec<String> = STEADY_FIELDS
            .iter()
            .zip(self.errors)
            .map(|(name, e)| format!("\"{name}\": {}", json_real(e)))
            .collect();
        format!(
            "{{\"converged\": {}, \"steps\": {}, \"time\": {}, \"final_dt\": {}, \"max_divergence\": {}, \"errors_per_field\": {{{}}}}}",
            self.converged,
            self.steps,
            json_real(self.time),
            json_real(self.final_dt),
            json_real(self.max_divergence),
            errs.join(", ")
        )
    }
}

pub(crate) fn json_real(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        "null".into()
    }
}
