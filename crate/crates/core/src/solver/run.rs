use log::debug;

use super::step::{
    correct_faces, correct_velocity, energy_step, face_divergence, predictor_step,
    solve_poisson_from, subtract_face_gradient,
};
use super::{BoundarySpec, FlowState, SolverConfig, SolverError, SteadyDiagnostics, TimeStep};
use crate::grid::{ScalarField, StructuredGrid};

const BLOW_UP_LIMIT: f64 = 1e6;
/// Cap on the face pressure-smoothing time scale, in units of `h`.
const FACE_TIME_FACTOR: f64 = 0.5;

/// Relative change `max|new - old| / max|new|`. A field that is identically
/// zero and unchanged reports zero.
pub fn steady_error(new: &ScalarField, old: &ScalarField) -> f64 {
    let diff = new.max_abs_diff(old);
    if diff == 0.0 {
        return 0.0;
    }
    let scale = new.max_abs();
    if scale == 0.0 {
        f64::INFINITY
    } else {
        diff / scale
    }
}

/// Time step for the coming step.
pub fn select_dt(state: &FlowState, config: &SolverConfig, grid: &StructuredGrid) -> f64 {
    match config.time_step {
        TimeStep::Fixed(dt) => dt,
        TimeStep::Cfl(cfl) => {
            let speed = state
                .velocity
                .max_abs()
                .max(state.faces.max_abs())
                .max(config.cfl_velocity_floor);
            cfl * grid.h() / speed
        }
    }
}

/// True when the current step would run above twice the target Courant
/// number; the time step is then refreshed ahead of schedule.
fn cfl_exceeded(state: &FlowState, config: &SolverConfig, dt: f64) -> bool {
    match config.time_step {
        TimeStep::Fixed(_) => false,
        TimeStep::Cfl(target) => {
            let speed = state.velocity.max_abs().max(state.faces.max_abs());
            speed * dt / state.grid().h() > 2.0 * target
        }
    }
}

/// Per-step hook; receives the state after each completed step.
pub trait StepMonitor {
    fn after_step(&mut self, state: &FlowState, errors: &[f64; 4], divergence: f64);
}

impl StepMonitor for () {
    fn after_step(&mut self, _: &FlowState, _: &[f64; 4], _: f64) {}
}

/// Marches from rest to steady state.
pub fn run_to_steady(
    config: &SolverConfig,
    bc: &BoundarySpec,
    grid: StructuredGrid,
) -> Result<(FlowState, SteadyDiagnostics), SolverError> {
    run_to_steady_with(config, bc, FlowState::initial(grid, bc), &mut ())
}

/// Marches `state` until every field's relative change per step drops
/// below `steady_tol` or `max_steps` steps have been taken.
pub fn run_to_steady_with<M: StepMonitor>(
    config: &SolverConfig,
    bc: &BoundarySpec,
    mut state: FlowState,
    monitor: &mut M,
) -> Result<(FlowState, SteadyDiagnostics), SolverError> {
    config.validate()?;
    bc.validate()?;
    let grid = *state.grid();
    let mut dt = select_dt(&state, config, &grid);
    let mut errors = [f64::INFINITY; 4];
    let mut max_divergence = 0.0_f64;
    let mut converged = false;
    let cg_poisson = config.cg(config.poisson_tol, true);

    for _ in 0..config.max_steps {
        if state.step_count % config.dt_refresh_interval == 0 || cfl_exceeded(&state, config, dt) {
            dt = select_dt(&state, config, &grid);
        }
        let prediction = predictor_step(&state, config, bc, dt)?;

        // Face pressure smoothing uses a time scale capped at a grid-fixed
        // value so the converged face fluxes do not depend on dt.
        let tau = dt.min(FACE_TIME_FACTOR * grid.h());
        let lagged = correct_velocity(&prediction.u_star, &state.phi, dt - tau);
        let mut faces = correct_faces(&lagged, &state.phi, tau);
        let mut rhs = face_divergence(&faces, &grid);
        rhs.values_mut().iter_mut().for_each(|v| *v /= dt);
        let mut increment = grid.zeros();
        solve_poisson_from(&rhs, &mut increment, cg_poisson)?;
        subtract_face_gradient(&mut faces, &increment, dt);
        let mut phi = state.phi.clone();
        phi.values_mut().iter_mut().zip(increment.values()).for_each(|(p, d)| *p += d);

        let velocity = correct_velocity(&prediction.u_star, &phi, dt);
        let divergence = face_divergence(&faces, &grid).max_abs();
        max_divergence = max_divergence.max(divergence);

        let old_velocity = std::mem::replace(&mut state.velocity, velocity);
        state.faces = faces;
        state.phi = phi;
        let energy = energy_step(&state, config, bc, dt)?;
        let old_theta = std::mem::replace(&mut state.theta, energy.theta);

        state.prev_convection = Some(prediction.convection);
        state.prev_energy_convection = Some(energy.convection);
        state.prev_dt = dt;
        state.step_count += 1;
        state.time += dt;

        let fields = [
            ("u", &state.velocity.u, &old_velocity.u),
            ("v", &state.velocity.v, &old_velocity.v),
            ("w", &state.velocity.w, &old_velocity.w),
            ("theta", &state.theta, &old_theta),
        ];
        for (slot, (name, new, old)) in fields.iter().enumerate() {
            let norm = new.max_abs();
            if !norm.is_finite() || norm > BLOW_UP_LIMIT {
                return Err(SolverError::Diverged {
                    field: name,
                    step: state.step_count,
                    value: norm,
                });
            }
            errors[slot] = steady_error(new, old);
        }
        if !state.phi.is_finite() || state.phi.max_abs() > BLOW_UP_LIMIT {
            return Err(SolverError::Diverged {
                field: "phi",
                step: state.step_count,
                value: state.phi.max_abs(),
            });
        }
        monitor.after_step(&state, &errors, divergence);
        if state.step_count % 200 == 0 {
            debug!(
                "step {} t={:.3} dt={:.4} errors={:?} div={:.2e}",
                state.step_count, state.time, dt, errors, divergence
            );
        }
        if errors.iter().all(|&e| e < config.steady_tol) {
            converged = true;
            break;
        }
    }

    let diagnostics = SteadyDiagnostics {
        errors,
        converged,
        steps: state.step_count,
        time: state.time,
        final_dt: dt,
        max_divergence,
    };
    Ok((state, diagnostics))
}
