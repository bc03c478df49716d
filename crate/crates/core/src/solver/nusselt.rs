//! Wall heat flux and pressure post-processing.

use super::linalg::Laplacian;
use super::{BoundarySpec, FlowState, SolverConfig};
use crate::grid::{Plane, ScalarField, StructuredGrid};

/// Wall temperature difference (1.05 - 0.95) that makes pure conduction
/// produce Nu = 1.
pub const REFERENCE_DELTA_THETA: f64 = 0.1;

/// Converts a wall-normal temperature gradient to a Nusselt number.
#[inline]
pub fn nusselt_scale(gradient: f64) -> f64 {
    gradient / REFERENCE_DELTA_THETA
}

/// Wall gradient from the wall value and the first two cell centres
/// (distances h/2 and 3h/2): exact for quadratics.
#[inline]
fn one_sided_gradient(wall: f64, first: f64, second: f64, h: f64) -> f64 {
    (-8.0 * wall + 9.0 * first - second) / (3.0 * h)
}

/// Local Nusselt number `dT/dx / 0.1` on the hot wall x = 1, indexed `(j, k)`.
pub fn nusselt_field(state: &FlowState, bc: &BoundarySpec, grid: &StructuredGrid) -> Plane {
    let n = grid.n();
    let wall = bc.hot_wall_plane(grid);
    let t = &state.theta;
    let mut nu = Plane::filled(n, n, 0.0);
    for k in 0..n {
        for j in 0..n {
            // distance is measured inward, so dT/dx = -dT/ds
            let g = -one_sided_gradient(wall.get(j, k), t.at(n - 1, j, k), t.at(n - 2, j, k), grid.h());
            nu.set(j, k, nusselt_scale(g));
        }
    }
    nu
}

/// Local Nusselt number `dT/dx / 0.1` on the cold wall x = 0.
pub fn cold_wall_nusselt(state: &FlowState, bc: &BoundarySpec, grid: &StructuredGrid) -> Plane {
    let n = grid.n();
    let t = &state.theta;
    let mut nu = Plane::filled(n, n, 0.0);
    for k in 0..n {
        for j in 0..n {
            let g = one_sided_gradient(bc.cold_wall_theta, t.at(0, j, k), t.at(1, j, k), grid.h());
            nu.set(j, k, nusselt_scale(g));
        }
    }
    nu
}

/// Midpoint-rule wall average `h^2 sum Nu`.
pub fn mean_nusselt(nu: &Plane, h: f64) -> f64 {
    h * h * nu.data().iter().sum::<f64>()
}

/// Pressure `P = phi - (Pr/sqrt(Ra)) dt Lap(phi)` with the Neumann Laplacian.
pub fn pressure_from_phi(phi: &ScalarField, config: &SolverConfig, dt: f64) -> ScalarField {
    let g = *phi.grid();
    let lap = Laplacian::neumann(g);
    let mut lp = vec![0.0; g.cell_count()];
    lap.apply_homogeneous(phi.values(), &mut lp);
    let c = config.viscosity() * dt;
    let values = phi.values().iter().zip(&lp).map(|(p, l)| p - c * l).collect();
    ScalarField::from_values(g, values).expect("same grid")
}
