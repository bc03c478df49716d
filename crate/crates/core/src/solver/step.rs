//! The four stages of one fractional step.

use super::linalg::{pcg, remove_mean, FaceConditions, Helmholtz, Laplacian, NegLaplacian};
use super::{BoundarySpec, CgSettings, FlowState, SolverConfig, SolverError};
use crate::grid::{ScalarField, StructuredGrid, VectorField};

/// Face-normal velocities on the three face families.
///
/// `x` holds `(n+1) n n` values indexed `i + (n+1)(j + n k)` for the face
/// between cells `i-1` and `i`; `y` and `z` are laid out the same way with
/// the face index in the y (resp. z) slot. Faces on walls carry zero.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceVelocity {
    n: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
}

impl FaceVelocity {
    pub fn zeros(grid: StructuredGrid) -> Self {
        let n = grid.n();
        let len = (n + 1) * n * n;
        Self {
            n,
            x: vec![0.0; len],
            y: vec![0.0; len],
            z: vec![0.0; len],
        }
    }

    #[inline]
    pub fn xi(&self, i: usize, j: usize, k: usize) -> usize {
        i + (self.n + 1) * (j + self.n * k)
    }

    #[inline]
    pub fn yi(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.n * (j + (self.n + 1) * k)
    }

    #[inline]
    pub fn zi(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.n * (j + self.n * k)
    }

    pub fn max_abs(&self) -> f64 {
        self.x
            .iter()
            .chain(&self.y)
            .chain(&self.z)
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Linear interpolation of cell velocities to interior faces.
pub fn interpolate_faces(velocity: &VectorField) -> FaceVelocity {
    let g = *velocity.grid();
    let n = g.n();
    let mut f = FaceVelocity::zeros(g);
    let (u, v, w) = (&velocity.u, &velocity.v, &velocity.w);
    for k in 0..n {
        for j in 0..n {
            for i in 1..n {
                let xi = f.xi(i, j, k);
                f.x[xi] = 0.5 * (u.at(i - 1, j, k) + u.at(i, j, k));
            }
        }
    }
    for k in 0..n {
        for j in 1..n {
            for i in 0..n {
                let yi = f.yi(i, j, k);
                f.y[yi] = 0.5 * (v.at(i, j - 1, k) + v.at(i, j, k));
            }
        }
    }
    for k in 1..n {
        for j in 0..n {
            for i in 0..n {
                let zi = f.zi(i, j, k);
                f.z[zi] = 0.5 * (w.at(i, j, k - 1) + w.at(i, j, k));
            }
        }
    }
    f
}

/// Net outflow per unit volume of each cell.
pub fn face_divergence(faces: &FaceVelocity, grid: &StructuredGrid) -> ScalarField {
    let n = grid.n();
    let inv_h = 1.0 / grid.h();
    let mut out = grid.zeros();
    out.values_mut()
        .chunks_mut(n * n)
        .enumerate()
        .for_each(|(k, plane)| {
            for j in 0..n {
                for i in 0..n {
                    let d = faces.x[faces.xi(i + 1, j, k)] - faces.x[faces.xi(i, j, k)]
                        + faces.y[faces.yi(i, j + 1, k)]
                        - faces.y[faces.yi(i, j, k)]
                        + faces.z[faces.zi(i, j, k + 1)]
                        - faces.z[faces.zi(i, j, k)];
                    plane[i + n * j] = d * inv_h;
                }
            }
        });
    out
}

/// Conservative convection `div(U phi)` with central face values.
pub fn convection(faces: &FaceVelocity, phi: &ScalarField) -> ScalarField {
    let g = *phi.grid();
    let n = g.n();
    let inv_h = 1.0 / g.h();
    let vals = phi.values();
    let mut out = g.zeros();
    out.values_mut()
        .chunks_mut(n * n)
        .enumerate()
        .for_each(|(k, plane)| {
            for j in 0..n {
                for i in 0..n {
                    let p = g.idx(i, j, k);
                    let c = vals[p];
                    let mut flux = 0.0;
                    if i + 1 < n {
                        flux += faces.x[faces.xi(i + 1, j, k)] * 0.5 * (c + vals[p + 1]);
                    }
                    if i > 0 {
                        flux -= faces.x[faces.xi(i, j, k)] * 0.5 * (c + vals[p - 1]);
                    }
                    if j + 1 < n {
                        flux += faces.y[faces.yi(i, j + 1, k)] * 0.5 * (c + vals[p + n]);
                    }
                    if j > 0 {
                        flux -= faces.y[faces.yi(i, j, k)] * 0.5 * (c + vals[p - n]);
                    }
                    if k + 1 < n {
                        flux += faces.z[faces.zi(i, j, k + 1)] * 0.5 * (c + vals[p + n * n]);
                    }
                    if k > 0 {
                        flux -= faces.z[faces.zi(i, j, k)] * 0.5 * (c + vals[p - n * n]);
                    }
                    plane[i + n * j] = flux * inv_h;
                }
            }
        });
    out
}

/// Adams–Bashforth weights for step ratio `dt / dt_prev`; explicit Euler
/// when there is no history.
fn ab2_weights(dt: f64, prev_dt: f64, has_history: bool) -> (f64, f64) {
    if has_history && prev_dt > 0.0 {
        let r = dt / prev_dt;
        (1.0 + 0.5 * r, -0.5 * r)
    } else {
        (1.0, 0.0)
    }
}

pub struct Prediction {
    pub u_star: VectorField,
    /// Convection terms evaluated at this step, kept as the next step's history.
    pub convection: [ScalarField; 3],
}

/// Intermediate velocity without the pressure gradient.
///
/// Solves, per component,
/// `(v - u^n)/dt = -AB2(Conv) + (nu/2) Lap(v + u^n) + B - grad(phi^n)`
/// with `nu = Pr/sqrt(Ra)`, zero velocity on every wall and buoyancy
/// `B = Pr (theta - theta_ref) / delta_theta_ref` in the +y equation, then
/// returns `u* = v + dt grad(phi^n)`. Diffusing `v` rather than `u*` keeps
/// the splitting error out of the steady state, which is then independent
/// of `dt` apart from the face interpolation term.
pub fn predictor_step(
    state: &FlowState,
    config: &SolverConfig,
    _bc: &BoundarySpec,
    dt: f64,
) -> Result<Prediction, SolverError> {
    let g = *state.grid();
    let nu = config.viscosity();
    let lap = Laplacian::new(g, FaceConditions::no_slip(g.n()));
    let op = Helmholtz {
        laplacian: &lap,
        coefficient: 0.5 * dt * nu,
    };
    let (w_now, w_prev) = ab2_weights(dt, state.prev_dt, state.prev_convection.is_some());

    let components = state.velocity.components();
    let conv: Vec<ScalarField> = components
        .iter()
        .map(|c| convection(&state.faces, c))
        .collect();
    let buoyancy_scale = config.prandtl / config.delta_theta_ref;

    let mut u_star = VectorField::zeros(g);
    let mut lap_un = vec![0.0; g.cell_count()];
    for (axis, (current, target)) in components
        .iter()
        .zip(u_star.components_mut())
        .enumerate()
    {
        lap.apply_homogeneous(current.values(), &mut lap_un);
        let grad_phi = cell_gradient(&state.phi, axis);
        let prev = state.prev_convection.as_ref().map(|p| p[axis].values());
        let theta = state.theta.values();
        let rhs: Vec<f64> = (0..g.cell_count())
            .map(|p| {
                let mut conv_term = w_now * conv[axis][p];
                if let Some(prev) = prev {
                    conv_term += w_prev * prev[p];
                }
                let mut source = 0.5 * nu * lap_un[p] - conv_term - grad_phi[p];
                if axis == 1 && config.buoyancy {
                    source += buoyancy_scale * (theta[p] - config.theta_ref);
                }
                current[p] + dt * source
            })
            .collect();
        let mut x = current.values().to_vec();
        pcg(
            "momentum",
            &op,
            &rhs,
            &mut x,
            config.cg(config.helmholtz_tol, false),
        )?;
        // Restore the lagged pressure gradient: u* itself excludes it.
        for (t, (xv, gp)) in target.values_mut().iter_mut().zip(x.iter().zip(&grad_phi)) {
            *t = xv + dt * gp;
        }
    }
    let mut it = conv.into_iter();
    let convection = [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()];
    Ok(Prediction { u_star, convection })
}

/// Solves `Lap(phi) = rhs` with zero-gradient walls. The mean of `rhs` is
/// projected out and the result has zero mean.
pub fn solve_poisson(rhs: &ScalarField, tol: f64) -> Result<ScalarField, SolverError> {
    let settings = CgSettings {
        tol,
        max_iter: 20 * rhs.grid().cell_count().max(1000),
        mean_free: true,
    };
    let mut phi = rhs.grid().zeros();
    solve_poisson_from(rhs, &mut phi, settings)?;
    Ok(phi)
}

/// [`solve_poisson`] starting from the guess in `phi`.
pub fn solve_poisson_from(
    rhs: &ScalarField,
    phi: &mut ScalarField,
    settings: CgSettings,
) -> Result<super::SolveReport, SolverError> {
    let g = *rhs.grid();
    let lap = Laplacian::neumann(g);
    // The system is -Lap(phi) = -rhs.
    let mut b: Vec<f64> = rhs.values().iter().map(|v| -v).collect();
    remove_mean(&mut b);
    let settings = CgSettings {
        mean_free: true,
        ..settings
    };
    let report = pcg("poisson", &NegLaplacian(&lap), &b, phi.values_mut(), settings)?;
    Ok(report)
}

/// Face velocities after projection: `U_f = interp(u*)_f - dt (phi_N - phi_P)/h`.
pub fn correct_faces(u_star: &VectorField, phi: &ScalarField, dt: f64) -> FaceVelocity {
    let mut f = interpolate_faces(u_star);
    subtract_face_gradient(&mut f, phi, dt);
    f
}

/// `U_f -= scale (phi_N - phi_P)/h` on every interior face.
pub fn subtract_face_gradient(f: &mut FaceVelocity, phi: &ScalarField, scale: f64) {
    let g = *phi.grid();
    let n = g.n();
    let scale = scale / g.h();
    for k in 0..n {
        for j in 0..n {
            for i in 1..n {
                let xi = f.xi(i, j, k);
                f.x[xi] -= scale * (phi.at(i, j, k) - phi.at(i - 1, j, k));
            }
        }
    }
    for k in 0..n {
        for j in 1..n {
            for i in 0..n {
                let yi = f.yi(i, j, k);
                f.y[yi] -= scale * (phi.at(i, j, k) - phi.at(i, j - 1, k));
            }
        }
    }
    for k in 1..n {
        for j in 0..n {
            for i in 0..n {
                let zi = f.zi(i, j, k);
                f.z[zi] -= scale * (phi.at(i, j, k) - phi.at(i, j, k - 1));
            }
        }
    }
}

/// Cell-centred gradient component of `phi` along `axis`: central in the
/// interior, one-sided across the nearest interior face in wall cells, so
/// linear fields are differentiated exactly everywhere.
pub fn cell_gradient(phi: &ScalarField, axis: usize) -> Vec<f64> {
    let g = *phi.grid();
    let n = g.n();
    let h = g.h();
    let mut out = vec![0.0; g.cell_count()];
    if n < 2 {
        return out;
    }
    let last = n - 1;
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let p = g.idx(i, j, k);
                let (pos, stride) = match axis {
                    0 => (i, 1),
                    1 => (j, n),
                    _ => (k, n * n),
                };
                out[p] = if pos == 0 {
                    (phi[p + stride] - phi[p]) / h
                } else if pos == last {
                    (phi[p] - phi[p - stride]) / h
                } else {
                    (phi[p + stride] - phi[p - stride]) / (2.0 * h)
                };
            }
        }
    }
    out
}

/// Cell velocities after projection: `u = u* - dt grad(phi)` with the
/// gradient from [`cell_gradient`].
pub fn correct_velocity(u_star: &VectorField, phi: &ScalarField, dt: f64) -> VectorField {
    let mut out = u_star.clone();
    if dt == 0.0 {
        return out;
    }
    for (axis, comp) in out.components_mut().into_iter().enumerate() {
        let grad = cell_gradient(phi, axis);
        comp.values_mut()
            .iter_mut()
            .zip(&grad)
            .for_each(|(v, g)| *v -= dt * g);
    }
    out
}

/// Largest |divergence| of the projected face velocities.
pub fn cell_divergence_free_residual(faces: &FaceVelocity, grid: &StructuredGrid) -> f64 {
    face_divergence(faces, grid).max_abs()
}

pub struct EnergyUpdate {
    pub theta: ScalarField,
    pub convection: ScalarField,
}

/// Advances temperature one step:
/// `(T' - T)/dt = -AB2(div(U T)) + (kappa/2)(Lap T' + Lap T)`,
/// `kappa = 1/sqrt(Ra)`, using the face velocities stored in `state`.
pub fn energy_step(
    state: &FlowState,
    config: &SolverConfig,
    bc: &BoundarySpec,
    dt: f64,
) -> Result<EnergyUpdate, SolverError> {
    let g = *state.grid();
    let kappa = config.diffusivity();
    let lap = Laplacian::new(g, bc.temperature_conditions(&g));
    let op = Helmholtz {
        laplacian: &lap,
        coefficient: 0.5 * dt * kappa,
    };
    let conv = convection(&state.faces, &state.theta);
    let (w_now, w_prev) = ab2_weights(dt, state.prev_dt, state.prev_energy_convection.is_some());
    let mut lap_t = vec![0.0; g.cell_count()];
    lap.apply_homogeneous(state.theta.values(), &mut lap_t);
    let src = lap.boundary_source();
    let prev = state.prev_energy_convection.as_ref().map(|p| p.values());
    let theta = state.theta.values();
    let rhs: Vec<f64> = (0..g.cell_count())
        .map(|p| {
            let mut conv_term = w_now * conv[p];
            if let Some(prev) = prev {
                conv_term += w_prev * prev[p];
            }
            theta[p] + dt * (0.5 * kappa * lap_t[p] + kappa * src[p] - conv_term)
        })
        .collect();
    let mut x = theta.to_vec();
    pcg(
        "energy",
        &op,
        &rhs,
        &mut x,
        config.cg(config.helmholtz_tol, false),
    )?;
    Ok(EnergyUpdate {
        theta: ScalarField::from_values(g, x)?,
        convection: conv,
    })
}
