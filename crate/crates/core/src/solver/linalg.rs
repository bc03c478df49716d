//! Seven-point stencil operators and a Jacobi-preconditioned conjugate
//! gradient solver.
//!
//! Reductions are summed over fixed-size chunks in a fixed order, so results
//! do not depend on how many threads rayon uses.

use thiserror::Error;

use crate::grid::{Plane, StructuredGrid};

const CHUNK: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinearSolveError {
    #[error("{system}: no convergence after {iterations} iterations (relative residual {residual:.3e}, tol {tol:.1e})")]
    NotConverged {
        system: &'static str,
        iterations: usize,
        residual: f64,
        tol: f64,
    },
    #[error("{system}: non-finite values in linear solve")]
    NonFinite { system: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub relative_residual: f64,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let partial: Vec<f64> = a
        .chunks(CHUNK)
        .zip(b.chunks(CHUNK))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
        .collect();
    partial.iter().sum()
}

pub fn sum(a: &[f64]) -> f64 {
    let partial: Vec<f64> = a.chunks(CHUNK).map(|x| x.iter().sum::<f64>()).collect();
    partial.iter().sum()
}

pub fn remove_mean(a: &mut [f64]) {
    let mean = sum(a) / a.len() as f64;
    a.iter_mut().for_each(|v| *v -= mean);
}

/// Condition applied on one face of the cube.
#[derive(Debug, Clone, PartialEq)]
pub enum FaceCondition {
    /// Zero normal gradient.
    Neumann,
    /// Prescribed face value, one entry per boundary cell. The plane is
    /// indexed by the two tangential cell indices in (x, y, z) order.
    Dirichlet(Plane),
}

impl FaceCondition {
    pub fn dirichlet_uniform(n: usize, value: f64) -> Self {
        FaceCondition::Dirichlet(Plane::filled(n, n, value))
    }

    fn is_dirichlet(&self) -> bool {
        matches!(self, FaceCondition::Dirichlet(_))
    }
}

/// Boundary conditions on the six faces, ordered
/// `[x=0, x=1, y=0, y=1, z=0, z=1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceConditions(pub [FaceCondition; 6]);

impl FaceConditions {
    pub fn all_neumann() -> Self {
        Self(std::array::from_fn(|_| FaceCondition::Neumann))
    }

    pub fn no_slip(n: usize) -> Self {
        Self(std::array::from_fn(|_| FaceCondition::dirichlet_uniform(n, 0.0)))
    }

    fn dirichlet_mask(&self) -> [bool; 6] {
        std::array::from_fn(|f| self.0[f].is_dirichlet())
    }
}

/// Discrete Laplacian on cell centres. Interior faces use the compact
/// two-point flux; a Dirichlet face contributes `2 (phi_b - phi_P) / h^2`
/// (face value half a cell away) and a Neumann face contributes nothing.
///
/// `apply_homogeneous` is the linear part (boundary values set to zero);
/// `boundary_source` is the constant remainder, so that
/// `Lap(phi) = apply_homogeneous(phi) + boundary_source`.
#[derive(Debug, Clone)]
pub struct Laplacian {
    grid: StructuredGrid,
    dirichlet: [bool; 6],
    conditions: FaceConditions,
}

impl Laplacian {
    pub fn new(grid: StructuredGrid, conditions: FaceConditions) -> Self {
        Self {
            grid,
            dirichlet: conditions.dirichlet_mask(),
            conditions,
        }
    }

    pub fn neumann(grid: StructuredGrid) -> Self {
        Self::new(grid, FaceConditions::all_neumann())
    }

    pub fn grid(&self) -> &StructuredGrid {
        &self.grid
    }

    /// Diagonal coefficient times `h^2` (a non-positive count).
    #[inline]
    fn diag_scaled(&self, i: usize, j: usize, k: usize) -> f64 {
        let n = self.grid.n();
        let mut d = 0.0;
        for (pos, lo, hi) in [(i, 0, 1), (j, 2, 3), (k, 4, 5)] {
            d -= if pos == 0 {
                if self.dirichlet[lo] { 2.0 } else { 0.0 }
            } else {
                1.0
            };
            d -= if pos == n - 1 {
                if self.dirichlet[hi] { 2.0 } else { 0.0 }
            } else {
                1.0
            };
        }
        d
    }

    pub fn apply_homogeneous(&self, x: &[f64], y: &mut [f64]) {
        let n = self.grid.n();
        let inv_h2 = 1.0 / (self.grid.h() * self.grid.h());
        let plane = n * n;
        y.chunks_mut(plane).enumerate().for_each(|(k, yk)| {
            for j in 0..n {
                for i in 0..n {
                    let p = i + n * j + plane * k;
                    let xp = x[p];
                    let mut acc = self.diag_scaled(i, j, k) * xp;
                    if i > 0 {
                        acc += x[p - 1];
                    }
                    if i + 1 < n {
                        acc += x[p + 1];
                    }
                    if j > 0 {
                        acc += x[p - n];
                    }
                    if j + 1 < n {
                        acc += x[p + n];
                    }
                    if k > 0 {
                        acc += x[p - plane];
                    }
                    if k + 1 < n {
                        acc += x[p + plane];
                    }
                    yk[i + n * j] = acc * inv_h2;
                }
            }
        });
    }

    /// Constant term from Dirichlet face values.
    pub fn boundary_source(&self) -> Vec<f64> {
        let g = self.grid;
        let n = g.n();
        let inv_h2 = 1.0 / (g.h() * g.h());
        let mut out = vec![0.0; g.cell_count()];
        for (face, cond) in self.conditions.0.iter().enumerate() {
            let FaceCondition::Dirichlet(values) = cond else {
                continue;
            };
            let layer = if face % 2 == 0 { 0 } else { n - 1 };
            for b in 0..n {
                for a in 0..n {
                    let (i, j, k) = match face / 2 {
                        0 => (layer, a, b),
                        1 => (a, layer, b),
                        _ => (a, b, layer),
                    };
                    out[g.idx(i, j, k)] += 2.0 * values.get(a, b) * inv_h2;
                }
            }
        }
        out
    }

    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.apply_homogeneous(x, y);
        let src = self.boundary_source();
        y.iter_mut().zip(src.iter()).for_each(|(a, b)| *a += b);
    }

    /// Diagonal of the homogeneous operator.
    pub fn diagonal(&self) -> Vec<f64> {
        let g = self.grid;
        let inv_h2 = 1.0 / (g.h() * g.h());
        (0..g.cell_count())
            .map(|idx| {
                let (i, j, k) = g.ijk(idx);
                self.diag_scaled(i, j, k) * inv_h2
            })
            .collect()
    }
}

/// Symmetric positive (semi-)definite operator for CG.
pub trait SpdOperator: Sync {
    fn apply(&self, x: &[f64], y: &mut [f64]);
    fn diagonal(&self) -> Vec<f64>;
}

/// `I - c * Lap` with homogeneous boundary values (`c >= 0`).
pub struct Helmholtz<'a> {
    pub laplacian: &'a Laplacian,
    pub coefficient: f64,
}

impl SpdOperator for Helmholtz<'_> {
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.laplacian.apply_homogeneous(x, y);
        let c = self.coefficient;
        y.iter_mut()
            .zip(x.iter())
            .for_each(|(yi, xi)| *yi = xi - c * *yi);
    }

    fn diagonal(&self) -> Vec<f64> {
        self.laplacian
            .diagonal()
            .into_iter()
            .map(|d| 1.0 - self.coefficient * d)
            .collect()
    }
}

/// `-Lap` with pure Neumann faces; singular with the constants as null space.
pub struct NegLaplacian<'a>(pub &'a Laplacian);

impl SpdOperator for NegLaplacian<'_> {
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.0.apply_homogeneous(x, y);
        y.iter_mut().for_each(|v| *v = -*v);
    }

    fn diagonal(&self) -> Vec<f64> {
        self.0.diagonal().into_iter().map(|d| -d).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CgSettings {
    pub tol: f64,
    pub max_iter: usize,
    /// Keep the residual and the solution mean-free (pure-Neumann systems).
    pub mean_free: bool,
}

/// Preconditioned CG with a Jacobi preconditioner. `x` holds the initial
/// guess on entry and the solution on return. Convergence is declared when
/// `||b - A x||_2 <= tol * ||b||_2`.
pub fn pcg<A: SpdOperator>(
    system: &'static str,
    op: &A,
    b: &[f64],
    x: &mut [f64],
    settings: CgSettings,
) -> Result<SolveReport, LinearSolveError> {
    let len = b.len();
    let inv_diag: Vec<f64> = op.diagonal().into_iter().map(|d| 1.0 / d).collect();
    let b_norm = dot(b, b).sqrt();
    if !b_norm.is_finite() {
        return Err(LinearSolveError::NonFinite { system });
    }
    if b_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveReport {
            iterations: 0,
            relative_residual: 0.0,
        });
    }

    let mut r = vec![0.0; len];
    op.apply(x, &mut r);
    r.iter_mut().zip(b.iter()).for_each(|(ri, bi)| *ri = bi - *ri);
    if settings.mean_free {
        remove_mean(&mut r);
    }
    let mut rel = dot(&r, &r).sqrt() / b_norm;
    if rel <= settings.tol {
        if settings.mean_free {
            remove_mean(x);
        }
        return Ok(SolveReport {
            iterations: 0,
            relative_residual: rel,
        });
    }

    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; len];
    let mut rz = dot(&r, &z);

    for iter in 1..=settings.max_iter {
        op.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap.is_finite() && pap > 0.0) {
            if pap == 0.0 && rel <= settings.tol {
                break;
            }
            return Err(LinearSolveError::NonFinite { system });
        }
        let alpha = rz / pap;
        x.iter_mut()
            .zip(p.iter())
            .for_each(|(xi, pi)| *xi += alpha * pi);
        r.iter_mut()
            .zip(ap.iter())
            .for_each(|(ri, api)| *ri -= alpha * api);
        if settings.mean_free && iter % 50 == 0 {
            remove_mean(&mut r);
        }
        rel = dot(&r, &r).sqrt() / b_norm;
        if !rel.is_finite() {
            return Err(LinearSolveError::NonFinite { system });
        }
        if rel <= settings.tol {
            if settings.mean_free {
                remove_mean(x);
            }
            return Ok(SolveReport {
                iterations: iter,
                relative_residual: rel,
            });
        }
        z.iter_mut()
            .zip(r.iter().zip(inv_diag.iter()))
            .for_each(|(zi, (ri, di))| *zi = ri * di);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.iter_mut()
            .zip(z.iter())
            .for_each(|(pi, zi)| *pi = zi + beta * *pi);
    }
    Err(LinearSolveError::NotConverged {
        system,
        iterations: settings.max_iter,
        residual: rel,
        tol: settings.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;

    #[test]
    fn chunked_reductions_match_sequential() {
        let a: Vec<f64> = (0..10_000).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..10_000).map(|i| (i as f64 * 0.11).cos()).collect();
        let seq: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - seq).abs() < 1e-10);
        let s: f64 = a.iter().sum();
        assert!((sum(&a) - s).abs() < 1e-10);
    }

    #[test]
    fn laplacian_of_linear_profile_with_dirichlet_ends() {
        // phi = x with face values 0 and 1 at the x walls, Neumann elsewhere.
        let g = make_grid(6).unwrap();
        let n = g.n();
        let conditions = FaceConditions([
            FaceCondition::dirichlet_uniform(n, 0.0),
            FaceCondition::dirichlet_uniform(n, 1.0),
            FaceCondition::Neumann,
            FaceCondition::Neumann,
            FaceCondition::Neumann,
            FaceCondition::Neumann,
        ]);
        let lap = Laplacian::new(g, conditions);
        let phi: Vec<f64> = (0..g.cell_count()).map(|p| g.center(g.ijk(p).0)).collect();
        let mut out = vec![0.0; phi.len()];
        lap.apply(&phi, &mut out);
        assert!(out.iter().all(|v| v.abs() < 1e-10), "{:?}", &out[..6]);
    }

    #[test]
    fn operators_are_symmetric() {
        let g = make_grid(5).unwrap();
        let lap = Laplacian::new(g, FaceConditions::no_slip(g.n()));
        let op = Helmholtz {
            laplacian: &lap,
            coefficient: 0.3,
        };
        let x: Vec<f64> = (0..g.cell_count()).map(|i| ((i * 7) % 13) as f64 - 6.0).collect();
        let y: Vec<f64> = (0..g.cell_count()).map(|i| ((i * 5) % 11) as f64 * 0.5).collect();
        let mut ax = vec![0.0; x.len()];
        let mut ay = vec![0.0; y.len()];
        op.apply(&x, &mut ax);
        op.apply(&y, &mut ay);
        assert!((dot(&ax, &y) - dot(&x, &ay)).abs() < 1e-9);
    }

    #[test]
    fn cg_solves_helmholtz() {
        let g = make_grid(8).unwrap();
        let lap = Laplacian::new(g, FaceConditions::no_slip(g.n()));
        let op = Helmholtz {
            laplacian: &lap,
            coefficient: 0.01,
        };
        let truth: Vec<f64> = (0..g.cell_count()).map(|i| (i as f64 * 0.01).sin()).collect();
        let mut b = vec![0.0; truth.len()];
        op.apply(&truth, &mut b);
        let mut x = vec![0.0; truth.len()];
        let settings = CgSettings {
            tol: 1e-12,
            max_iter: 500,
            mean_free: false,
        };
        let report = pcg("test", &op, &b, &mut x, settings).unwrap();
        assert!(report.relative_residual <= 1e-12);
        let err = x.iter().zip(&truth).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-9, "err {err}");
    }

    #[test]
    fn cg_reports_iteration_cap() {
        let g = make_grid(8).unwrap();
        let lap = Laplacian::neumann(g);
        let b: Vec<f64> = (0..g.cell_count()).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut b = b;
        remove_mean(&mut b);
        let mut x = vec![0.0; b.len()];
        let settings = CgSettings {
            tol: 1e-14,
            max_iter: 2,
            mean_free: true,
        };
        let err = pcg("poisson", &NegLaplacian(&lap), &b, &mut x, settings).unwrap_err();
        assert!(matches!(err, LinearSolveError::NotConverged { iterations: 2, .. }));
    }
}
