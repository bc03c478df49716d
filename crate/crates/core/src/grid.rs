//! Uniform structured grid on the unit cube with cell-centred field storage.
//!
//! Cells are indexed `(i, j, k)` along `(x, y, z)`; storage is flat with `i`
//! varying fastest. All fields on a grid share this layout, which is also the
//! row order of the field CSV files.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::ops::{Index, IndexMut};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid: n = {0} (need n >= 4)")]
    InvalidGrid(usize),
    #[error("coordinate {0} outside the open unit interval")]
    OutOfDomain(f64),
    #[error("grid mismatch: expected {expected} cells per axis, got {found}")]
    Mismatch { expected: usize, found: usize },
    #[error("field file, line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const MIN_CELLS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructuredGrid {
    n: usize,
    h: f64,
}

pub fn make_grid(n: usize) -> Result<StructuredGrid, GridError> {
    StructuredGrid::new(n)
}

impl StructuredGrid {
    pub fn new(n: usize) -> Result<Self, GridError> {
        if n < MIN_CELLS {
            return Err(GridError::InvalidGrid(n));
        }
        Ok(Self {
            n,
            h: 1.0 / n as f64,
        })
    }

    /// Cells per axis.
    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    /// Cell edge length.
    #[inline]
    pub fn h(&self) -> f64 {
        self.h
    }

    #[inline]
    pub fn cell_count(&self) -> usize {
        self.n * self.n * self.n
    }

    /// Cell-centre coordinate `(i + 0.5) h` along any axis.
    #[inline]
    pub fn center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.h
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.n * (j + self.n * k)
    }

    /// Inverse of [`idx`](Self::idx).
    #[inline]
    pub fn ijk(&self, idx: usize) -> (usize, usize, usize) {
        let n = self.n;
        (idx % n, (idx / n) % n, idx / (n * n))
    }

    /// Layer whose centre is nearest to `coordinate`; ties go to the lower index.
    pub fn nearest_layer(&self, coordinate: f64) -> Result<usize, GridError> {
        if !(coordinate > 0.0 && coordinate < 1.0) {
            return Err(GridError::OutOfDomain(coordinate));
        }
        let t = coordinate * self.n as f64 - 0.5;
        let lower = t.floor();
        let layer = if t - lower > 0.5 { lower + 1.0 } else { lower };
        Ok((layer.max(0.0) as usize).min(self.n - 1))
    }

    pub fn scalar(&self, value: f64) -> ScalarField {
        ScalarField::filled(*self, value)
    }

    pub fn zeros(&self) -> ScalarField {
        ScalarField::filled(*self, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

/// Cell-centred scalar values, one per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: StructuredGrid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn filled(grid: StructuredGrid, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.cell_count()],
        }
    }

    pub fn from_fn(grid: StructuredGrid, f: impl Fn(f64, f64, f64) -> f64) -> Self {
        let mut field = Self::filled(grid, 0.0);
        for idx in 0..grid.cell_count() {
            let (i, j, k) = grid.ijk(idx);
            field.values[idx] = f(grid.center(i), grid.center(j), grid.center(k));
        }
        field
    }

    pub fn from_index_fn(grid: StructuredGrid, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut field = Self::filled(grid, 0.0);
        for idx in 0..grid.cell_count() {
            let (i, j, k) = grid.ijk(idx);
            field.values[idx] = f(i, j, k);
        }
        field
    }

    pub fn from_values(grid: StructuredGrid, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.cell_count() {
            return Err(GridError::Mismatch {
                expected: grid.cell_count(),
                found: values.len(),
            });
        }
        Ok(Self { grid, values })
    }

    #[inline]
    pub fn grid(&self) -> &StructuredGrid {
        &self.grid
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.grid.idx(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, value: f64) {
        let idx = self.grid.idx(i, j, k);
        self.values[idx] = value;
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Largest pointwise difference against another field on the same grid.
    pub fn max_abs_diff(&self, other: &ScalarField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// 2D layer perpendicular to `axis` at cell index `layer`.
    ///
    /// The returned plane uses the two remaining axes in (x, y, z) order,
    /// the first varying fastest.
    pub fn layer(&self, axis: Axis, layer: usize) -> Plane {
        let n = self.grid.n;
        let mut data = Vec::with_capacity(n * n);
        for b in 0..n {
            for a in 0..n {
                let (i, j, k) = match axis {
                    Axis::X => (layer, a, b),
                    Axis::Y => (a, layer, b),
                    Axis::Z => (a, b, layer),
                };
                data.push(self.at(i, j, k));
            }
        }
        Plane::new(n, n, data)
    }

    pub fn set_layer(&mut self, axis: Axis, layer: usize, plane: &Plane) {
        let n = self.grid.n;
        for b in 0..n {
            for a in 0..n {
                let (i, j, k) = match axis {
                    Axis::X => (layer, a, b),
                    Axis::Y => (a, layer, b),
                    Axis::Z => (a, b, layer),
                };
                self.set(i, j, k, plane.get(a, b));
            }
        }
    }

    /// Writes the field CSV: header `i,j,k,x,y,z,value`, one row per cell.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), GridError> {
        let g = &self.grid;
        let mut buf = String::with_capacity(64 * g.cell_count() + 32);
        buf.push_str("i,j,k,x,y,z,value\n");
        for (idx, v) in self.values.iter().enumerate() {
            let (i, j, k) = g.ijk(idx);
            writeln!(
                buf,
                "{},{},{},{},{},{},{}",
                i,
                j,
                k,
                fmt_real(g.center(i)),
                fmt_real(g.center(j)),
                fmt_real(g.center(k)),
                fmt_real(*v)
            )
            .expect("writing to a String cannot fail");
        }
        out.write_all(buf.as_bytes())?;
        Ok(())
    }

    /// Reads a field CSV written by [`write_csv`](Self::write_csv). The grid
    /// size is inferred from the row count.
    pub fn read_csv<R: Read>(input: R) -> Result<Self, GridError> {
        let reader = BufReader::new(input);
        let mut lines = reader.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim() != "i,j,k,x,y,z,value" {
            return Err(GridError::Parse {
                line: 1,
                msg: format!("unexpected header {header:?}"),
            });
        }
        let mut rows: Vec<(usize, usize, usize, f64)> = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: String| GridError::Parse {
                line: lineno + 2,
                msg,
            };
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 7 {
                return Err(parse_err(format!("expected 7 columns, got {}", cols.len())));
            }
            let int = |s: &str| s.trim().parse::<usize>().map_err(|e| parse_err(e.to_string()));
            let value = cols[6]
                .trim()
                .parse::<f64>()
                .map_err(|e| parse_err(e.to_string()))?;
            rows.push((int(cols[0])?, int(cols[1])?, int(cols[2])?, value));
        }
        let n = (rows.len() as f64).cbrt().round() as usize;
        if n * n * n != rows.len() {
            return Err(GridError::Parse {
                line: 0,
                msg: format!("{} rows is not a cube number", rows.len()),
            });
        }
        let grid = StructuredGrid::new(n)?;
        let mut field = grid.zeros();
        for (row, (i, j, k, v)) in rows.into_iter().enumerate() {
            if i >= n || j >= n || k >= n || grid.idx(i, j, k) != row {
                return Err(GridError::Parse {
                    line: row + 2,
                    msg: format!("cell ({i},{j},{k}) out of row-major order"),
                });
            }
            field.values[row] = v;
        }
        Ok(field)
    }
}

impl Index<usize> for ScalarField {
    type Output = f64;
    fn index(&self, idx: usize) -> &f64 {
        &self.values[idx]
    }
}

impl IndexMut<usize> for ScalarField {
    fn index_mut(&mut self, idx: usize) -> &mut f64 {
        &mut self.values[idx]
    }
}

/// Velocity with cell-centred components.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub u: ScalarField,
    pub v: ScalarField,
    pub w: ScalarField,
}

impl VectorField {
    pub fn zeros(grid: StructuredGrid) -> Self {
        Self {
            u: grid.zeros(),
            v: grid.zeros(),
            w: grid.zeros(),
        }
    }

    pub fn grid(&self) -> &StructuredGrid {
        self.u.grid()
    }

    pub fn components(&self) -> [&ScalarField; 3] {
        [&self.u, &self.v, &self.w]
    }

    pub fn components_mut(&mut self) -> [&mut ScalarField; 3] {
        [&mut self.u, &mut self.v, &mut self.w]
    }

    /// Largest absolute component value anywhere.
    pub fn max_abs(&self) -> f64 {
        self.u.max_abs().max(self.v.max_abs()).max(self.w.max_abs())
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite() && self.w.is_finite()
    }
}

/// Dense 2D array, first index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    na: usize,
    nb: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn new(na: usize, nb: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), na * nb, "plane data length");
        Self { na, nb, data }
    }

    pub fn filled(na: usize, nb: usize, value: f64) -> Self {
        Self::new(na, nb, vec![value; na * nb])
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.na, self.nb)
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.data[a + self.na * b]
    }

    #[inline]
    pub fn set(&mut self, a: usize, b: usize, value: f64) {
        self.data[a + self.na * b] = value;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// CSV with header `a,b,value`, first index fastest.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut buf = String::from("a,b,value\n");
        for b in 0..self.nb {
            for a in 0..self.na {
                writeln!(buf, "{},{},{}", a, b, fmt_real(self.get(a, b))).unwrap();
            }
        }
        out.write_all(buf.as_bytes())
    }
}

impl Plane {
    /// Reads the format written by [`Plane::write_csv`].
    pub fn read_csv<R: Read>(input: R) -> Result<Self, GridError> {
        let mut lines = BufReader::new(input).lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim() != "a,b,value" {
            return Err(GridError::Parse {
                line: 1,
                msg: format!("expected header `a,b,value`, found `{header}`"),
            });
        }
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: &str| GridError::Parse {
                line: i + 2,
                msg: msg.to_string(),
            };
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(bad("expected 3 columns"));
            }
            let a: usize = parts[0].trim().parse().map_err(|_| bad("bad index"))?;
            let b: usize = parts[1].trim().parse().map_err(|_| bad("bad index"))?;
            let v: f64 = parts[2].trim().parse().map_err(|_| bad("bad value"))?;
            entries.push((a, b, v));
        }
        let na = entries.iter().map(|e| e.0 + 1).max().unwrap_or(0);
        let nb = entries.iter().map(|e| e.1 + 1).max().unwrap_or(0);
        if entries.len() != na * nb {
            return Err(GridError::Parse {
                line: 0,
                msg: format!("{} entries for a {na}x{nb} plane", entries.len()),
            });
        }
        let mut plane = Plane::filled(na, nb, f64::NAN);
        for (a, b, v) in entries {
            plane.set(a, b, v);
        }
        if plane.data.iter().any(|v| v.is_nan()) {
            return Err(GridError::Parse {
                line: 0,
                msg: "duplicate plane entries".into(),
            });
        }
        Ok(plane)
    }
}

/// Cell layer nearest to `coordinate` along `axis`.
pub fn midplane_slice(field: &ScalarField, axis: Axis, coordinate: f64) -> Result<Plane, GridError> {
    let layer = field.grid().nearest_layer(coordinate)?;
    Ok(field.layer(axis, layer))
}

/// Formats a float with 17 significant digits, which round-trips any f64.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_sizes() {
        let g = make_grid(4).unwrap();
        assert_eq!(g.h(), 0.25);
        assert_eq!(g.cell_count(), 64);
        let g = make_grid(32).unwrap();
        assert_eq!(g.h(), 0.03125);
        assert_eq!(g.cell_count(), 32768);
        assert!(matches!(make_grid(2), Err(GridError::InvalidGrid(2))));
    }

    #[test]
    fn centers_inside_unit_interval() {
        for n in [4, 5, 17, 64] {
            let g = make_grid(n).unwrap();
            assert!((g.h() * n as f64 - 1.0).abs() < 1e-15);
            for i in 0..n {
                let c = g.center(i);
                assert!(c > 0.0 && c < 1.0);
            }
        }
    }

    #[test]
    fn midplane_tie_breaks_to_lower_index() {
        let g = make_grid(4).unwrap();
        assert_eq!(g.nearest_layer(0.5).unwrap(), 1);
        let g = make_grid(8).unwrap();
        let f = ScalarField::from_index_fn(g, |_, _, k| k as f64);
        let plane = midplane_slice(&f, Axis::Z, 0.5).unwrap();
        assert!(plane.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn constant_slices() {
        let g = make_grid(6).unwrap();
        let f = g.scalar(2.5);
        for axis in [Axis::X, Axis::Y, Axis::Z] {
            let p = midplane_slice(&f, axis, 0.3).unwrap();
            assert!(p.data().iter().all(|&v| v == 2.5));
        }
    }

    #[test]
    fn slice_outside_domain_is_rejected() {
        let g = make_grid(4).unwrap();
        let f = g.zeros();
        for c in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(
                midplane_slice(&f, Axis::Y, c),
                Err(GridError::OutOfDomain(_))
            ));
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let g = make_grid(5).unwrap();
        let f = ScalarField::from_fn(g, |x, y, z| (x * 1.1).sin() + y.exp() / 3.0 - z * 1e-7);
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("i,j,k,x,y,z,value\n"));
        let back = ScalarField::read_csv(&buf[..]).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn csv_rejects_bad_header() {
        let err = ScalarField::read_csv("a,b\n".as_bytes()).unwrap_err();
        assert!(matches!(err, GridError::Parse { line: 1, .. }));
    }
}
