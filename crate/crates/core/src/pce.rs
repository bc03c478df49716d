//! Polynomial chaos surrogates in the normalized probabilists' Hermite basis.
//!
//! Inputs are standardized with the mean and standard deviation stored in
//! the model, so callers always work in physical units. Because the basis
//! is orthonormal under the standard normal weight, the mean of an output is
//! its constant coefficient and the variance is the sum of the squares of
//! the remaining ones.

use std::io::{BufRead, BufReader, Read, Write};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::grid::{fmt_real, Plane};
use crate::sampling::{Marginal, SampleMatrix};

#[derive(Debug, Error)]
pub enum PceError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("underdetermined fit: {samples} samples for {basis} basis functions")]
    Underdetermined { samples: usize, basis: usize },
    #[error("ill-conditioned collocation matrix (condition estimate {condition:.3e})")]
    Conditioning { condition: f64 },
    #[error("output {output} has zero variance; sensitivity is undefined")]
    UndefinedSensitivity { output: usize },
    #[error("response surfaces need exactly 2 inputs, model has {0}")]
    Dimensionality(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("model file, line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Largest condition number of the equilibrated collocation matrix accepted.
pub const MAX_CONDITION: f64 = 1e12;

const ZERO_VARIANCE_RATIO: f64 = 1e-24;

const FORMAT_TAG: &str = "convect-uq-pce";
const FORMAT_VERSION: u32 = 1;

/// Normalized probabilists' Hermite polynomial `He_n(z)/sqrt(n!)`.
pub fn hermite_eval(order: usize, z: f64) -> f64 {
    let (mut prev, mut cur) = (0.0, 1.0);
    for n in 0..order {
        let nf = n as f64;
        let next = (z * cur - nf.sqrt() * prev) / (nf + 1.0).sqrt();
        prev = cur;
        cur = next;
    }
    cur
}

/// `psi_0(z) ..= psi_order(z)` in one pass.
pub fn hermite_table(order: usize, z: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(order + 1);
    out.push(1.0);
    if order >= 1 {
        out.push(z);
    }
    for n in 1..order {
        let nf = n as f64;
        out.push((z * out[n] - nf.sqrt() * out[n - 1]) / (nf + 1.0).sqrt());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MultiIndex(pub Vec<usize>);

impl MultiIndex {
    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }
}

/// Total-order basis in graded-lexicographic order, constant first.
#[derive(Debug, Clone, PartialEq)]
pub struct PceBasis {
    dims: usize,
    order: usize,
    indices: Vec<MultiIndex>,
}

impl PceBasis {
    pub fn new(dims: usize, order: usize) -> Result<Self, PceError> {
        if dims == 0 {
            return Err(PceError::Shape("basis needs at least one input".into()));
        }
        let mut indices = Vec::new();
        for total in 0..=order {
            let mut current = vec![0; dims];
            push_with_total(&mut indices, &mut current, 0, total);
        }
        Ok(Self { dims, order, indices })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[MultiIndex] {
        &self.indices
    }

    pub fn position(&self, alpha: &[usize]) -> Option<usize> {
        self.indices.iter().position(|m| m.0 == alpha)
    }

    /// Basis functions evaluated at one standardized point.
    pub fn evaluate(&self, z: &[f64]) -> Vec<f64> {
        let tables: Vec<Vec<f64>> = z.iter().map(|&zj| hermite_table(self.order, zj)).collect();
        self.indices
            .iter()
            .map(|alpha| alpha.0.iter().enumerate().map(|(j, &a)| tables[j][a]).product())
            .collect()
    }
}

// Within one total order, the first coordinate counts down, so (1,0) precedes (0,1).
fn push_with_total(out: &mut Vec<MultiIndex>, current: &mut Vec<usize>, pos: usize, remaining: usize) {
    if pos + 1 == current.len() {
        current[pos] = remaining;
        out.push(MultiIndex(current.clone()));
        return;
    }
    for a in (0..=remaining).rev() {
        current[pos] = a;
        push_with_total(out, current, pos + 1, remaining - a);
    }
    current[pos] = 0;
}

/// Affine map from physical inputs to standard normal variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Standardization {
    pub fn from_marginals(marginals: &[Marginal]) -> Result<Self, PceError> {
        let mut means = Vec::with_capacity(marginals.len());
        let mut stds = Vec::with_capacity(marginals.len());
        for m in marginals {
            match *m {
                Marginal::Normal { mean, std } if std >= 0.0 => {
                    means.push(mean);
                    stds.push(std);
                }
                _ => return Err(PceError::Shape("PCE inputs must carry normal marginals".into())),
            }
        }
        Ok(Self { means, stds })
    }

    /// Dimensions with zero spread map to z = 0.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(&xi, (&m, &s))| if s > 0.0 { (xi - m) / s } else { 0.0 })
            .collect()
    }
}

/// Vandermonde-type matrix: entry (m, i) is basis function i at sample m.
pub fn basis_matrix(basis: &PceBasis, standardized: &SampleMatrix) -> Result<DMatrix<f64>, PceError> {
    if standardized.ncols() != basis.dims() {
        return Err(PceError::Shape(format!(
            "samples have {} columns, basis has {} inputs",
            standardized.ncols(),
            basis.dims()
        )));
    }
    let mut a = DMatrix::zeros(standardized.nrows(), basis.len());
    for (m, row) in standardized.rows().enumerate() {
        for (i, v) in basis.evaluate(row).into_iter().enumerate() {
            a[(m, i)] = v;
        }
    }
    Ok(a)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// `||A c - y|| / ||y||` per output (zero when both vanish).
    pub relative_rms: Vec<f64>,
    pub condition: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PceModel {
    pub basis: PceBasis,
    pub standardization: Standardization,
    /// `basis.len() x n_outputs`.
    pub coefficients: DMatrix<f64>,
    /// One label per output column; defaults to `y1`, `y2`, ...
    pub output_names: Vec<String>,
    pub report: FitReport,
}

/// Least-squares collocation fit through a QR factorization of the
/// column-equilibrated basis matrix.
///
/// Inputs whose standard deviation is zero carry no information; basis
/// functions that depend on them are held at zero.
pub fn fit_collocation(samples: &SampleMatrix, outputs: &DMatrix<f64>, basis: PceBasis) -> Result<PceModel, PceError> {
    if samples.ncols() != basis.dims() {
        return Err(PceError::Shape(format!(
            "samples have {} columns, basis has {} inputs",
            samples.ncols(),
            basis.dims()
        )));
    }
    if outputs.nrows() != samples.nrows() {
        return Err(PceError::Shape(format!(
            "{} output rows for {} samples",
            outputs.nrows(),
            samples.nrows()
        )));
    }
    if outputs.iter().any(|v| !v.is_finite()) {
        return Err(PceError::NonFinite("fit outputs"));
    }
    let standardization = Standardization::from_marginals(&samples.marginals)?;
    let frozen: Vec<bool> = standardization.stds.iter().map(|&s| s == 0.0).collect();
    let active: Vec<usize> = (0..basis.len())
        .filter(|&i| basis.indices()[i].0.iter().zip(&frozen).all(|(&a, &f)| a == 0 || !f))
        .collect();
    let m = samples.nrows();
    if m < active.len() {
        return Err(PceError::Underdetermined {
            samples: m,
            basis: active.len(),
        });
    }

    let mut a = DMatrix::zeros(m, active.len());
    for (r, row) in samples.rows().enumerate() {
        let values = basis.evaluate(&standardization.apply(row));
        for (c, &i) in active.iter().enumerate() {
            a[(r, c)] = values[i];
        }
    }
    let scales: Vec<f64> = (0..active.len()).map(|c| a.column(c).norm()).collect();
    if scales.iter().any(|&s| s == 0.0) {
        return Err(PceError::Conditioning {
            condition: f64::INFINITY,
        });
    }
    for (c, &s) in scales.iter().enumerate() {
        a.column_mut(c).scale_mut(1.0 / s);
    }
    let singular = a.clone().singular_values();
    let smax = singular.max();
    let smin = singular.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(PceError::Conditioning { condition });
    }

    let qr = a.clone().qr();
    let q = qr.q();
    let r = qr.r();
    let mut coefficients = DMatrix::zeros(basis.len(), outputs.ncols());
    let mut relative_rms = Vec::with_capacity(outputs.ncols());
    for k in 0..outputs.ncols() {
        let y: DVector<f64> = outputs.column(k).into_owned();
        let qty = q.tr_mul(&y);
        let scaled = r
            .solve_upper_triangular(&qty)
            .ok_or(PceError::Conditioning { condition })?;
        let residual = (&a * &scaled - &y).norm();
        let ynorm = y.norm();
        relative_rms.push(if ynorm > 0.0 { residual / ynorm } else { residual });
        for (c, &i) in active.iter().enumerate() {
            coefficients[(i, k)] = scaled[c] / scales[c];
        }
    }
    Ok(PceModel {
        basis,
        standardization,
        coefficients,
        output_names: (1..=outputs.ncols()).map(|k| format!("y{k}")).collect(),
        report: FitReport { relative_rms, condition },
    })
}

impl PceModel {
    pub fn dims(&self) -> usize {
        self.basis.dims()
    }

    pub fn n_outputs(&self) -> usize {
        self.coefficients.ncols()
    }

    /// Replaces the output labels; names must be free of whitespace.
    pub fn with_names(mut self, names: &[&str]) -> Result<Self, PceError> {
        if names.len() != self.n_outputs() || names.iter().any(|n| n.is_empty() || n.contains(char::is_whitespace)) {
            return Err(PceError::Shape("one whitespace-free name per output expected".into()));
        }
        self.output_names = names.iter().map(|n| n.to_string()).collect();
        Ok(self)
    }

    /// Surrogate outputs at a physical input vector.
    pub fn predict(&self, xi: &[f64]) -> Result<Vec<f64>, PceError> {
        if xi.len() != self.dims() {
            return Err(PceError::Shape(format!(
                "input has {} entries, model has {} inputs",
                xi.len(),
                self.dims()
            )));
        }
        let psi = DVector::from_vec(self.basis.evaluate(&self.standardization.apply(xi)));
        Ok(self.coefficients.tr_mul(&psi).iter().copied().collect())
    }

    /// Per-output (mean, variance).
    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let means = self.coefficients.row(0).iter().copied().collect();
        let vars = (0..self.n_outputs())
            .map(|k| self.coefficients.column(k).iter().skip(1).map(|c| c * c).sum())
            .collect();
        (means, vars)
    }

    /// Total Sobol index of input `j` for every output. Outputs whose variance is
    /// below `1e-24` of the squared coefficient norm are treated as constant.
    pub fn total_sobol(&self, j: usize) -> Result<Vec<f64>, PceError> {
        (0..self.n_outputs()).map(|k| self.total_sobol_output(j, k)).collect()
    }

    /// Total Sobol index of input `j` for output `k`.
    pub fn total_sobol_output(&self, j: usize, k: usize) -> Result<f64, PceError> {
        if j >= self.dims() || k >= self.n_outputs() {
            return Err(PceError::Shape(format!("input {j} or output {k} out of range")));
        }
        let mean = self.coefficients[(0, k)];
        let var: f64 = self.coefficients.column(k).iter().skip(1).map(|c| c * c).sum();
        // Round-off left by the fit does not count as variance.
        if !(var > ZERO_VARIANCE_RATIO * (var + mean * mean)) {
            return Err(PceError::UndefinedSensitivity { output: k });
        }
        let part: f64 = self
            .basis
            .indices()
            .iter()
            .enumerate()
            .filter(|(_, alpha)| alpha.0[j] > 0)
            .map(|(i, _)| self.coefficients[(i, k)].powi(2))
            .sum();
        Ok(part / var)
    }

    /// `r x r` predictions of output `k` over `mu +/- 3 sigma` in both
    /// inputs. Entry `(a, b)` sits at input 1 = `x1[a]`, input 2 = `x2[b]`.
    pub fn response_surface(&self, k: usize, r: usize) -> Result<ResponseSurface, PceError> {
        if self.dims() != 2 {
            return Err(PceError::Dimensionality(self.dims()));
        }
        if k >= self.n_outputs() || r < 2 {
            return Err(PceError::Shape("bad output index or resolution".into()));
        }
        let axis = |j: usize| -> Vec<f64> {
            let (m, s) = (self.standardization.means[j], self.standardization.stds[j]);
            (0..r)
                .map(|a| m - 3.0 * s + 6.0 * s * a as f64 / (r - 1) as f64)
                .collect()
        };
        let (x1, x2) = (axis(0), axis(1));
        let mut values = Plane::filled(r, r, 0.0);
        for (a, &u) in x1.iter().enumerate() {
            for (b, &v) in x2.iter().enumerate() {
                values.set(a, b, self.predict(&[u, v])?[k]);
            }
        }
        Ok(ResponseSurface { x1, x2, values })
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<(), PceError> {
        let mut s = String::new();
        s.push_str(&format!("{FORMAT_TAG} {FORMAT_VERSION}\n"));
        s.push_str(&format!(
            "dims {} order {} outputs {}\n",
            self.dims(),
            self.basis.order(),
            self.n_outputs()
        ));
        s.push_str(&format!("names {}\n", self.output_names.join(" ")));
        s.push_str(&format!("condition {}\n", fmt_real(self.report.condition)));
        s.push_str("relative_rms");
        for v in &self.report.relative_rms {
            s.push(' ');
            s.push_str(&fmt_real(*v));
        }
        s.push('\n');
        for (m, sd) in self.standardization.means.iter().zip(&self.standardization.stds) {
            s.push_str(&format!("input {} {}\n", fmt_real(*m), fmt_real(*sd)));
        }
        for (i, alpha) in self.basis.indices().iter().enumerate() {
            let idx: Vec<String> = alpha.0.iter().map(|a| a.to_string()).collect();
            s.push_str(&idx.join(" "));
            s.push_str(" :");
            for k in 0..self.n_outputs() {
                s.push(' ');
                s.push_str(&fmt_real(self.coefficients[(i, k)]));
            }
            s.push('\n');
        }
        out.write_all(s.as_bytes())?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self, PceError> {
        let lines: Vec<String> = BufReader::new(input).lines().collect::<Result<_, _>>()?;
        let err = |line: usize, msg: &str| PceError::Parse {
            line,
            msg: msg.to_string(),
        };
        let get = |i: usize| lines.get(i).map(String::as_str).ok_or_else(|| err(i + 1, "unexpected end of file"));
        if get(0)? != format!("{FORMAT_TAG} {FORMAT_VERSION}") {
            return Err(err(1, "unsupported model format or version"));
        }
        let head: Vec<&str> = get(1)?.split_whitespace().collect();
        let (dims, order, n_out) = match head.as_slice() {
            ["dims", d, "order", p, "outputs", k] => (
                d.parse::<usize>().map_err(|_| err(2, "bad dims"))?,
                p.parse::<usize>().map_err(|_| err(2, "bad order"))?,
                k.parse::<usize>().map_err(|_| err(2, "bad output count"))?,
            ),
            _ => return Err(err(2, "expected `dims D order P outputs K`")),
        };
        let real = |line: usize, s: &str| s.parse::<f64>().map_err(|_| err(line, "bad number"));
        let mut names = get(2)?.split_whitespace();
        if names.next() != Some("names") {
            return Err(err(3, "expected `names`"));
        }
        let output_names: Vec<String> = names.map(str::to_string).collect();
        if output_names.len() != n_out {
            return Err(err(3, "name count differs from output count"));
        }
        let condition = match get(3)?.split_once(' ') {
            Some(("condition", v)) => real(4, v)?,
            _ => return Err(err(4, "expected `condition`")),
        };
        let mut rr = get(4)?.split_whitespace();
        if rr.next() != Some("relative_rms") {
            return Err(err(5, "expected `relative_rms`"));
        }
        let relative_rms = rr.map(|v| real(5, v)).collect::<Result<Vec<_>, _>>()?;
        if relative_rms.len() != n_out {
            return Err(err(5, "residual count differs from output count"));
        }
        let mut means = Vec::new();
        let mut stds = Vec::new();
        for j in 0..dims {
            let parts: Vec<&str> = get(5 + j)?.split_whitespace().collect();
            match parts.as_slice() {
                ["input", m, s] => {
                    means.push(real(6 + j, m)?);
                    stds.push(real(6 + j, s)?);
                }
                _ => return Err(err(6 + j, "expected `input MEAN STD`")),
            }
        }
        let basis = PceBasis::new(dims, order)?;
        let mut coefficients = DMatrix::zeros(basis.len(), n_out);
        for i in 0..basis.len() {
            let line_no = 6 + dims + i;
            let (idx, coef) = get(line_no - 1)?
                .split_once(':')
                .ok_or_else(|| err(line_no, "expected `INDEX : COEFFICIENTS`"))?;
            let idx: Vec<usize> = idx
                .split_whitespace()
                .map(|a| a.parse().map_err(|_| err(line_no, "bad multi-index")))
                .collect::<Result<_, _>>()?;
            if idx != basis.indices()[i].0 {
                return Err(err(line_no, "multi-index out of graded-lexicographic order"));
            }
            let coef: Vec<f64> = coef.split_whitespace().map(|v| real(line_no, v)).collect::<Result<_, _>>()?;
            if coef.len() != n_out {
                return Err(err(line_no, "coefficient count differs from output count"));
            }
            for (k, c) in coef.into_iter().enumerate() {
                coefficients[(i, k)] = c;
            }
        }
        Ok(Self {
            basis,
            standardization: Standardization { means, stds },
            coefficients,
            output_names,
            report: FitReport { relative_rms, condition },
        })
    }
}

/// Predictions on a regular grid over the `mu +/- 3 sigma` rectangle.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseSurface {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub values: Plane,
}

impl ResponseSurface {
    /// CSV with header `x1,x2,value`, input 1 varying slowest.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut s = String::from("x1,x2,value\n");
        for (a, &u) in self.x1.iter().enumerate() {
            for (b, &v) in self.x2.iter().enumerate() {
                s.push_str(&format!("{},{},{}\n", fmt_real(u), fmt_real(v), fmt_real(self.values.get(a, b))));
            }
        }
        out.write_all(s.as_bytes())
    }
}
