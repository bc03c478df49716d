//! Sample generation: Latin hypercube designs, the inverse normal CDF,
//! probabilists' Gauss–Hermite rules and tensor-product collocation grids.
//!
//! Random draws come from a counter-based generator: the `c`-th draw of
//! stream `s` under seed `k` is a pure function of `(k, s, c)`. Every
//! dimension of a design uses its own streams, so designs are reproducible
//! from the seed alone and do not depend on evaluation order.

use std::f64::consts::{PI, SQRT_2};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};

use statrs::function::erf::erfc;
use thiserror::Error;

use crate::grid::fmt_real;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("probability {0} outside (0, 1)")]
    Domain(f64),
    #[error("quadrature level {0} outside 1..=64")]
    Level(usize),
    #[error("tensor grid with {rows} rows exceeds the {limit} row limit")]
    TooLarge { rows: f64, limit: usize },
    #[error("invalid sampling request: {0}")]
    Invalid(String),
    #[error("sample file, line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const MAX_TENSOR_ROWS: usize = 1_000_000;
pub const MAX_TENSOR_DIMS: usize = 4;
pub const MAX_LEVEL: usize = 64;

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// Counter-based 64-bit generator; one instance per (seed, stream).
#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self {
            key: splitmix(seed ^ splitmix(stream.wrapping_add(GOLDEN))),
            counter: 0,
        }
    }

    /// Draw number `counter` of this stream, without advancing.
    #[inline]
    pub fn at(&self, counter: u64) -> u64 {
        splitmix(self.key.wrapping_add(counter.wrapping_mul(GOLDEN)))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let v = self.at(self.counter);
        self.counter += 1;
        v
    }

    /// Uniform in the open interval (0, 1).
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..bound` (Lemire's multiply-shift with rejection).
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0);
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let m = (self.next_u64() as u128) * (bound as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    /// Standard normal draw via the inverse CDF.
    pub fn next_normal(&mut self) -> f64 {
        normal_inverse_cdf(self.next_f64()).expect("open-interval uniform")
    }
}

/// Marginal distribution of one column of a [`SampleMatrix`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Marginal {
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, std: f64 },
}

impl Marginal {
    fn describe(&self) -> String {
        match self {
            Marginal::Uniform { low, high } => format!("uniform({},{})", fmt_real(*low), fmt_real(*high)),
            Marginal::Normal { mean, std } => format!("normal({},{})", fmt_real(*mean), fmt_real(*std)),
        }
    }

    fn parse(s: &str) -> Option<Self> {
        if let Some(inner) = s.strip_prefix("uniform(").and_then(|r| r.strip_suffix(')')) {
            let (lo, hi) = inner.split_once(',')?;
            return Some(Marginal::Uniform {
                low: lo.parse().ok()?,
                high: hi.parse().ok()?,
            });
        }
        let inner = s.strip_prefix("normal(")?.strip_suffix(')')?;
        let (m, sd) = inner.split_once(',')?;
        Some(Marginal::Normal {
            mean: m.parse().ok()?,
            std: sd.parse().ok()?,
        })
    }

    /// Maps a uniform draw in (0, 1) to this marginal.
    pub fn transform(&self, u: f64) -> Result<f64, SamplingError> {
        match *self {
            Marginal::Uniform { low, high } => Ok(low + (high - low) * u),
            Marginal::Normal { mean, std } => Ok(mean + std * normal_inverse_cdf(u)?),
        }
    }
}

/// Samples in rows, stochastic dimensions in columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    pub marginals: Vec<Marginal>,
    pub seed: u64,
}

impl SampleMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>, marginals: Vec<Marginal>, seed: u64) -> Result<Self, SamplingError> {
        let cols = marginals.len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(SamplingError::Invalid("row length differs from marginal count".into()));
        }
        let n = rows.len();
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(SamplingError::Invalid("non-finite sample value".into()));
        }
        Ok(Self {
            rows: n,
            cols,
            data,
            marginals,
            seed,
        })
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1))
    }

    /// Maps uniform columns to normal marginals through the inverse CDF.
    pub fn to_normal(&self, means: &[f64], stds: &[f64]) -> Result<Self, SamplingError> {
        if means.len() != self.cols || stds.len() != self.cols {
            return Err(SamplingError::Invalid("means/stds length differs from dimension".into()));
        }
        let marginals: Vec<Marginal> = means
            .iter()
            .zip(stds)
            .map(|(&mean, &std)| Marginal::Normal { mean, std })
            .collect();
        self.transform(&marginals)
    }

    /// Maps columns of uniform (0, 1) draws through the given marginals.
    pub fn transform(&self, marginals: &[Marginal]) -> Result<Self, SamplingError> {
        if marginals.len() != self.cols {
            return Err(SamplingError::Invalid("marginal count differs from dimension".into()));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[r * self.cols + c] = marginals[c].transform(self.get(r, c))?;
            }
        }
        out.marginals = marginals.to_vec();
        Ok(out)
    }

    /// Writes `# seed=..., marginals=...`, the header
    /// `sample_id,xi_1,...,xi_d`, then one row per sample.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), SamplingError> {
        let mut buf = String::new();
        let marg: Vec<String> = self.marginals.iter().map(Marginal::describe).collect();
        writeln!(buf, "# seed={} marginals={}", self.seed, marg.join(";")).unwrap();
        buf.push_str("sample_id");
        for c in 0..self.cols {
            write!(buf, ",xi_{}", c + 1).unwrap();
        }
        buf.push('\n');
        for r in 0..self.rows {
            buf.push_str(&r.to_string());
            for c in 0..self.cols {
                buf.push(',');
                buf.push_str(&fmt_real(self.get(r, c)));
            }
            buf.push('\n');
        }
        out.write_all(buf.as_bytes())?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, SamplingError> {
        let mut lines = BufReader::new(input).lines();
        let meta = lines.next().transpose()?.unwrap_or_default();
        let parse_err = |line: usize, msg: &str| SamplingError::Parse {
            line,
            msg: msg.to_string(),
        };
        let meta = meta
            .strip_prefix("# seed=")
            .ok_or_else(|| parse_err(1, "missing `# seed=` metadata line"))?;
        let (seed, marg) = meta
            .split_once(" marginals=")
            .ok_or_else(|| parse_err(1, "missing marginals"))?;
        let seed: u64 = seed.trim().parse().map_err(|_| parse_err(1, "bad seed"))?;
        let marginals: Vec<Marginal> = if marg.trim().is_empty() {
            Vec::new()
        } else {
            marg.trim()
                .split(';')
                .map(|m| Marginal::parse(m).ok_or_else(|| parse_err(1, "bad marginal")))
                .collect::<Result<_, _>>()?
        };
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.split(',').count() != marginals.len() + 1 || !header.starts_with("sample_id") {
            return Err(parse_err(2, "header does not match marginals"));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut cols = line.split(',');
            let id: usize = cols
                .next()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| parse_err(i + 3, "bad sample id"))?;
            if id != rows.len() {
                return Err(parse_err(i + 3, "sample ids must be dense and ordered"));
            }
            let row: Vec<f64> = cols
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| parse_err(i + 3, "bad value"))?;
            rows.push(row);
        }
        Self::from_rows(rows, marginals, seed)
    }
}

/// Latin hypercube design on (0,1)^d: in every column each stratum
/// `(i/n, (i+1)/n)` holds exactly one sample.
pub fn latin_hypercube(n_samples: usize, dims: usize, seed: u64) -> Result<SampleMatrix, SamplingError> {
    if n_samples == 0 || dims == 0 {
        return Err(SamplingError::Invalid("need at least one sample and one dimension".into()));
    }
    let mut data = vec![0.0; n_samples * dims];
    let inv_n = 1.0 / n_samples as f64;
    for c in 0..dims {
        let mut perm_rng = CounterRng::new(seed, 2 * c as u64);
        let mut jitter_rng = CounterRng::new(seed, 2 * c as u64 + 1);
        let mut strata: Vec<usize> = (0..n_samples).collect();
        for i in (1..n_samples).rev() {
            let j = perm_rng.below(i as u64 + 1) as usize;
            strata.swap(i, j);
        }
        for (r, &s) in strata.iter().enumerate() {
            data[r * dims + c] = (s as f64 + jitter_rng.next_f64()) * inv_n;
        }
    }
    Ok(SampleMatrix {
        rows: n_samples,
        cols: dims,
        data,
        marginals: vec![Marginal::Uniform { low: 0.0, high: 1.0 }; dims],
        seed,
    })
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Inverse of the standard normal CDF: a rational approximation refined by
/// one Newton step against the erfc-based CDF.
pub fn normal_inverse_cdf(p: f64) -> Result<f64, SamplingError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(SamplingError::Domain(p));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    // Work in the lower tail and mirror, so q stays accurate near 1.
    let q = p.min(1.0 - p);
    let x = acklam_lower(q);
    let x = x - (normal_cdf(x) - q) / normal_pdf(x);
    Ok(if p < 0.5 { x } else { -x })
}

/// Acklam's rational approximation of the lower-tail quantile for
/// `q <= 0.5`; relative error about 1e-9.
fn acklam_lower(q: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.02425;
    if q < P_LOW {
        let t = (-2.0 * q.ln()).sqrt();
        (((((C[0] * t + C[1]) * t + C[2]) * t + C[3]) * t + C[4]) * t + C[5])
            / ((((D[0] * t + D[1]) * t + D[2]) * t + D[3]) * t + 1.0)
    } else {
        let t = q - 0.5;
        let r = t * t;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * t
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// Probabilists' Hermite polynomial `He_n(x)` by the three-term recurrence.
pub fn hermite_he(n: usize, x: f64) -> f64 {
    let (mut prev, mut cur) = (0.0, 1.0);
    for k in 0..n {
        let next = x * cur - k as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// One-dimensional Gauss rule for the standard normal weight.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule1D {
    pub level: usize,
    /// Ascending roots of `He_level`.
    pub nodes: Vec<f64>,
    /// Positive weights summing to one.
    pub weights: Vec<f64>,
}

impl QuadratureRule1D {
    /// Expectation of `f` under the standard normal, as approximated by the rule.
    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// Gauss–Hermite rule with `level` nodes for the standard normal density.
///
/// Roots are found by Newton iteration on the orthonormal physicists'
/// recurrence with the usual asymptotic starting guesses, then rescaled by
/// `sqrt(2)`; weights are normalised to sum to one.
pub fn gauss_hermite(level: usize) -> Result<QuadratureRule1D, SamplingError> {
    if level == 0 || level > MAX_LEVEL {
        return Err(SamplingError::Level(level));
    }
    let n = level;
    let nf = n as f64;
    let pim4 = PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut z = 0.0_f64;
    for i in 0..(n + 1) / 2 {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (pim4, 0.0);
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    let total: f64 = w.iter().sum();
    let mut pairs: Vec<(f64, f64)> = x
        .into_iter()
        .zip(w)
        .map(|(xi, wi)| (xi * SQRT_2, wi / total))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nodes, weights) = pairs.into_iter().unzip();
    Ok(QuadratureRule1D {
        level,
        nodes,
        weights,
    })
}

/// Tensor product of `level`-point Gauss–Hermite nodes in `dims` dimensions,
/// scaled to `mean + sigma * node`. Rows are in lexicographic order with
/// the last dimension varying fastest.
pub fn tensor_grid(level: usize, dims: usize, means: &[f64], sigmas: &[f64]) -> Result<SampleMatrix, SamplingError> {
    if dims == 0 || dims > MAX_TENSOR_DIMS {
        return Err(SamplingError::Invalid(format!(
            "tensor grids support 1..={MAX_TENSOR_DIMS} dimensions, got {dims}"
        )));
    }
    if means.len() != dims || sigmas.len() != dims {
        return Err(SamplingError::Invalid("means/sigmas length differs from dims".into()));
    }
    let rows_f = (level as f64).powi(dims as i32);
    if rows_f > MAX_TENSOR_ROWS as f64 {
        return Err(SamplingError::TooLarge {
            rows: rows_f,
            limit: MAX_TENSOR_ROWS,
        });
    }
    let rule = gauss_hermite(level)?;
    let rows = level.pow(dims as u32);
    let mut data = Vec::with_capacity(rows * dims);
    for r in 0..rows {
        let mut rem = r;
        let mut digits = vec![0; dims];
        for d in (0..dims).rev() {
            digits[d] = rem % level;
            rem /= level;
        }
        for d in 0..dims {
            data.push(means[d] + sigmas[d] * rule.nodes[digits[d]]);
        }
    }
    Ok(SampleMatrix {
        rows,
        cols: dims,
        data,
        marginals: means
            .iter()
            .zip(sigmas)
            .map(|(&mean, &std)| Marginal::Normal { mean, std })
            .collect(),
        seed: 0,
    })
}

/// Tensor-grid weights matching the row order of [`tensor_grid`].
pub fn tensor_weights(level: usize, dims: usize) -> Result<Vec<f64>, SamplingError> {
    let rule = gauss_hermite(level)?;
    let rows = level.pow(dims as u32);
    Ok((0..rows)
        .map(|r| {
            let mut rem = r;
            let mut w = 1.0;
            for _ in 0..dims {
                w *= rule.weights[rem % level];
                rem /= level;
            }
            w
        })
        .collect())
}
