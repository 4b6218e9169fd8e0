//! One-dimensional grid densities and discrepancy measures.
//!
//! A [`Grid1D`] is a set of `n` equal cells with centers `x0 + k·dx`. All
//! integrals are midpoint sums over cell centers.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::potentials::Potential;

/// Real number with 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_real(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "nan".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid1D {
    /// Center of the first cell.
    pub x0: f64,
    pub dx: f64,
    pub n: usize,
}

impl Grid1D {
    pub fn new(x0: f64, dx: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidParameter(format!("grid needs n >= 2, got {n}")));
        }
        if !(dx > 0.0) || !dx.is_finite() || !x0.is_finite() {
            return Err(Error::InvalidParameter(format!("invalid grid x0={x0}, dx={dx}")));
        }
        Ok(Self { x0, dx, n })
    }

    /// `n` cells tiling `[lo, hi]`.
    pub fn from_cells(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(hi > lo) || n == 0 {
            return Err(Error::InvalidParameter(format!("empty interval [{lo}, {hi}]")));
        }
        let dx = (hi - lo) / n as f64;
        Self::new(lo + 0.5 * dx, dx, n)
    }

    /// `n` cell centers spaced evenly from `lo` to `hi` inclusive.
    pub fn from_nodes(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(hi > lo) || n < 2 {
            return Err(Error::InvalidParameter(format!(
                "need lo < hi and n >= 2, got [{lo}, {hi}], n={n}"
            )));
        }
        Self::new(lo, (hi - lo) / (n - 1) as f64, n)
    }

    pub fn center(&self, k: usize) -> f64 {
        self.x0 + k as f64 * self.dx
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n).map(|k| self.center(k)).collect()
    }

    pub fn lo(&self) -> f64 {
        self.x0 - 0.5 * self.dx
    }

    pub fn hi(&self) -> f64 {
        self.x0 + (self.n as f64 - 0.5) * self.dx
    }

    /// Cell containing `x`; the upper edge belongs to the last cell.
    pub fn index_of(&self, x: f64) -> Option<usize> {
        let u = (x - self.lo()) / self.dx;
        if !(u >= 0.0) {
            return None;
        }
        let k = u.floor() as usize;
        if k < self.n {
            Some(k)
        } else if x <= self.hi() {
            Some(self.n - 1)
        } else {
            None
        }
    }

    pub fn same_as(&self, other: &Grid1D) -> bool {
        let tol = 1e-9 * self.dx;
        self.n == other.n && (self.x0 - other.x0).abs() <= tol && (self.dx - other.dx).abs() <= tol
    }

    fn check_same(&self, other: &Grid1D) -> Result<()> {
        if self.same_as(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!("{self:?} vs {other:?}")))
        }
    }
}

/// Nonnegative density values (per unit length) on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridDensity {
    pub grid: Grid1D,
    pub values: Vec<f64>,
    /// Log of the mass divided out by [`normalize`]; 0 otherwise.
    pub log_normalizer: f64,
}

impl GridDensity {
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.dx
    }

    pub fn mean(&self) -> f64 {
        self.grid
            .centers()
            .iter()
            .zip(&self.values)
            .map(|(x, v)| x * v)
            .sum::<f64>()
            * self.grid.dx
            / self.mass()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.grid
            .centers()
            .iter()
            .zip(&self.values)
            .map(|(x, v)| (x - m) * (x - m) * v)
            .sum::<f64>()
            * self.grid.dx
            / self.mass()
    }

    /// Merges groups of `factor` neighbouring cells; the cell count must be
    /// divisible by `factor`.
    pub fn coarsen(&self, factor: usize) -> Result<GridDensity> {
        if factor == 0 || !self.grid.n.is_multiple_of(factor) || self.grid.n / factor < 2 {
            return Err(Error::InvalidParameter(format!(
                "cannot coarsen {} cells by {factor}",
                self.grid.n
            )));
        }
        let g = &self.grid;
        let dx = g.dx * factor as f64;
        let grid = Grid1D::new(g.lo() + 0.5 * dx, dx, g.n / factor)?;
        let values = self
            .values
            .chunks(factor)
            .map(|c| c.iter().sum::<f64>() / factor as f64)
            .collect();
        Ok(GridDensity {
            grid,
            values,
            log_normalizer: self.log_normalizer,
        })
    }

    /// Writes `x,value` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "x,value")?;
        for (x, v) in self.grid.centers().iter().zip(&self.values) {
            writeln!(w, "{},{}", fmt_real(*x), fmt_real(*v))?;
        }
        Ok(())
    }

    /// Reads `x,value` rows written by [`GridDensity::write_csv`]. The grid is
    /// recovered from the first and last centers.
    pub fn read_csv<R: BufRead>(r: R) -> Result<GridDensity> {
        let mut xs = Vec::new();
        let mut values = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || (lineno == 0 && line.starts_with(|c: char| c.is_ascii_alphabetic())) {
                continue;
            }
            let mut fields = line.split(',');
            let parse = |f: Option<&str>| -> Result<f64> {
                f.and_then(|s| s.trim().parse().ok()).ok_or_else(|| {
                    Error::InvalidParameter(format!("line {}: expected `x,value`", lineno + 1))
                })
            };
            xs.push(parse(fields.next())?);
            values.push(parse(fields.next())?);
        }
        if xs.len() < 2 {
            return Err(Error::Empty("density file"));
        }
        let n = xs.len();
        let grid = Grid1D::from_nodes(xs[0], xs[n - 1], n)?;
        for (k, x) in xs.iter().enumerate() {
            if (x - grid.center(k)).abs() > 1e-6 * grid.dx {
                return Err(Error::GridMismatch(format!("row {} is not on a uniform grid", k + 1)));
            }
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Domain("density values must be finite and nonnegative".into()));
        }
        Ok(GridDensity {
            grid,
            values,
            log_normalizer: 0.0,
        })
    }
}

/// Divides `u` by its midpoint mass and records the log of that mass.
pub fn normalize(u: &[f64], grid: Grid1D) -> Result<GridDensity> {
    if u.len() != grid.n {
        return Err(Error::DimensionMismatch {
            expected: grid.n,
            got: u.len(),
        });
    }
    if u.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Domain("values must be finite and nonnegative".into()));
    }
    let mass = u.iter().sum::<f64>() * grid.dx;
    if !(mass > 0.0) {
        return Err(Error::Domain("zero total mass".into()));
    }
    Ok(GridDensity {
        grid,
        values: u.iter().map(|v| v / mass).collect(),
        log_normalizer: mass.ln(),
    })
}

/// Normalizes `exp(log_u)` without overflow.
pub fn from_log_values(log_u: &[f64], grid: Grid1D) -> Result<GridDensity> {
    let m = log_u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::Domain("log values have no finite maximum".into()));
    }
    let u: Vec<f64> = log_u.iter().map(|l| (l - m).exp()).collect();
    let mut d = normalize(&u, grid)?;
    d.log_normalizer += m;
    Ok(d)
}

/// The Gibbs density `exp(-V)` normalized on `grid`.
pub fn target_density(p: &Potential, grid: Grid1D) -> Result<GridDensity> {
    if p.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: p.dim(),
        });
    }
    let log_u: Vec<f64> = grid.centers().iter().map(|x| -p.eval(&[*x])).collect();
    from_log_values(&log_u, grid)
}

/// Normalized histogram together with the number of samples outside the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub density: GridDensity,
    pub out_of_range: usize,
}

/// Bin counts divided by `(N_in · dx)`; samples outside the grid are counted
/// in `out_of_range` and excluded from the mass.
pub fn histogram(samples: &[f64], grid: Grid1D) -> Result<Histogram> {
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    let mut counts = vec![0u64; grid.n];
    let mut out = 0;
    for &x in samples {
        match grid.index_of(x) {
            Some(k) => counts[k] += 1,
            None => out += 1,
        }
    }
    let inside = samples.len() - out;
    if inside == 0 {
        return Err(Error::Empty("samples inside the grid"));
    }
    let scale = 1.0 / (inside as f64 * grid.dx);
    Ok(Histogram {
        density: GridDensity {
            grid,
            values: counts.iter().map(|c| *c as f64 * scale).collect(),
            log_normalizer: 0.0,
        },
        out_of_range: out,
    })
}

/// Gaussian kernel density estimate `N⁻¹ Σ φ_h(x - θⱼ)` at `points`.
pub fn kde(samples: &[f64], bandwidth: f64, points: &[f64]) -> Result<Vec<f64>> {
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::InvalidParameter(format!("bandwidth must be positive, got {bandwidth}")));
    }
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    let norm = 1.0 / (samples.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let c = 0.5 / (bandwidth * bandwidth);
    Ok(points
        .iter()
        .map(|x| samples.iter().map(|s| (-(x - s) * (x - s) * c).exp()).sum::<f64>() * norm)
        .collect())
}

/// Smallest bandwidth returned for degenerate samples.
pub const MIN_BANDWIDTH: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SilvermanBandwidth {
    pub value: f64,
    /// Sample standard deviation (divisor `N - 1`).
    pub std: f64,
    /// Set when the samples have no spread and `value` is the floor.
    pub degenerate: bool,
}

/// `1.06 · std · N^(-1/5)`.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<SilvermanBandwidth> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "bandwidth selection needs at least 2 samples, got {n}"
        )));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    let h = 1.06 * std * (n as f64).powf(-0.2);
    if h > MIN_BANDWIDTH && h.is_finite() {
        Ok(SilvermanBandwidth {
            value: h,
            std,
            degenerate: false,
        })
    } else {
        Ok(SilvermanBandwidth {
            value: MIN_BANDWIDTH,
            std,
            degenerate: true,
        })
    }
}

/// `Σ ρ log(ρ/π) dx`; `+∞` if `ρ > 0` on a cell where `π = 0`.
pub fn kl_divergence(rho: &GridDensity, pi: &GridDensity) -> Result<f64> {
    rho.grid.check_same(&pi.grid)?;
    let mut s = 0.0;
    for (r, p) in rho.values.iter().zip(&pi.values) {
        if *r > 0.0 {
            if *p <= 0.0 {
                return Ok(f64::INFINITY);
            }
            s += r * (r / p).ln();
        }
    }
    // Rounding can leave a tiny negative sum when ρ ≈ π.
    Ok((s * rho.grid.dx).max(0.0))
}

/// `½ Σ |ρ - π| dx`.
pub fn tv_distance(rho: &GridDensity, pi: &GridDensity) -> Result<f64> {
    rho.grid.check_same(&pi.grid)?;
    Ok(0.5 * rho.values.iter().zip(&pi.values).map(|(a, b)| (a - b).abs()).sum::<f64>() * rho.grid.dx)
}

/// `√(Σ (ρ - π)²/π dx)`.
pub fn l2_pi_inv_norm(rho: &GridDensity, pi: &GridDensity) -> Result<f64> {
    rho.grid.check_same(&pi.grid)?;
    if let Some(k) = pi.values.iter().position(|p| !(*p > 1e-300)) {
        return Err(Error::Domain(format!("target vanishes at cell {k}")));
    }
    let s: f64 = rho
        .values
        .iter()
        .zip(&pi.values)
        .map(|(r, p)| (r - p) * (r - p) / p)
        .sum();
    Ok((s * rho.grid.dx).sqrt())
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Quadratic Wasserstein distance between two empirical measures on ℝ. With
/// unequal sizes both are evaluated at the quantile levels `(k + ½)/m`,
/// `m = max(|a|, |b|)`.
pub fn wasserstein1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("samples"));
    }
    let (sa, sb) = (sorted(a), sorted(b));
    let m = sa.len().max(sb.len());
    let quantile = |s: &[f64], k: usize| s[((k as f64 + 0.5) / m as f64 * s.len() as f64) as usize];
    let sum: f64 = (0..m)
        .map(|k| {
            let d = quantile(&sa, k) - quantile(&sb, k);
            d * d
        })
        .sum();
    Ok((sum / m as f64).sqrt())
}

/// Inverse CDF of a grid density that is uniform inside each cell.
fn grid_quantiles(d: &GridDensity, levels: &[f64]) -> Vec<f64> {
    let g = &d.grid;
    let mass = d.mass();
    let mut out = Vec::with_capacity(levels.len());
    let mut k = 0;
    let mut below = 0.0;
    for &q in levels {
        let target = q * mass;
        while k + 1 < g.n && below + d.values[k] * g.dx < target {
            below += d.values[k] * g.dx;
            k += 1;
        }
        let cell = d.values[k] * g.dx;
        let frac = if cell > 0.0 { ((target - below) / cell).clamp(0.0, 1.0) } else { 0.5 };
        out.push(g.lo() + (k as f64 + frac) * g.dx);
    }
    out
}

/// Quadratic Wasserstein distance between two grid densities, by midpoint
/// quadrature of the quantile functions on `8n` levels.
pub fn wasserstein_grid(a: &GridDensity, b: &GridDensity) -> Result<f64> {
    let m = 8 * a.grid.n.max(b.grid.n);
    if !(a.mass() > 0.0 && b.mass() > 0.0) {
        return Err(Error::Domain("zero total mass".into()));
    }
    let levels: Vec<f64> = (0..m).map(|k| (k as f64 + 0.5) / m as f64).collect();
    let qa = grid_quantiles(a, &levels);
    let qb = grid_quantiles(b, &levels);
    let s: f64 = qa.iter().zip(&qb).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((s / m as f64).sqrt())
}

/// Sample mean and unbiased covariance of row-major `dim`-vectors.
pub fn moments(data: &[f64], dim: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(Error::InvalidParameter(format!(
            "{} values do not form rows of length {dim}",
            data.len()
        )));
    }
    let n = data.len() / dim;
    if n < 2 {
        return Err(Error::InvalidParameter(format!("moments need at least 2 samples, got {n}")));
    }
    let mut mean = DVector::zeros(dim);
    for row in data.chunks(dim) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for row in data.chunks(dim) {
        let d = DVector::from_iterator(dim, row.iter().zip(mean.iter()).map(|(x, m)| x - m));
        cov += &d * d.transpose();
    }
    cov /= (n - 1) as f64;
    Ok((mean, cov))
}
