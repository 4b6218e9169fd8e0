//! Finite-volume solver for the one-dimensional Fokker-Planck equation
//! `∂ρ = ∂ₓ(ρ ∂ₓV + ∂ₓρ)` and its covariance-weighted and birth-death
//! variants.
//!
//! Face fluxes use Scharfetter-Gummel (Chang-Cooper) exponential fitting:
//!
//! ```text
//! J_f = (B(ΔV_f) ρ_f − B(−ΔV_f) ρ_{f+1}) / dx,   B(w) = w / (eᵂ − 1)
//! ```
//!
//! which vanishes exactly on the discrete Gibbs state `ρᵢ ∝ exp(−Vᵢ)`. The
//! outer faces carry no flux. Time stepping is explicit Euler.

use std::io::Write;

use crate::density::{fmt_real, kl_divergence, l2_pi_inv_norm, normalize, GridDensity, Grid1D};
use crate::error::{Error, Result};
use crate::potentials::Potential;
use crate::sample::Mobility;

/// Smallest density whose logarithm enters the birth-death reaction.
pub const LOG_FLOOR: f64 = 1e-300;

/// Variance below which the weighted variant reports a collapsed density.
pub const MIN_VARIANCE: f64 = 1e-12;

fn bernoulli(w: f64) -> f64 {
    if w.abs() < 1e-8 {
        1.0 - 0.5 * w
    } else {
        w / w.exp_m1()
    }
}

/// Which Fokker-Planck equation to integrate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FpeVariant {
    #[default]
    Standard,
    /// Mobility `var(ρ)` or `1/var(ρ)`, recomputed every step.
    Weighted(Mobility),
    /// Standard transport split with the birth-death reaction.
    BirthDeath,
}

#[derive(Clone, Debug)]
pub struct FpeState {
    pub density: GridDensity,
    pub time: f64,
    pub potential: Potential,
    /// Total mass after every step.
    pub mass_log: Vec<f64>,
    energies: Vec<f64>,
    b_fwd: Vec<f64>,
    b_bwd: Vec<f64>,
    max_dv: f64,
    flux: Vec<f64>,
}

impl FpeState {
    pub fn new(potential: Potential, density: GridDensity) -> Result<Self> {
        if potential.dim() != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: potential.dim(),
            });
        }
        let grid = density.grid;
        let energies: Vec<f64> = grid.centers().iter().map(|x| potential.eval(&[*x])).collect();
        if let Some(k) = energies.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "potential is not finite at grid cell {k} (x = {})",
                grid.center(k)
            )));
        }
        let dv: Vec<f64> = energies.windows(2).map(|w| w[1] - w[0]).collect();
        let max_dv = dv.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        Ok(Self {
            b_fwd: dv.iter().map(|d| bernoulli(*d)).collect(),
            b_bwd: dv.iter().map(|d| bernoulli(-d)).collect(),
            flux: vec![0.0; grid.n - 1],
            max_dv,
            energies,
            mass_log: Vec::new(),
            time: 0.0,
            density,
            potential,
        })
    }

    pub fn grid(&self) -> Grid1D {
        self.density.grid
    }

    /// Largest stable time step at mobility `m`:
    /// `dx² / (2m(1 + max|ΔV|))`, which keeps the update matrix nonnegative.
    pub fn max_stable_dt_at(&self, m: f64) -> f64 {
        let dx = self.grid().dx;
        dx * dx / (2.0 * m * (1.0 + self.max_dv))
    }

    pub fn max_stable_dt(&self) -> f64 {
        self.max_stable_dt_at(1.0)
    }

    /// Mobility the given variant would use in the next step.
    pub fn mobility(&self, variant: FpeVariant) -> Result<f64> {
        match variant {
            FpeVariant::Standard | FpeVariant::BirthDeath => Ok(1.0),
            FpeVariant::Weighted(mob) => {
                let var = self.density.variance();
                if !(var >= MIN_VARIANCE) {
                    return Err(Error::Collapsed(var));
                }
                Ok(match mob {
                    Mobility::Covariance => var,
                    Mobility::InverseCovariance => 1.0 / var,
                })
            }
        }
    }

    fn transport(&mut self, dt: f64, m: f64) -> Result<()> {
        let max_dt = self.max_stable_dt_at(m);
        if !(dt > 0.0) || dt > max_dt * (1.0 + 1e-12) {
            return Err(Error::Unstable { dt, max_dt });
        }
        let dx = self.grid().dx;
        let rho = &mut self.density.values;
        let c = m / dx;
        for f in 0..self.flux.len() {
            self.flux[f] = c * (self.b_fwd[f] * rho[f] - self.b_bwd[f] * rho[f + 1]);
        }
        let r = dt / dx;
        let last = rho.len() - 1;
        rho[0] -= r * self.flux[0];
        for i in 1..last {
            rho[i] += r * (self.flux[i - 1] - self.flux[i]);
        }
        rho[last] += r * self.flux[last - 1];
        Ok(())
    }

    /// `ρ ← ρ(1 + h(g − ⟨g⟩_ρ))` with `g = −V − log ρ`, clamped at zero.
    fn react(&mut self, h: f64) {
        let rho = &mut self.density.values;
        let g: Vec<f64> = rho
            .iter()
            .zip(&self.energies)
            .map(|(r, v)| if *r > LOG_FLOOR { -v - r.ln() } else { 0.0 })
            .collect();
        let (mut num, mut den) = (0.0, 0.0);
        for (r, gi) in rho.iter().zip(&g) {
            if *r > LOG_FLOOR {
                num += r * gi;
                den += r;
            }
        }
        let mean = num / den;
        for (r, gi) in rho.iter_mut().zip(&g) {
            if *r > LOG_FLOOR {
                *r = (*r * (1.0 + h * (gi - mean))).max(0.0);
            }
        }
    }

    fn renormalize(&mut self) -> Result<()> {
        let mass = self.density.mass();
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(Error::Domain(format!("total mass became {mass}")));
        }
        self.density.values.iter_mut().for_each(|v| *v /= mass);
        Ok(())
    }

    fn finish(&mut self, dt: f64) {
        self.time += dt;
        self.mass_log.push(self.density.mass());
    }

    /// Advances by `dt` under the given variant.
    pub fn advance(&mut self, variant: FpeVariant, dt: f64) -> Result<()> {
        match variant {
            FpeVariant::Standard => self.transport(dt, 1.0)?,
            FpeVariant::Weighted(_) => {
                let m = self.mobility(variant)?;
                self.transport(dt, m)?;
            }
            FpeVariant::BirthDeath => {
                let v_min = self.energies.iter().cloned().fold(f64::INFINITY, f64::min);
                if let Some(k) = self.energies.iter().position(|v| (v_min - v).exp() == 0.0) {
                    return Err(Error::Domain(format!("target vanishes at grid cell {k}")));
                }
                let max_dt = self.max_stable_dt();
                if !(dt > 0.0) || dt > max_dt * (1.0 + 1e-12) {
                    return Err(Error::Unstable { dt, max_dt });
                }
                self.react(0.5 * dt);
                self.transport(dt, 1.0)?;
                self.react(0.5 * dt);
                self.renormalize()?;
            }
        }
        self.finish(dt);
        Ok(())
    }

    /// Mass in the two outermost cells, a monitor for domain truncation.
    pub fn boundary_mass(&self) -> f64 {
        let v = &self.density.values;
        (v[0] + v[v.len() - 1]) * self.grid().dx
    }

    /// Integrates to each of `times` (nondecreasing, ≥ current time) with
    /// steps no longer than `dt_max`, shortened so that every output time is
    /// hit exactly. Returns the density at each output time.
    pub fn evolve(&mut self, variant: FpeVariant, times: &[f64], dt_max: f64) -> Result<Vec<GridDensity>> {
        if !(dt_max > 0.0) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt_max}")));
        }
        let mut out = Vec::with_capacity(times.len());
        for &t in times {
            let gap = t - self.time;
            if gap < -1e-12 * t.abs().max(1.0) {
                return Err(Error::InvalidParameter(format!(
                    "output time {t} precedes current time {}",
                    self.time
                )));
            }
            if gap > 0.0 {
                let steps = (gap / dt_max).ceil().max(1.0) as u64;
                let dt = gap / steps as f64;
                let start = self.time;
                for k in 0..steps {
                    self.advance(variant, dt)?;
                    // Avoid drift from repeated addition.
                    self.time = start + (k + 1) as f64 * dt;
                }
                self.time = t;
            }
            out.push(self.density.clone());
        }
        Ok(out)
    }
}

/// One explicit step of the standard equation.
pub fn fpe_step(s: &FpeState, dt: f64) -> Result<FpeState> {
    let mut next = s.clone();
    next.advance(FpeVariant::Standard, dt)?;
    Ok(next)
}

/// One explicit step with mobility from the current variance of `ρ`.
pub fn weighted_fpe_step(s: &FpeState, dt: f64, mobility: Mobility) -> Result<FpeState> {
    let mut next = s.clone();
    next.advance(FpeVariant::Weighted(mobility), dt)?;
    Ok(next)
}

/// Strang splitting: reaction half step, transport step, reaction half step,
/// then renormalization.
pub fn bdl_fpe_step(s: &FpeState, dt: f64) -> Result<FpeState> {
    let mut next = s.clone();
    next.advance(FpeVariant::BirthDeath, dt)?;
    Ok(next)
}

/// Gaussian `N(mean, var)` sampled at the cell centers and normalized.
pub fn gaussian_on_grid(grid: Grid1D, mean: f64, var: f64) -> Result<GridDensity> {
    if !(var > 0.0) {
        return Err(Error::InvalidParameter(format!("variance must be positive, got {var}")));
    }
    let u: Vec<f64> = grid
        .centers()
        .iter()
        .map(|x| (-(x - mean) * (x - mean) / (2.0 * var)).exp())
        .collect();
    normalize(&u, grid)
}

/// Equal-weight point masses, each split linearly between the two nearest
/// cell centers so that its mean position is preserved.
pub fn point_masses(grid: Grid1D, points: &[f64]) -> Result<GridDensity> {
    if points.is_empty() {
        return Err(Error::Empty("points"));
    }
    let mut u = vec![0.0; grid.n];
    for &x in points {
        let s = (x - grid.x0) / grid.dx;
        if !(s >= 0.0 && s <= (grid.n - 1) as f64) {
            return Err(Error::Domain(format!("point {x} lies outside the grid centers")));
        }
        let k = (s.floor() as usize).min(grid.n - 2);
        let frac = s - k as f64;
        u[k] += 1.0 - frac;
        u[k + 1] += frac;
    }
    normalize(&u, grid)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecayRow {
    pub time: f64,
    pub l2_pi_inv: f64,
    pub kl: f64,
    /// `e^{−αt} ‖ρ₀ − π‖`; NaN when no α applies.
    pub envelope_l2: f64,
    /// `e^{−2αt} KL(ρ₀‖π)`; NaN when no α applies.
    pub envelope_kl: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecayReport {
    pub rows: Vec<DecayRow>,
    /// False when no positive convexity constant was supplied.
    pub applicable: bool,
    /// Set when `ρ₀/π` grows toward the domain edges, so `‖ρ₀ − π‖` is
    /// dominated by the truncated tails.
    pub heavy_tail: bool,
}

impl DecayReport {
    /// Smallest `envelope − value` of the weighted norm over rows with `t > 0`.
    pub fn min_l2_margin(&self) -> Option<f64> {
        self.min_margin(|r| r.envelope_l2 - r.l2_pi_inv)
    }

    pub fn min_kl_margin(&self) -> Option<f64> {
        self.min_margin(|r| r.envelope_kl - r.kl)
    }

    fn min_margin(&self, f: impl Fn(&DecayRow) -> f64) -> Option<f64> {
        if !self.applicable {
            return None;
        }
        self.rows.iter().filter(|r| r.time > 0.0).map(f).reduce(f64::min)
    }

    /// Writes `time,l2_pi_inv,kl,envelope_l2,envelope_kl`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "time,l2_pi_inv,kl,envelope_l2,envelope_kl")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{}",
                fmt_real(r.time),
                fmt_real(r.l2_pi_inv),
                fmt_real(r.kl),
                fmt_real(r.envelope_l2),
                fmt_real(r.envelope_kl)
            )?;
        }
        Ok(())
    }
}

/// Evaluates the weighted-norm and KL distances to `pi` along a trajectory
/// of `(time, density)` pairs, the first of which is the initial state, and
/// the exponential envelopes for convexity constant `alpha`.
pub fn decay_report(
    trajectory: &[(f64, GridDensity)],
    pi: &GridDensity,
    alpha: Option<f64>,
) -> Result<DecayReport> {
    let (t0, rho0) = trajectory.first().ok_or(Error::Empty("trajectory"))?;
    let applicable = matches!(alpha, Some(a) if a > 0.0);
    let a = alpha.unwrap_or(f64::NAN);
    let l2_0 = l2_pi_inv_norm(rho0, pi)?;
    let kl_0 = kl_divergence(rho0, pi)?;
    let mut rows = Vec::with_capacity(trajectory.len());
    for (t, rho) in trajectory {
        let dt = t - t0;
        let (env_l2, env_kl) = if applicable {
            ((-a * dt).exp() * l2_0, (-2.0 * a * dt).exp() * kl_0)
        } else {
            (f64::NAN, f64::NAN)
        };
        rows.push(DecayRow {
            time: *t,
            l2_pi_inv: l2_pi_inv_norm(rho, pi)?,
            kl: kl_divergence(rho, pi)?,
            envelope_l2: env_l2,
            envelope_kl: env_kl,
        });
    }
    Ok(DecayReport {
        rows,
        applicable,
        heavy_tail: heavy_tail(rho0, pi),
    })
}

fn heavy_tail(rho: &GridDensity, pi: &GridDensity) -> bool {
    let ratio: Vec<f64> = rho
        .values
        .iter()
        .zip(&pi.values)
        .map(|(r, p)| if *p > 0.0 { r / p } else { f64::INFINITY })
        .collect();
    let n = ratio.len();
    let middle = ratio[n / 4..n - n / 4].iter().cloned().fold(0.0, f64::max);
    ratio[0] > middle || ratio[n - 1] > middle
}
