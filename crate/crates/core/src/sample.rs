//! Langevin-type samplers for `π ∝ exp(-V)`.
//!
//! All samplers act on an [`Ensemble`] of `J` particles. Particle `i` at
//! step `k` draws its randomness from `rng.substream(i, k)`, which makes the
//! output independent of the number of worker threads.
//!
//! * ULA: `θ ← θ - τ∇V(θ) + √(2τ) ξ`.
//! * MALA: ULA proposal with a Metropolis-Hastings correction.
//! * Ensemble Langevin: every particle is preconditioned by the empirical
//!   covariance `C` of the ensemble, `θ ← θ - τC∇V(θ) + √(2τ) C^{1/2} ξ`.
//! * BDL: a ULA move followed by birth-death jumps driven by
//!   `log ρ̂ + V` minus its ensemble average, with `ρ̂` a Gaussian KDE.

use std::io::Write;

use nalgebra::DMatrix;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::density::{fmt_real, silverman_bandwidth};
use crate::error::{Error, Result};
use crate::potentials::Potential;
use crate::rng::{Purpose, RngStream, Substream};

/// Particles are processed in chunks of this many; chunking never changes
/// results, only the unit of parallel work.
const CHUNK: usize = 512;

/// Positions of `J` particles in ℝ^d plus the root of their randomness.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    dim: usize,
    positions: Vec<f64>,
    /// Number of steps taken; selects the random substreams of the next step.
    pub step: u64,
    pub rng: RngStream,
}

impl Ensemble {
    /// `positions` is row-major: particle `j` occupies `[j*dim, (j+1)*dim)`.
    pub fn new(dim: usize, positions: Vec<f64>, rng: RngStream) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("dimension must be positive".into()));
        }
        if positions.is_empty() {
            return Err(Error::Empty("ensemble"));
        }
        if !positions.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: positions.len() % dim,
            });
        }
        if let Some(j) = positions.chunks(dim).position(|x| x.iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence { step: 0, particle: j });
        }
        Ok(Self {
            dim,
            positions,
            step: 0,
            rng,
        })
    }

    pub fn from_points(points: &[Vec<f64>], rng: RngStream) -> Result<Self> {
        let dim = points.first().ok_or(Error::Empty("ensemble"))?.len();
        if let Some(p) = points.iter().find(|p| p.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: p.len(),
            });
        }
        Self::new(dim, points.concat(), rng)
    }

    /// A single chain.
    pub fn single(theta: &[f64], rng: RngStream) -> Result<Self> {
        Self::new(theta.len(), theta.to_vec(), rng)
    }

    pub fn len(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn particle(&self, j: usize) -> &[f64] {
        &self.positions[j * self.dim..(j + 1) * self.dim]
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    /// Coordinate `c` of every particle.
    pub fn coordinate(&self, c: usize) -> Vec<f64> {
        self.positions.chunks(self.dim).map(|x| x[c]).collect()
    }

    fn check_finite(&self) -> Result<()> {
        match self
            .positions
            .chunks(self.dim)
            .position(|x| x.iter().any(|v| !v.is_finite()))
        {
            Some(particle) => Err(Error::Divergence {
                step: self.step,
                particle,
            }),
            None => Ok(()),
        }
    }
}

/// Acceptance counts and moments of the recorded samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainStats {
    pub proposed: u64,
    pub accepted: u64,
    pub n_steps: u64,
    pub births: u64,
    pub deaths: u64,
    count: u64,
    mean: Vec<f64>,
    comoment: Vec<f64>,
}

impl ChainStats {
    fn new(dim: usize) -> Self {
        Self {
            proposed: 0,
            accepted: 0,
            n_steps: 0,
            births: 0,
            deaths: 0,
            count: 0,
            mean: vec![0.0; dim],
            comoment: vec![0.0; dim * dim],
        }
    }

    /// `accepted / proposed`, or 1 when nothing was proposed.
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            1.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    fn observe(&mut self, x: &[f64]) {
        let d = self.mean.len();
        self.count += 1;
        let n = self.count as f64;
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl / n;
        }
        for i in 0..d {
            for j in 0..d {
                self.comoment[i * d + j] += delta[i] * (x[j] - self.mean[j]);
            }
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Unbiased covariance of all recorded particle states.
    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.mean.len();
        let denom = (self.count.max(2) - 1) as f64;
        DMatrix::from_row_slice(d, d, &self.comoment).map(|v| v / denom)
    }

    /// Flat `key = value` text block.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("n_steps = {}\n", self.n_steps));
        s.push_str(&format!("proposed = {}\n", self.proposed));
        s.push_str(&format!("accepted = {}\n", self.accepted));
        s.push_str(&format!("acceptance_rate = {}\n", fmt_real(self.acceptance_rate())));
        s.push_str(&format!("births = {}\n", self.births));
        s.push_str(&format!("deaths = {}\n", self.deaths));
        s.push_str(&format!("samples = {}\n", self.count));
        for (i, m) in self.mean.iter().enumerate() {
            s.push_str(&format!("mean_{i} = {}\n", fmt_real(*m)));
        }
        let cov = self.covariance();
        for i in 0..cov.nrows() {
            for j in 0..cov.ncols() {
                s.push_str(&format!("cov_{i}_{j} = {}\n", fmt_real(cov[(i, j)])));
            }
        }
        s
    }
}

/// `θ - τ∇V(θ) + √(2τ) ξ`.
pub fn ula_step(p: &Potential, theta: &[f64], tau: f64, noise: &[f64]) -> Vec<f64> {
    let g = p.grad(theta);
    let s = (2.0 * tau).sqrt();
    theta
        .iter()
        .zip(&g)
        .zip(noise)
        .map(|((t, gi), xi)| t - tau * gi + s * xi)
        .collect()
}

/// `log q(x → y)` for the ULA proposal, without its normalizing constant.
fn log_proposal(x: &[f64], grad_x: &[f64], y: &[f64], tau: f64) -> f64 {
    let mut s = 0.0;
    for i in 0..x.len() {
        let r = y[i] - x[i] + tau * grad_x[i];
        s += r * r;
    }
    -s / (4.0 * tau)
}

fn log_acceptance(
    v_x: f64,
    grad_x: &[f64],
    x: &[f64],
    v_y: f64,
    grad_y: &[f64],
    y: &[f64],
    tau: f64,
) -> f64 {
    if v_y.is_nan() || v_y == f64::INFINITY {
        return f64::NEG_INFINITY;
    }
    if v_x == f64::INFINITY {
        return 0.0;
    }
    let log_ratio =
        (v_x - v_y) + log_proposal(y, grad_y, x, tau) - log_proposal(x, grad_x, y, tau);
    if log_ratio.is_nan() {
        f64::NEG_INFINITY
    } else {
        log_ratio.min(0.0)
    }
}

/// Metropolis-Hastings acceptance probability of the move `θ → θ*` under
/// the ULA proposal. Computed in log space; only `exp(-V)` up to a constant
/// is used.
pub fn mala_acceptance(p: &Potential, theta: &[f64], proposal: &[f64], tau: f64) -> f64 {
    let gx = p.grad(theta);
    let gy = p.grad(proposal);
    log_acceptance(p.eval(theta), &gx, theta, p.eval(proposal), &gy, proposal, tau).exp()
}

/// MALA step with explicit noise and acceptance uniform; the move is
/// accepted iff `u ≤ a`.
pub fn mala_step_with(p: &Potential, theta: &[f64], tau: f64, noise: &[f64], u: f64) -> (Vec<f64>, bool) {
    let proposal = ula_step(p, theta, tau, noise);
    let a = mala_acceptance(p, theta, &proposal, tau);
    if u <= a {
        (proposal, true)
    } else {
        (theta.to_vec(), false)
    }
}

/// MALA step drawing `d` Gaussians and then one uniform from `rng`.
pub fn mala_step(p: &Potential, theta: &[f64], tau: f64, rng: &mut Substream) -> (Vec<f64>, bool) {
    let mut noise = vec![0.0; theta.len()];
    rng.fill_gaussian(&mut noise);
    let u = rng.uniform();
    mala_step_with(p, theta, tau, &noise, u)
}

/// `(1/J) Σ (θⱼ - θ̄)(θⱼ - θ̄)ᵀ`.
pub fn ensemble_covariance(e: &Ensemble) -> DMatrix<f64> {
    let d = e.dim();
    let j = e.len() as f64;
    let mut mean = vec![0.0; d];
    for x in e.positions.chunks(d) {
        for (m, xi) in mean.iter_mut().zip(x) {
            *m += xi;
        }
    }
    mean.iter_mut().for_each(|m| *m /= j);
    let mut cov = DMatrix::zeros(d, d);
    for x in e.positions.chunks(d) {
        for a in 0..d {
            let da = x[a] - mean[a];
            for b in a..d {
                cov[(a, b)] += da * (x[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / j;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    cov
}

/// How the ensemble covariance `C` enters the interacting Langevin dynamics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mobility {
    /// Drift `-C∇V`, noise `√2 C^{1/2}`: affine-invariant preconditioning
    /// that equalizes mixing across directions of a Gaussian target.
    #[default]
    Covariance,
    /// Drift `-C⁻¹∇V`, noise `√2 C^{-1/2}`. Also leaves `π` invariant in
    /// the mean-field limit, but slows down the wide directions.
    InverseCovariance,
}

/// Preconditioner of one ensemble step: `M` and its symmetric square root.
struct EnsembleMetric {
    d: usize,
    m: Vec<f64>,
    sqrt_m: Vec<f64>,
}

impl EnsembleMetric {
    fn new(e: &Ensemble, ridge: Option<f64>, mobility: Mobility) -> Result<Self> {
        let d = e.dim();
        let cov = ensemble_covariance(e);
        let ridge = ridge.unwrap_or_else(|| 1e-6 * cov.trace() / d as f64);
        if !(ridge >= 0.0) {
            return Err(Error::InvalidParameter(format!("ridge must be nonnegative, got {ridge}")));
        }
        let h = cov + DMatrix::identity(d, d) * ridge;
        let eig = h.symmetric_eigen();
        let min = eig.eigenvalues.min();
        if !(min > 1e-14) {
            return Err(Error::SingularPreconditioner { min_eigenvalue: min });
        }
        let q = &eig.eigenvectors;
        let build = |f: &dyn Fn(f64) -> f64| -> Vec<f64> {
            let diag = eig.eigenvalues.map(f);
            let m = q * DMatrix::from_diagonal(&diag) * q.transpose();
            let m = 0.5 * (&m + m.transpose());
            // Row-major copy for the inner loops.
            (0..d).flat_map(|r| (0..d).map(move |c| (r, c))).map(|(r, c)| m[(r, c)]).collect()
        };
        let (m, sqrt_m) = match mobility {
            Mobility::Covariance => (build(&|l| l), build(&|l| l.sqrt())),
            Mobility::InverseCovariance => (build(&|l| 1.0 / l), build(&|l| 1.0 / l.sqrt())),
        };
        Ok(Self { d, m, sqrt_m })
    }

    fn apply(&self, mat: &[f64], v: &[f64], out: &mut [f64]) {
        for r in 0..self.d {
            out[r] = (0..self.d).map(|c| mat[r * self.d + c] * v[c]).sum();
        }
    }
}

/// Bandwidth choice for the birth-death KDE.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum Bandwidth {
    /// Silverman's rule per coordinate, floored at `1e-3` times the
    /// coordinate's standard deviation.
    #[default]
    Auto,
    Fixed(f64),
}

/// Per-coordinate KDE bandwidths for the current ensemble.
pub fn ensemble_bandwidths(e: &Ensemble, bandwidth: Bandwidth) -> Result<Vec<f64>> {
    match bandwidth {
        Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => Ok(vec![h; e.dim()]),
        Bandwidth::Fixed(h) => Err(Error::InvalidParameter(format!(
            "bandwidth must be positive, got {h}"
        ))),
        Bandwidth::Auto => (0..e.dim())
            .map(|c| {
                let xs = e.coordinate(c);
                let sb = silverman_bandwidth(&xs)?;
                let floor = (1e-3 * sb.std).max(1e-12);
                Ok(sb.value.max(floor))
            })
            .collect(),
    }
}

/// `log ρ̂(θᵢ)` for a product-Gaussian KDE over the ensemble itself.
pub fn ensemble_log_kde(e: &Ensemble, bandwidths: &[f64]) -> Vec<f64> {
    let d = e.dim();
    let j = e.len();
    let inv2h2: Vec<f64> = bandwidths.iter().map(|h| 0.5 / (h * h)).collect();
    let log_norm: f64 = bandwidths
        .iter()
        .map(|h| -(h * (2.0 * std::f64::consts::PI).sqrt()).ln())
        .sum::<f64>()
        - (j as f64).ln();
    let pos = &e.positions;
    // Symmetric kernel: each pair is evaluated once.
    let mut sums = vec![1.0; j];
    for a in 0..j {
        let xa = &pos[a * d..(a + 1) * d];
        for b in (a + 1)..j {
            let xb = &pos[b * d..(b + 1) * d];
            let mut q = 0.0;
            for c in 0..d {
                let diff = xa[c] - xb[c];
                q += diff * diff * inv2h2[c];
            }
            let k = (-q).exp();
            sums[a] += k;
            sums[b] += k;
        }
    }
    sums.iter().map(|s| s.ln() + log_norm).collect()
}

/// `βᵢ = rᵢ - mean(r)` for `rᵢ = log ρᵢ + V(θᵢ)`. Constant offsets in either
/// term cancel.
pub fn centered_rates(log_density: &[f64], energies: &[f64]) -> Vec<f64> {
    let r: Vec<f64> = log_density.iter().zip(energies).map(|(l, v)| l + v).collect();
    let mean = r.iter().sum::<f64>() / r.len() as f64;
    r.iter().map(|x| x - mean).collect()
}

/// Birth-death rates of the ensemble under the KDE density estimate.
pub fn birth_death_rates(p: &Potential, e: &Ensemble, bandwidth: Bandwidth) -> Result<Vec<f64>> {
    let h = ensemble_bandwidths(e, bandwidth)?;
    let log_rho = ensemble_log_kde(e, &h);
    let energies: Vec<f64> = e.positions.chunks(e.dim()).map(|x| p.eval(x)).collect();
    Ok(centered_rates(&log_rho, &energies))
}

/// Applies one round of birth-death jumps, serially in particle order.
/// Returns `(births, deaths)`; `J` is unchanged.
pub fn apply_birth_death(e: &mut Ensemble, rates: &[f64], tau: f64) -> (u64, u64) {
    let d = e.dim();
    let j = e.len();
    let mut rng = e.rng.substream_for(Purpose::BirthDeath, 0, e.step);
    let (mut births, mut deaths) = (0, 0);
    for i in 0..j {
        let beta = rates[i];
        let u = rng.uniform();
        if beta > 0.0 && u < -(-beta * tau).exp_m1() {
            let other = pick_other(&mut rng, i, j);
            e.positions.copy_within(other * d..(other + 1) * d, i * d);
            deaths += 1;
        } else if beta < 0.0 && u < -(beta * tau).exp_m1() {
            let other = pick_other(&mut rng, i, j);
            e.positions.copy_within(i * d..(i + 1) * d, other * d);
            births += 1;
        }
    }
    (births, deaths)
}

fn pick_other(rng: &mut Substream, i: usize, j: usize) -> usize {
    let k = rng.index(j - 1);
    if k >= i {
        k + 1
    } else {
        k
    }
}

/// Sampling algorithm and its method-specific parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Method {
    Ula,
    Mala,
    Ensemble {
        /// `None` selects `1e-6 · trace(C) / d`.
        ridge: Option<f64>,
        mobility: Mobility,
    },
    Bdl {
        bandwidth: Bandwidth,
    },
}

struct Scratch {
    grad: Vec<f64>,
    noise: Vec<f64>,
    proposal: Vec<f64>,
    grad_prop: Vec<f64>,
    tmp: Vec<f64>,
}

impl Scratch {
    fn new(d: usize) -> Self {
        Self {
            grad: vec![0.0; d],
            noise: vec![0.0; d],
            proposal: vec![0.0; d],
            grad_prop: vec![0.0; d],
            tmp: vec![0.0; d],
        }
    }
}

/// Runs `update(i, x, scratch) -> accepted` over every particle, in parallel
/// when a pool is present. Returns the number of accepted moves.
fn for_each_particle<F>(
    positions: &mut [f64],
    d: usize,
    #[allow(unused_variables)] pool: Option<&WorkerPool>,
    update: F,
) -> u64
where
    F: Fn(usize, &mut [f64], &mut Scratch) -> bool + Sync,
{
    let run_chunk = |c: usize, chunk: &mut [f64]| -> u64 {
        let mut s = Scratch::new(d);
        let mut acc = 0;
        for (k, x) in chunk.chunks_mut(d).enumerate() {
            if update(c * CHUNK + k, x, &mut s) {
                acc += 1;
            }
        }
        acc
    };
    #[cfg(feature = "parallel")]
    if let Some(pool) = pool {
        use rayon::prelude::*;
        return pool.0.install(|| {
            positions
                .par_chunks_mut(CHUNK * d)
                .enumerate()
                .map(|(c, chunk)| run_chunk(c, chunk))
                .sum()
        });
    }
    positions
        .chunks_mut(CHUNK * d)
        .enumerate()
        .map(|(c, chunk)| run_chunk(c, chunk))
        .sum()
}

#[cfg(feature = "parallel")]
struct WorkerPool(rayon::ThreadPool);

#[cfg(not(feature = "parallel"))]
struct WorkerPool;

fn make_pool(workers: usize) -> Result<Option<WorkerPool>> {
    if workers <= 1 {
        return Ok(None);
    }
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map(|p| Some(WorkerPool(p)))
            .map_err(|e| Error::InvalidParameter(format!("cannot start worker pool: {e}")))
    }
    #[cfg(not(feature = "parallel"))]
    {
        Ok(None)
    }
}

/// A stepping sampler over an ensemble.
pub struct Sampler {
    method: Method,
    potential: Potential,
    ensemble: Ensemble,
    tau: f64,
    stats: ChainStats,
    pool: Option<WorkerPool>,
}

impl Sampler {
    pub fn new(method: Method, potential: Potential, init: Ensemble, tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidParameter(format!("step size must be positive, got {tau}")));
        }
        if init.dim() != potential.dim() {
            return Err(Error::DimensionMismatch {
                expected: potential.dim(),
                got: init.dim(),
            });
        }
        match method {
            Method::Bdl { bandwidth } => {
                if init.len() < 2 {
                    return Err(Error::InvalidParameter(
                        "birth-death dynamics need at least two particles".into(),
                    ));
                }
                if let Bandwidth::Fixed(h) = bandwidth {
                    if !(h > 0.0) {
                        return Err(Error::InvalidParameter(format!(
                            "bandwidth must be positive, got {h}"
                        )));
                    }
                }
            }
            Method::Ensemble { ridge: Some(r), .. } if !(r >= 0.0) => {
                return Err(Error::InvalidParameter(format!("ridge must be nonnegative, got {r}")));
            }
            _ => {}
        }
        let stats = ChainStats::new(init.dim());
        Ok(Self {
            method,
            potential,
            ensemble: init,
            tau,
            stats,
            pool: None,
        })
    }

    /// Number of worker threads for particle updates. Results do not depend
    /// on this value.
    pub fn with_workers(mut self, workers: usize) -> Result<Self> {
        self.pool = make_pool(workers)?;
        Ok(self)
    }

    pub fn ensemble(&self) -> &Ensemble {
        &self.ensemble
    }

    pub fn into_ensemble(self) -> Ensemble {
        self.ensemble
    }

    pub fn stats(&self) -> &ChainStats {
        &self.stats
    }

    pub fn time(&self) -> f64 {
        self.ensemble.step as f64 * self.tau
    }

    /// Adds the current ensemble to the running moments.
    pub fn record(&mut self) {
        let d = self.ensemble.dim();
        for x in self.ensemble.positions.chunks(d) {
            self.stats.observe(x);
        }
    }

    pub fn step(&mut self) -> Result<()> {
        let d = self.ensemble.dim();
        let tau = self.tau;
        let scale = (2.0 * tau).sqrt();
        let rng = self.ensemble.rng;
        let k = self.ensemble.step;
        let p = &self.potential;
        let pool = self.pool.as_ref();
        let j = self.ensemble.len() as u64;

        let ula = |i: usize, x: &mut [f64], s: &mut Scratch| {
            let mut sub = rng.substream(i as u64, k);
            sub.fill_gaussian(&mut s.noise);
            p.grad_into(x, &mut s.grad);
            for c in 0..x.len() {
                x[c] = x[c] - tau * s.grad[c] + scale * s.noise[c];
            }
            true
        };

        match self.method {
            Method::Ula => {
                for_each_particle(&mut self.ensemble.positions, d, pool, ula);
                self.stats.proposed += j;
                self.stats.accepted += j;
            }
            Method::Mala => {
                let accepted = for_each_particle(&mut self.ensemble.positions, d, pool, |i, x, s| {
                    let mut sub = rng.substream(i as u64, k);
                    sub.fill_gaussian(&mut s.noise);
                    let u = sub.uniform();
                    p.grad_into(x, &mut s.grad);
                    for c in 0..x.len() {
                        s.proposal[c] = x[c] - tau * s.grad[c] + scale * s.noise[c];
                    }
                    p.grad_into(&s.proposal, &mut s.grad_prop);
                    let la = log_acceptance(
                        p.eval(x),
                        &s.grad,
                        x,
                        p.eval(&s.proposal),
                        &s.grad_prop,
                        &s.proposal,
                        tau,
                    );
                    if u <= la.exp() {
                        x.copy_from_slice(&s.proposal);
                        true
                    } else {
                        false
                    }
                });
                self.stats.proposed += j;
                self.stats.accepted += accepted;
            }
            Method::Ensemble { ridge, mobility } => {
                let metric = EnsembleMetric::new(&self.ensemble, ridge, mobility)?;
                for_each_particle(&mut self.ensemble.positions, d, pool, |i, x, s| {
                    let mut sub = rng.substream(i as u64, k);
                    sub.fill_gaussian(&mut s.noise);
                    p.grad_into(x, &mut s.grad);
                    metric.apply(&metric.m, &s.grad, &mut s.tmp);
                    metric.apply(&metric.sqrt_m, &s.noise, &mut s.proposal);
                    for c in 0..x.len() {
                        x[c] = x[c] - tau * s.tmp[c] + scale * s.proposal[c];
                    }
                    true
                });
                self.stats.proposed += j;
                self.stats.accepted += j;
            }
            Method::Bdl { bandwidth } => {
                for_each_particle(&mut self.ensemble.positions, d, pool, ula);
                self.ensemble.check_finite()?;
                let rates = birth_death_rates(p, &self.ensemble, bandwidth)?;
                let (b, dth) = apply_birth_death(&mut self.ensemble, &rates, tau);
                self.stats.births += b;
                self.stats.deaths += dth;
                self.stats.proposed += j;
                self.stats.accepted += j;
            }
        }
        self.ensemble.check_finite()?;
        self.ensemble.step += 1;
        self.stats.n_steps += 1;
        Ok(())
    }
}

/// One ensemble-preconditioned Langevin step.
pub fn ensemble_langevin_step(
    p: &Potential,
    e: &Ensemble,
    tau: f64,
    ridge: Option<f64>,
    mobility: Mobility,
) -> Result<Ensemble> {
    let mut s = Sampler::new(Method::Ensemble { ridge, mobility }, p.clone(), e.clone(), tau)?;
    s.step()?;
    Ok(s.into_ensemble())
}

/// One birth-death accelerated Langevin step: ULA move, then jumps.
pub fn bdl_step(p: &Potential, e: &Ensemble, tau: f64, bandwidth: Bandwidth) -> Result<Ensemble> {
    let mut s = Sampler::new(Method::Bdl { bandwidth }, p.clone(), e.clone(), tau)?;
    s.step()?;
    Ok(s.into_ensemble())
}

/// Recorded ensemble states.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub step: u64,
    pub time: f64,
    pub positions: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRun {
    pub dim: usize,
    pub snapshots: Vec<Snapshot>,
    pub stats: ChainStats,
}

impl SampleRun {
    /// Writes `step,time,particle,theta_0..`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "step,time,particle")?;
        for i in 0..self.dim {
            write!(w, ",theta_{i}")?;
        }
        writeln!(w)?;
        for snap in &self.snapshots {
            let t = fmt_real(snap.time);
            for (j, x) in snap.positions.chunks(self.dim).enumerate() {
                write!(w, "{},{},{}", snap.step, t, j)?;
                for v in x {
                    write!(w, ",{}", fmt_real(*v))?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

/// Runs `n_steps` steps, recording the initial state and every `thin`-th step.
pub fn run_sampler(
    method: Method,
    p: &Potential,
    init: Ensemble,
    tau: f64,
    n_steps: u64,
    thin: u64,
) -> Result<SampleRun> {
    run_sampler_with_workers(method, p, init, tau, n_steps, thin, 1)
}

pub fn run_sampler_with_workers(
    method: Method,
    p: &Potential,
    init: Ensemble,
    tau: f64,
    n_steps: u64,
    thin: u64,
    workers: usize,
) -> Result<SampleRun> {
    if thin == 0 {
        return Err(Error::InvalidParameter("thin must be positive".into()));
    }
    let dim = init.dim();
    let mut sampler = Sampler::new(method, p.clone(), init, tau)?.with_workers(workers)?;
    let mut snapshots = Vec::new();
    let mut snap = |s: &mut Sampler| {
        s.record();
        snapshots.push(Snapshot {
            step: s.ensemble.step,
            time: s.time(),
            positions: s.ensemble.positions.clone(),
        });
    };
    snap(&mut sampler);
    for k in 1..=n_steps {
        sampler.step()?;
        if k % thin == 0 {
            snap(&mut sampler);
        }
    }
    Ok(SampleRun {
        dim,
        snapshots,
        stats: sampler.stats.clone(),
    })
}

/// Integrated autocorrelation time `1 + 2Σρ(t)` of scalar chains, with the
/// autocovariance averaged over chains and Sokal's self-consistent window
/// (`M ≥ 5 τ(M)`). Chains must have equal length ≥ 2.
pub fn integrated_autocorrelation_time(chains: &[Vec<f64>]) -> Result<f64> {
    let n = chains.first().ok_or(Error::Empty("chains"))?.len();
    if n < 2 {
        return Err(Error::Empty("chain of length < 2"));
    }
    if chains.iter().any(|c| c.len() != n) {
        return Err(Error::InvalidParameter("chains must have equal length".into()));
    }
    let total = (chains.len() * n) as f64;
    let mean = chains.iter().flatten().sum::<f64>() / total;

    let len = (2 * n).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let mut acov = vec![0.0; n];
    let mut buf = vec![Complex::new(0.0, 0.0); len];
    for c in chains {
        for (b, x) in buf.iter_mut().zip(c.iter().chain(std::iter::repeat(&mean))) {
            *b = Complex::new(x - mean, 0.0);
        }
        buf[n..].iter_mut().for_each(|b| *b = Complex::new(0.0, 0.0));
        fwd.process(&mut buf);
        buf.iter_mut().for_each(|b| *b = Complex::new(b.norm_sqr(), 0.0));
        inv.process(&mut buf);
        for (t, a) in acov.iter_mut().enumerate() {
            *a += buf[t].re / (len as f64 * (n - t) as f64);
        }
    }
    let c0 = acov[0];
    if !(c0 > 0.0) {
        return Err(Error::InvalidParameter("chains have zero variance".into()));
    }
    let mut tau = 1.0;
    for (m, a) in acov.iter().enumerate().skip(1) {
        tau += 2.0 * a / c0;
        if m as f64 >= 5.0 * tau {
            return Ok(tau);
        }
    }
    Ok(tau)
}


#[cfg(test)]
mod props {
    use super::*;
    use crate::potentials::{make_double_well, parse_potential};
    use proptest::prelude::*;

    /// Log Gaussian proposal density, up to the common normalizer.
    fn log_q(p: &Potential, x: &[f64], y: &[f64], tau: f64) -> f64 {
        let g = p.grad(x);
        -x.iter().zip(y).zip(&g).map(|((a, b), gi)| (b - a + tau * gi).powi(2)).sum::<f64>() / (4.0 * tau)
    }

    proptest! {
        #[test]
        fn detailed_balance_holds_pointwise(x in -2.0..2.0f64, y in -2.0..2.0f64, tau in 0.001..0.2f64) {
            for p in [make_double_well(), parse_potential("mixture:0.3,-1,0.5;0.7,1.5,0.2").unwrap()] {
                let fwd = -p.eval(&[x]) + log_q(&p, &[x], &[y], tau) + mala_acceptance(&p, &[x], &[y], tau).ln();
                let bwd = -p.eval(&[y]) + log_q(&p, &[y], &[x], tau) + mala_acceptance(&p, &[y], &[x], tau).ln();
                prop_assert!((fwd - bwd).exp_m1().abs() < 1e-10, "{fwd} vs {bwd}");
            }
        }

        #[test]
        fn acceptance_ignores_normalization(x in -2.0..2.0f64, y in -2.0..2.0f64, tau in 0.001..0.2f64, c in -20.0..20.0f64) {
            let p = make_double_well();
            let a = mala_acceptance(&p, &[x], &[y], tau);
            let b = mala_acceptance(&p.shifted(c), &[x], &[y], tau);
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
