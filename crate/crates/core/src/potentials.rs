//! Energies `V` on ℝ^d and the catalog of concrete potentials.
//!
//! A [`Potential`] is both an objective for the deterministic flows in
//! [`crate::optimize`] and the unnormalized log-target `π ∝ exp(-V)` for the
//! samplers in [`crate::sample`]. Normalizing constants are never needed by
//! any algorithm; `log_partition` is carried only as diagnostic metadata.
//!
//! Boltzmann targets use `V = β(U + K)` so that `exp(-V)` reproduces the
//! Boltzmann-Gibbs density `exp(-β(U + K)) / Z`. The literal alternative
//! `V = -β(U + K)` would put the mass at the energy maxima and is not offered.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// An energy function with its gradient and, optionally, its Hessian.
pub trait Energy: Send + Sync {
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> f64;

    /// Writes `∇V(x)` into `out` (length `dim`).
    fn gradient(&self, x: &[f64], out: &mut [f64]);

    fn hessian(&self, _x: &[f64]) -> Option<DMatrix<f64>> {
        None
    }
}

/// An energy plus the constants that diagnostics may rely on.
#[derive(Clone)]
pub struct Potential {
    name: String,
    energy: Arc<dyn Energy>,
    /// Known infimum `V*`.
    pub v_star: Option<f64>,
    /// PL / strong-convexity constant.
    pub alpha: Option<f64>,
    /// Lipschitz constant of the gradient.
    pub lipschitz: Option<f64>,
    /// `log Z` for `Z = ∫ exp(-V)`, when known.
    pub log_partition: Option<f64>,
}

impl fmt::Debug for Potential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Potential")
            .field("name", &self.name)
            .field("dim", &self.dim())
            .field("v_star", &self.v_star)
            .field("alpha", &self.alpha)
            .field("lipschitz", &self.lipschitz)
            .field("log_partition", &self.log_partition)
            .finish()
    }
}

impl Potential {
    pub fn new(name: impl Into<String>, energy: impl Energy + 'static) -> Self {
        Self {
            name: name.into(),
            energy: Arc::new(energy),
            v_star: None,
            alpha: None,
            lipschitz: None,
            log_partition: None,
        }
    }

    /// Builds a potential from closures; no Hessian is available.
    pub fn from_fn<F, G>(name: impl Into<String>, dim: usize, value: F, gradient: G) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
        G: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self::new(
            name,
            FnEnergy {
                dim,
                value: Box::new(value),
                gradient: Box::new(gradient),
            },
        )
    }

    pub fn with_v_star(mut self, v: f64) -> Self {
        self.v_star = Some(v);
        self
    }

    /// Sets the PL and gradient-Lipschitz constants.
    ///
    /// Fails when `alpha > lipschitz` or either is nonpositive.
    pub fn with_constants(mut self, alpha: Option<f64>, lipschitz: Option<f64>) -> Result<Self> {
        if let Some(a) = alpha {
            if !(a > 0.0) {
                return Err(Error::InvalidParameter(format!("alpha must be positive, got {a}")));
            }
        }
        if let Some(l) = lipschitz {
            if !(l > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "lipschitz constant must be positive, got {l}"
                )));
            }
        }
        if let (Some(a), Some(l)) = (alpha, lipschitz) {
            if a > l * (1.0 + 1e-12) {
                return Err(Error::InvalidParameter(format!(
                    "alpha ({a}) exceeds the lipschitz constant ({l})"
                )));
            }
        }
        self.alpha = alpha;
        self.lipschitz = lipschitz;
        Ok(self)
    }

    pub fn with_log_partition(mut self, log_z: f64) -> Self {
        self.log_partition = Some(log_z);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.energy.dim()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.energy.value(x)
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        self.energy.gradient(x, &mut g);
        g
    }

    pub fn grad_into(&self, x: &[f64], out: &mut [f64]) {
        self.energy.gradient(x, out);
    }

    pub fn hessian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        self.energy.hessian(x)
    }

    /// `V + c`. The target `exp(-V)` is only rescaled, so every sampler
    /// must be invariant under this transformation.
    pub fn shifted(&self, c: f64) -> Potential {
        Potential {
            name: format!("{}+{}", self.name, c),
            energy: Arc::new(Shifted {
                inner: self.energy.clone(),
                shift: c,
            }),
            v_star: self.v_star.map(|v| v + c),
            alpha: self.alpha,
            lipschitz: self.lipschitz,
            log_partition: self.log_partition.map(|z| z - c),
        }
    }
}

struct FnEnergy {
    dim: usize,
    value: Box<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    gradient: Box<dyn Fn(&[f64], &mut [f64]) + Send + Sync>,
}

impl Energy for FnEnergy {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        (self.gradient)(x, out)
    }
}

struct Shifted {
    inner: Arc<dyn Energy>,
    shift: f64,
}

impl Energy for Shifted {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn value(&self, x: &[f64]) -> f64 {
        self.inner.value(x) + self.shift
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        self.inner.gradient(x, out)
    }
    fn hessian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        self.inner.hessian(x)
    }
}

/// Mean and covariance of a Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSpec {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianSpec {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::Empty("gaussian mean"));
        }
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: covariance.nrows(),
            });
        }
        check_spd(&covariance, "covariance")?;
        Ok(Self { mean, covariance })
    }

    /// One-dimensional `N(mean, variance)`.
    pub fn scalar(mean: f64, variance: f64) -> Result<Self> {
        Self::new(
            DVector::from_element(1, mean),
            DMatrix::from_element(1, 1, variance),
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn precision(&self) -> DMatrix<f64> {
        // SPD was checked at construction.
        self.covariance
            .clone()
            .cholesky()
            .expect("covariance is SPD")
            .inverse()
    }
}

/// Rejects non-symmetric matrices and those whose Cholesky factorization fails.
pub(crate) fn check_spd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::NotPositiveDefinite(format!("{what} is not square")));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(Error::NotPositiveDefinite(format!("{what} is not symmetric")));
    }
    let min_eig = m.clone().symmetric_eigenvalues().min();
    if !(min_eig > 0.0) || m.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite(format!(
            "{what} has smallest eigenvalue {min_eig:e}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Catalog
// ---------------------------------------------------------------------------

struct DoubleWell;

impl Energy for DoubleWell {
    fn dim(&self) -> usize {
        1
    }
    fn value(&self, x: &[f64]) -> f64 {
        let t2 = x[0] * x[0];
        0.375 * t2 * t2 - 0.75 * t2
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let t = x[0];
        out[0] = 1.5 * t * (t * t - 1.0);
    }
    fn hessian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_element(1, 1, 4.5 * x[0] * x[0] - 1.5))
    }
}

/// `V(θ) = 3/8 θ⁴ - 3/4 θ²` with minimizers `±1` and a local maximum at `0`.
pub fn make_double_well() -> Potential {
    Potential::new("double_well", DoubleWell).with_v_star(-0.375)
}

/// `V(θ) = Σ cᵢ θᵢ²` for nonnegative coefficients.
struct Quadratic {
    coeffs: Vec<f64>,
}

impl Energy for Quadratic {
    fn dim(&self) -> usize {
        self.coeffs.len()
    }
    fn value(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().zip(x).map(|(c, t)| c * t * t).sum()
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        for ((o, c), t) in out.iter_mut().zip(&self.coeffs).zip(x) {
            *o = 2.0 * c * t;
        }
    }
    fn hessian(&self, _x: &[f64]) -> Option<DMatrix<f64>> {
        let d = DVector::from_iterator(self.coeffs.len(), self.coeffs.iter().map(|c| 2.0 * c));
        Some(DMatrix::from_diagonal(&d))
    }
}

/// Anisotropic quadratic `V(θ) = Σ αᵢ θᵢ²`.
pub fn make_quadratic(coeffs: &[f64]) -> Result<Potential> {
    if coeffs.is_empty() {
        return Err(Error::Empty("quadratic coefficients"));
    }
    if let Some(c) = coeffs.iter().find(|c| !(**c > 0.0) || !c.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "quadratic coefficients must be positive, got {c}"
        )));
    }
    let min = coeffs.iter().copied().fold(f64::INFINITY, f64::min);
    let max = coeffs.iter().copied().fold(0.0, f64::max);
    let label = coeffs
        .iter()
        .map(|c| c.to_string())
        .collect::<Vec<_>>()
        .join(",");
    let d = coeffs.len() as f64;
    let log_z = coeffs.iter().map(|c| -0.5 * c.ln()).sum::<f64>() + 0.5 * d * PI.ln();
    Potential::new(
        format!("quadratic:{label}"),
        Quadratic {
            coeffs: coeffs.to_vec(),
        },
    )
    .with_v_star(0.0)
    .with_log_partition(log_z)
    .with_constants(Some(2.0 * min), Some(2.0 * max))
}

/// `V(θ) = ½θ₁²` on ℝ²: PL with constant 1 but not strongly convex.
pub fn make_pl_not_convex() -> Potential {
    Potential::new(
        "pl_not_convex",
        Quadratic {
            coeffs: vec![0.5, 0.0],
        },
    )
    .with_v_star(0.0)
    .with_constants(Some(1.0), Some(1.0))
    .expect("constants are valid")
}

/// `V ≡ 0` on ℝ^d; the Langevin dynamics reduce to pure diffusion.
pub fn make_free(dim: usize) -> Potential {
    Potential::from_fn(
        "zero",
        dim,
        |_| 0.0,
        |_, out: &mut [f64]| out.iter_mut().for_each(|o| *o = 0.0),
    )
    .with_v_star(0.0)
}

/// Negative log of an unnormalized Gaussian posterior, evaluated from its
/// likelihood and prior terms.
struct GaussianPosterior {
    design: DMatrix<f64>,
    noise_precision: DMatrix<f64>,
    data: DVector<f64>,
    prior_mean: DVector<f64>,
    prior_precision: DMatrix<f64>,
    hessian: DMatrix<f64>,
}

impl Energy for GaussianPosterior {
    fn dim(&self) -> usize {
        self.prior_mean.len()
    }
    fn value(&self, x: &[f64]) -> f64 {
        let theta = DVector::from_column_slice(x);
        let r = &self.data - &self.design * &theta;
        let p = &theta - &self.prior_mean;
        0.5 * r.dot(&(&self.noise_precision * &r)) + 0.5 * p.dot(&(&self.prior_precision * &p))
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let theta = DVector::from_column_slice(x);
        let r = &self.data - &self.design * &theta;
        let g = -(self.design.transpose() * (&self.noise_precision * r))
            + &self.prior_precision * (&theta - &self.prior_mean);
        out.copy_from_slice(g.as_slice());
    }
    fn hessian(&self, _x: &[f64]) -> Option<DMatrix<f64>> {
        Some(self.hessian.clone())
    }
}

/// Posterior for a linear-Gaussian model `y = Aθ + η`, `η ~ N(0, Σ_noise)`,
/// `θ ~ prior`. Returns the energy together with the closed-form posterior.
pub fn make_gaussian_posterior(
    prior: &GaussianSpec,
    design: &DMatrix<f64>,
    noise_cov: &DMatrix<f64>,
    data: &DVector<f64>,
) -> Result<(Potential, GaussianSpec)> {
    let d = prior.dim();
    let m = data.len();
    if design.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: design.ncols(),
        });
    }
    if design.nrows() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: design.nrows(),
        });
    }
    if noise_cov.nrows() != m || noise_cov.ncols() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: noise_cov.nrows(),
        });
    }
    check_spd(noise_cov, "noise covariance")?;

    let noise_precision = noise_cov.clone().cholesky().expect("checked").inverse();
    let prior_precision = prior.precision();
    let post_precision = design.transpose() * &noise_precision * design + &prior_precision;
    let post_precision = 0.5 * (&post_precision + post_precision.transpose());
    let chol = post_precision
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("posterior precision".into()))?;
    let rhs = design.transpose() * (&noise_precision * data) + &prior_precision * &prior.mean;
    let post_mean = chol.solve(&rhs);
    let post_cov = chol.inverse();
    let post_cov = 0.5 * (&post_cov + post_cov.transpose());

    let eig = post_precision.clone().symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());

    let energy = GaussianPosterior {
        design: design.clone(),
        noise_precision,
        data: data.clone(),
        prior_mean: prior.mean.clone(),
        prior_precision,
        hessian: post_precision,
    };
    let v_star = energy.value(post_mean.as_slice());
    let log_det_precision = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let log_det_cov = -log_det_precision;
    let log_z = -v_star + 0.5 * d as f64 * (2.0 * PI).ln() + 0.5 * log_det_cov;
    let potential = Potential::new("gaussian_posterior", energy)
        .with_v_star(v_star)
        .with_log_partition(log_z)
        .with_constants(Some(lo), Some(hi))?;
    Ok((potential, GaussianSpec::new(post_mean, post_cov)?))
}

struct MixtureComponent {
    log_weight_norm: f64,
    mean: DVector<f64>,
    precision: DMatrix<f64>,
}

struct Mixture {
    dim: usize,
    components: Vec<MixtureComponent>,
}

impl Mixture {
    /// Per-component log terms `log wᵢ + log N(x; mᵢ, Σᵢ)` and `Pᵢ(x - mᵢ)`.
    fn terms(&self, x: &[f64]) -> (Vec<f64>, Vec<DVector<f64>>) {
        let theta = DVector::from_column_slice(x);
        let mut logs = Vec::with_capacity(self.components.len());
        let mut grads = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let diff = &theta - &c.mean;
            let g = &c.precision * &diff;
            logs.push(c.log_weight_norm - 0.5 * diff.dot(&g));
            grads.push(g);
        }
        (logs, grads)
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn responsibilities(logs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logs);
    logs.iter().map(|l| (l - lse).exp()).collect()
}

impl Energy for Mixture {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, x: &[f64]) -> f64 {
        let (logs, _) = self.terms(x);
        -log_sum_exp(&logs)
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let (logs, grads) = self.terms(x);
        let r = responsibilities(&logs);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (ri, g) in r.iter().zip(&grads) {
            for (o, gi) in out.iter_mut().zip(g.iter()) {
                *o += ri * gi;
            }
        }
    }
    fn hessian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        let (logs, grads) = self.terms(x);
        let r = responsibilities(&logs);
        let mut h = DMatrix::zeros(self.dim, self.dim);
        let mut mean_g = DVector::zeros(self.dim);
        for ((ri, g), c) in r.iter().zip(&grads).zip(&self.components) {
            h += *ri * (&c.precision - g * g.transpose());
            mean_g += *ri * g;
        }
        h += &mean_g * mean_g.transpose();
        Some(h)
    }
}

/// `V(θ) = -log Σ wᵢ N(θ; mᵢ, Σᵢ)`. The density is normalized, so
/// `log_partition = 0`.
pub fn make_gaussian_mixture(components: &[(f64, GaussianSpec)]) -> Result<Potential> {
    let first = components.first().ok_or(Error::Empty("mixture components"))?;
    let dim = first.1.dim();
    let total: f64 = components.iter().map(|(w, _)| w).sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidParameter(format!(
            "mixture weights must sum to 1, got {total}"
        )));
    }
    let mut comps = Vec::with_capacity(components.len());
    for (w, spec) in components {
        if !(*w > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "mixture weights must be positive, got {w}"
            )));
        }
        if spec.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: spec.dim(),
            });
        }
        let chol = spec.covariance.clone().cholesky().expect("checked SPD");
        let log_det = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        comps.push(MixtureComponent {
            log_weight_norm: w.ln() - 0.5 * (dim as f64 * (2.0 * PI).ln() + log_det),
            mean: spec.mean.clone(),
            precision: chol.inverse(),
        });
    }
    Ok(Potential::new(
        "mixture",
        Mixture {
            dim,
            components: comps,
        },
    )
    .with_log_partition(0.0))
}

struct Boltzmann {
    u: Potential,
    k: Potential,
    beta: f64,
}

impl Energy for Boltzmann {
    fn dim(&self) -> usize {
        self.u.dim() + self.k.dim()
    }
    fn value(&self, x: &[f64]) -> f64 {
        let (q, p) = x.split_at(self.u.dim());
        self.beta * (self.u.eval(q) + self.k.eval(p))
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let (q, p) = x.split_at(self.u.dim());
        let (gq, gp) = out.split_at_mut(self.u.dim());
        self.u.grad_into(q, gq);
        self.k.grad_into(p, gp);
        out.iter_mut().for_each(|o| *o *= self.beta);
    }
    fn hessian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        let du = self.u.dim();
        let (q, p) = x.split_at(du);
        let hu = self.u.hessian(q)?;
        let hk = self.k.hessian(p)?;
        let d = self.dim();
        let mut h = DMatrix::zeros(d, d);
        h.view_mut((0, 0), (du, du)).copy_from(&hu);
        h.view_mut((du, du), (d - du, d - du)).copy_from(&hk);
        Some(h * self.beta)
    }
}

/// Boltzmann-Gibbs target on phase space `θ = (q, p)` with `V = β(U(q) + K(p))`.
///
/// The sign is `+β`, so `e^{-V} = e^{-βU} e^{-βK}`. The reading `V = -β(U + K)`
/// gives a non-normalizable `e^{-V}` for confining `U`, `K`.
pub fn make_boltzmann(u: Potential, k: Potential, beta: f64) -> Result<Potential> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "inverse temperature must be positive, got {beta}"
        )));
    }
    let v_star = match (u.v_star, k.v_star) {
        (Some(a), Some(b)) => Some(beta * (a + b)),
        _ => None,
    };
    let name = format!("boltzmann[{};{};{beta}]", u.name(), k.name());
    let mut p = Potential::new(name, Boltzmann { u, k, beta });
    p.v_star = v_star;
    Ok(p)
}

/// Centered finite-difference gradient.
pub fn finite_diff_grad(p: &Potential, theta: &[f64], h: f64) -> Vec<f64> {
    let mut x = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            x[i] = theta[i] + h;
            let up = p.eval(&x);
            x[i] = theta[i] - h;
            let down = p.eval(&x);
            x[i] = theta[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Lower envelope of `|∇V|² / (2(V - V*))` over the probes.
///
/// This is a diagnostic, not a certificate: the true PL constant can be
/// smaller than the value seen on any finite probe set.
pub fn estimate_pl_constant(p: &Potential, probes: &[Vec<f64>]) -> Result<f64> {
    let v_star = p
        .v_star
        .ok_or_else(|| Error::Unsupported("PL estimate needs a known V*".into()))?;
    if probes.is_empty() {
        return Err(Error::Empty("PL probes"));
    }
    let mut best = f64::INFINITY;
    for theta in probes {
        let gap = p.eval(theta) - v_star;
        if gap <= 0.0 {
            continue;
        }
        let g2: f64 = p.grad(theta).iter().map(|g| g * g).sum();
        best = best.min(g2 / (2.0 * gap));
    }
    if best.is_infinite() {
        return Err(Error::Empty("PL probes away from the minimizer"));
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// String identifiers
// ---------------------------------------------------------------------------

/// Grammar of the potential identifiers accepted by [`parse_potential`].
pub const IDENTIFIERS: &[(&str, &str)] = &[
    ("double_well", "V = 3/8 θ⁴ - 3/4 θ² on ℝ"),
    ("quadratic:a1,a2,...", "V = Σ aᵢ θᵢ², all aᵢ > 0"),
    ("pl_not_convex", "V = ½θ₁² on ℝ² (PL with α = 1, not strongly convex)"),
    ("zero[:d]", "V ≡ 0 on ℝ^d (default d = 1)"),
    (
        "posterior:m0,v0,a,s2,y",
        "1-D linear-Gaussian posterior: prior N(m0, v0), y = aθ + N(0, s2)",
    ),
    (
        "mixture:w,m,v;w,m,v;...",
        "1-D Gaussian mixture, weights w summing to 1, means m, variances v",
    ),
    (
        "boltzmann:beta",
        "harmonic oscillator on (q, p): V = β(q²/2 + p²/2)",
    ),
];

fn parse_floats(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim().parse::<f64>().map_err(|_| {
                Error::InvalidParameter(format!("{what}: cannot parse '{}' as a number", t.trim()))
            })
        })
        .collect()
}

/// Resolves a catalog identifier such as `quadratic:0.05,1`.
pub fn parse_potential(id: &str) -> Result<Potential> {
    let id = id.trim();
    let (head, args) = match id.split_once(':') {
        Some((h, a)) => (h.trim(), Some(a)),
        None => (id, None),
    };
    let no_args = |p: Potential| -> Result<Potential> {
        match args {
            None => Ok(p),
            Some(_) => Err(Error::InvalidParameter(format!("'{head}' takes no arguments"))),
        }
    };
    let need = |what: &str| -> Result<&str> {
        args.ok_or_else(|| Error::InvalidParameter(format!("'{head}' needs arguments: {what}")))
    };
    match head {
        "double_well" => no_args(make_double_well()),
        "pl_not_convex" => no_args(make_pl_not_convex()),
        "quadratic" => make_quadratic(&parse_floats(need("a1,a2,...")?, "quadratic")?),
        "zero" => {
            let d = match args {
                None => 1,
                Some(a) => a.trim().parse::<usize>().map_err(|_| {
                    Error::InvalidParameter(format!("zero: bad dimension '{a}'"))
                })?,
            };
            if d == 0 {
                return Err(Error::InvalidParameter("zero: dimension must be positive".into()));
            }
            Ok(make_free(d))
        }
        "posterior" => {
            let v = parse_floats(need("m0,v0,a,s2,y")?, "posterior")?;
            if v.len() != 5 {
                return Err(Error::InvalidParameter(format!(
                    "posterior expects 5 numbers, got {}",
                    v.len()
                )));
            }
            let prior = GaussianSpec::scalar(v[0], v[1])?;
            let (p, _) = make_gaussian_posterior(
                &prior,
                &DMatrix::from_element(1, 1, v[2]),
                &DMatrix::from_element(1, 1, v[3]),
                &DVector::from_element(1, v[4]),
            )?;
            Ok(p)
        }
        "mixture" => {
            let mut comps = Vec::new();
            for part in need("w,m,v;...")?.split(';').filter(|s| !s.trim().is_empty()) {
                let v = parse_floats(part, "mixture")?;
                if v.len() != 3 {
                    return Err(Error::InvalidParameter(format!(
                        "mixture component '{part}' must be w,m,v"
                    )));
                }
                comps.push((v[0], GaussianSpec::scalar(v[1], v[2])?));
            }
            make_gaussian_mixture(&comps)
        }
        "boltzmann" => {
            let beta = parse_floats(need("beta")?, "boltzmann")?;
            if beta.len() != 1 {
                return Err(Error::InvalidParameter("boltzmann expects one number".into()));
            }
            let half = make_quadratic(&[0.5])?;
            make_boltzmann(half.clone(), half, beta[0])
        }
        other => Err(Error::InvalidParameter(format!("unknown potential '{other}'"))),
    }
    .map(|mut p| {
        p.name = id.to_string();
        p
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn double_well_critical_points_and_values() {
        let p = make_double_well();
        assert_eq!(p.grad(&[0.0])[0], 0.0);
        assert_eq!(p.grad(&[1.0])[0], 0.0);
        assert_eq!(p.grad(&[-1.0])[0], 0.0);
        assert_eq!(p.eval(&[1.0]), -0.375);
        assert_abs_diff_eq!(p.grad(&[2.0])[0], 9.0, epsilon = 1e-15);
        assert_abs_diff_eq!(finite_diff_grad(&p, &[2.0], 1e-5)[0], 9.0, epsilon = 1e-6);
        assert_eq!(p.v_star, Some(-0.375));
        assert!(p.alpha.is_none());
    }

    #[test]
    fn double_well_minimum_by_grid_search() {
        // Independent check of V* = -3/8 by brute force minimization.
        let p = make_double_well();
        let (mut best_x, mut best_v) = (0.0, f64::INFINITY);
        for k in 0..=40_000 {
            let x = -2.0 + k as f64 * 1e-4;
            let v = p.eval(&[x]);
            if v < best_v {
                best_v = v;
                best_x = x;
            }
        }
        assert_abs_diff_eq!(best_v, -0.375, epsilon = 1e-7);
        assert_abs_diff_eq!(best_x.abs(), 1.0, epsilon = 1e-3);
    }

    #[test]
    fn quadratic_constants_and_derivatives() {
        let p = make_quadratic(&[0.5]).unwrap();
        assert_eq!(p.alpha, Some(1.0));
        assert_eq!(p.lipschitz, Some(1.0));
        let q = make_quadratic(&[0.05, 1.0]).unwrap();
        assert_eq!(q.grad(&[1.0, 1.0]), vec![0.1, 2.0]);
        let h = q.hessian(&[3.0, -1.0]).unwrap();
        assert_eq!(h, DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, 2.0]));
        assert_abs_diff_eq!(finite_diff_grad(&make_quadratic(&[1.0]).unwrap(), &[3.0], 1e-5)[0], 6.0, epsilon = 1e-8);
    }

    #[test]
    fn quadratic_rejects_nonpositive() {
        assert!(matches!(make_quadratic(&[1.0, 0.0]), Err(Error::InvalidParameter(_))));
        assert!(matches!(make_quadratic(&[-2.0]), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn pl_not_convex_examples() {
        let p = make_pl_not_convex();
        assert_eq!(p.grad(&[0.0, 5.0]), vec![0.0, 0.0]);
        assert_eq!(p.eval(&[2.0, 7.0]), 2.0);
        let probes = vec![vec![1.0, 3.0], vec![-0.2, 0.0], vec![5.0, -4.0]];
        assert_abs_diff_eq!(estimate_pl_constant(&p, &probes).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn posterior_scalar_matches_conjugate_formula() {
        // Completing the square: precision 1 + 1 = 2, mean (0 + 2)/2 = 1.
        let prior = GaussianSpec::scalar(0.0, 1.0).unwrap();
        let (p, post) = make_gaussian_posterior(
            &prior,
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 1.0),
            &DVector::from_element(1, 2.0),
        )
        .unwrap();
        assert_abs_diff_eq!(post.mean[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(post.covariance[(0, 0)], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(p.alpha.unwrap(), 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(p.grad(&[1.0])[0], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn posterior_without_data_is_prior() {
        let prior = GaussianSpec::scalar(0.7, 2.5).unwrap();
        let (_, post) = make_gaussian_posterior(
            &prior,
            &DMatrix::from_element(1, 1, 0.0),
            &DMatrix::from_element(1, 1, 1.0),
            &DVector::from_element(1, 3.0),
        )
        .unwrap();
        assert_abs_diff_eq!(post.mean[0], 0.7, epsilon = 1e-14);
        assert_abs_diff_eq!(post.covariance[(0, 0)], 2.5, epsilon = 1e-14);
    }

    #[test]
    fn posterior_two_dimensional() {
        let prior = GaussianSpec::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let (_, post) = make_gaussian_posterior(
            &prior,
            &DMatrix::identity(2, 2),
            &DMatrix::identity(2, 2),
            &DVector::from_vec(vec![2.0, 0.0]),
        )
        .unwrap();
        assert_abs_diff_eq!(post.mean[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(post.mean[1], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(post.covariance, DMatrix::identity(2, 2) * 0.5, epsilon = 1e-14);
    }

    #[test]
    fn posterior_errors() {
        let prior = GaussianSpec::scalar(0.0, 1.0).unwrap();
        let bad_design = DMatrix::from_element(1, 2, 1.0);
        assert!(matches!(
            make_gaussian_posterior(
                &prior,
                &bad_design,
                &DMatrix::from_element(1, 1, 1.0),
                &DVector::from_element(1, 0.0)
            ),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            make_gaussian_posterior(
                &prior,
                &DMatrix::from_element(1, 1, 1.0),
                &DMatrix::from_element(1, 1, -1.0),
                &DVector::from_element(1, 0.0)
            ),
            Err(Error::NotPositiveDefinite(_))
        ));
        assert!(GaussianSpec::new(DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_err());
    }

    #[test]
    fn mixture_of_one_is_gaussian_energy() {
        let p = make_gaussian_mixture(&[(1.0, GaussianSpec::scalar(0.0, 1.0).unwrap())]).unwrap();
        for x in [-2.0, 0.0, 0.3, 4.0] {
            assert_abs_diff_eq!(p.eval(&[x]), x * x / 2.0 + 0.5 * (2.0 * PI).ln(), epsilon = 1e-13);
        }
        assert_eq!(p.log_partition, Some(0.0));
    }

    #[test]
    fn symmetric_mixture_is_even() {
        let p = parse_potential("mixture:0.5,-2,0.25;0.5,2,0.25").unwrap();
        for k in 0..50 {
            let x = -5.0 + 0.2 * k as f64;
            assert_abs_diff_eq!(p.eval(&[x]), p.eval(&[-x]), epsilon = 1e-12);
        }
    }

    #[test]
    fn separated_mixture_mode_is_stationary() {
        let p = parse_potential("mixture:0.5,-4,0.25;0.5,4,0.25").unwrap();
        // Locate the mode numerically by Newton from the component mean.
        let mut x = 4.0;
        for _ in 0..50 {
            x -= p.grad(&[x])[0] / p.hessian(&[x]).unwrap()[(0, 0)];
        }
        assert!(p.grad(&[x])[0].abs() < 1e-6);
        assert!(finite_diff_grad(&p, &[x], 1e-5)[0].abs() < 1e-6);
    }

    #[test]
    fn mixture_validation() {
        assert!(matches!(make_gaussian_mixture(&[]), Err(Error::Empty(_))));
        let g = GaussianSpec::scalar(0.0, 1.0).unwrap();
        assert!(make_gaussian_mixture(&[(0.5, g.clone()), (0.6, g)]).is_err());
    }

    #[test]
    fn boltzmann_examples() {
        let half = make_quadratic(&[0.5]).unwrap();
        let b1 = make_boltzmann(half.clone(), half.clone(), 1.0).unwrap();
        let b2 = make_boltzmann(half.clone(), half.clone(), 2.0).unwrap();
        assert_abs_diff_eq!(b1.eval(&[1.5, -2.0]), (1.5f64.powi(2) + 4.0) / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b2.eval(&[1.5, -2.0]), 2.0 * b1.eval(&[1.5, -2.0]), epsilon = 1e-15);
        assert_eq!(b1.grad(&[0.3, -7.0])[0], b1.grad(&[0.3, 11.0])[0]);
        assert!(make_boltzmann(half.clone(), half, 0.0).is_err());
    }

    #[test]
    fn pl_estimates() {
        let q = make_quadratic(&[0.5]).unwrap();
        let probes: Vec<Vec<f64>> = (1..20).map(|k| vec![k as f64 * 0.37 - 3.0]).collect();
        assert_abs_diff_eq!(estimate_pl_constant(&q, &probes).unwrap(), 1.0, epsilon = 1e-12);

        // Brute-force ratio on a probe grid in (0, 1) for the double well.
        let dw = make_double_well();
        let probes: Vec<Vec<f64>> = (1..100).map(|k| vec![k as f64 / 100.0]).collect();
        let expected = probes
            .iter()
            .map(|t| {
                let x = t[0];
                let g = 1.5 * x * (x * x - 1.0);
                let gap = 0.375 * x.powi(4) - 0.75 * x * x + 0.375;
                g * g / (2.0 * gap)
            })
            .fold(f64::INFINITY, f64::min);
        let est = estimate_pl_constant(&dw, &probes).unwrap();
        assert_abs_diff_eq!(est, expected, epsilon = 1e-12);
        assert!(est < 1.0);

        let no_star = Potential::from_fn("f", 1, |x| x[0], |_, g| g[0] = 1.0);
        assert!(matches!(estimate_pl_constant(&no_star, &probes), Err(Error::Unsupported(_))));
    }

    #[test]
    fn identifiers() {
        assert_eq!(parse_potential("double_well").unwrap().dim(), 1);
        assert_eq!(parse_potential("quadratic:0.05, 1").unwrap().dim(), 2);
        assert_eq!(parse_potential("boltzmann:2").unwrap().dim(), 2);
        assert_eq!(parse_potential("zero:3").unwrap().dim(), 3);
        let post = parse_potential("posterior:0,1,1,1,2").unwrap();
        assert_abs_diff_eq!(post.grad(&[1.0])[0], 0.0, epsilon = 1e-14);
        assert!(parse_potential("banana").is_err());
        assert!(parse_potential("double_well:3").is_err());
        assert!(parse_potential("quadratic").is_err());
        assert!(parse_potential("quadratic:1,x").is_err());
    }

    #[test]
    fn shift_preserves_gradient() {
        let p = make_double_well();
        let s = p.shifted(3.0);
        assert_eq!(s.grad(&[0.7]), p.grad(&[0.7]));
        assert_abs_diff_eq!(s.eval(&[0.7]), p.eval(&[0.7]) + 3.0, epsilon = 1e-15);
        assert_eq!(s.v_star, Some(2.625));
    }
}
