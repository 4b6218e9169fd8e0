//! WebAssembly bindings for the static page in `www/`.
//!
//! Three operations: gradient-descent trajectories on the double well, a
//! Fokker-Planck density evolving in time, and ULA vs birth-death particle
//! histograms on a bimodal target. All numbers cross the boundary as flat
//! `Float64Array`s.

use gradflow::density::{histogram, kl_divergence, target_density, Grid1D, GridDensity};
use gradflow::fpe::{gaussian_on_grid, FpeState, FpeVariant};
use gradflow::optimize::{run_flow, ExplicitEuler};
use gradflow::potentials::{make_double_well, parse_potential};
use gradflow::rng::RngStream;
use gradflow::sample::{Bandwidth, Ensemble, Method, Sampler};
use wasm_bindgen::prelude::*;

fn js_err(e: gradflow::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Gradient descent on the double well from each of `inits`. Returns the
/// trajectories back to back, each `steps + 1` states long (fewer if one
/// stops early at a stationary point, in which case it is padded with its
/// last state).
#[wasm_bindgen]
pub fn gd_trajectories(inits: &[f64], tau: f64, steps: usize) -> Result<Vec<f64>, JsError> {
    let p = make_double_well();
    let mut out = Vec::with_capacity(inits.len() * (steps + 1));
    for x0 in inits {
        let traj = run_flow(&p, &mut ExplicitEuler { tau }, &[*x0], steps).map_err(js_err)?;
        let mut xs: Vec<f64> = traj.states.iter().map(|s| s[0]).collect();
        let last = *xs.last().unwrap_or(x0);
        xs.resize(steps + 1, last);
        out.extend(xs);
    }
    Ok(out)
}

/// A Fokker-Planck density on a 1-D grid, advanced on demand.
#[wasm_bindgen]
pub struct FpeDemo {
    state: FpeState,
    target: GridDensity,
    variant: FpeVariant,
}

#[wasm_bindgen]
impl FpeDemo {
    /// `variant` is `"fpe"`, `"fpe_weighted"` or `"fpe_bdl"`; the initial
    /// density is `N(mean, var)`.
    #[wasm_bindgen(constructor)]
    pub fn new(potential: &str, lo: f64, hi: f64, n: usize, mean: f64, var: f64, variant: &str) -> Result<FpeDemo, JsError> {
        let p = parse_potential(potential).map_err(js_err)?;
        let grid = Grid1D::from_cells(lo, hi, n).map_err(js_err)?;
        let variant = match variant {
            "fpe" => FpeVariant::Standard,
            "fpe_weighted" => FpeVariant::Weighted(Default::default()),
            "fpe_bdl" => FpeVariant::BirthDeath,
            other => return Err(JsError::new(&format!("unknown variant '{other}'"))),
        };
        let target = target_density(&p, grid).map_err(js_err)?;
        let rho = gaussian_on_grid(grid, mean, var).map_err(js_err)?;
        let state = FpeState::new(p, rho).map_err(js_err)?;
        Ok(FpeDemo { state, target, variant })
    }

    /// Advances by `duration` using stable sub-steps.
    pub fn advance(&mut self, duration: f64) -> Result<(), JsError> {
        let t = self.state.time + duration;
        let dt = 0.5 * self.state.max_stable_dt_at(self.state.mobility(self.variant).map_err(js_err)?);
        self.state.evolve(self.variant, &[t], dt).map_err(js_err)?;
        Ok(())
    }

    pub fn time(&self) -> f64 {
        self.state.time
    }

    pub fn centers(&self) -> Vec<f64> {
        self.state.grid().centers()
    }

    pub fn density(&self) -> Vec<f64> {
        self.state.density.values.clone()
    }

    pub fn target(&self) -> Vec<f64> {
        self.target.values.clone()
    }

    pub fn kl(&self) -> f64 {
        kl_divergence(&self.state.density, &self.target).unwrap_or(f64::NAN)
    }
}

/// Runs ULA and birth-death Langevin from `N(-2, 1/4)` on the symmetric
/// mixture with modes at ±2 and returns `[ula_hist, bdl_hist, target]`
/// concatenated, each with `bins` values on `[-4, 4]`, followed by the two
/// right-mode fractions.
#[wasm_bindgen]
pub fn bimodal_histograms(seed: u64, particles: usize, horizon: f64, tau: f64, bins: usize) -> Result<Vec<f64>, JsError> {
    let p = parse_potential("mixture:0.5,-2,0.25;0.5,2,0.25").map_err(js_err)?;
    let grid = Grid1D::from_cells(-4.0, 4.0, bins).map_err(js_err)?;
    let steps = (horizon / tau).round() as usize;
    let mut out = Vec::with_capacity(3 * bins + 2);
    let mut right = Vec::new();
    for method in [Method::Ula, Method::Bdl { bandwidth: Bandwidth::Auto }] {
        let rng = RngStream::new(seed);
        let init: Vec<f64> = (0..particles)
            .map(|k| -2.0 + 0.5 * rng.substream_for(gradflow::rng::Purpose::Init, k as u64, 0).gaussian())
            .collect();
        let ens = Ensemble::new(1, init, rng).map_err(js_err)?;
        let mut s = Sampler::new(method, p.clone(), ens, tau).map_err(js_err)?;
        for _ in 0..steps {
            s.step().map_err(js_err)?;
        }
        let pos = s.ensemble().positions();
        out.extend(histogram(pos, grid).map_err(js_err)?.density.values);
        right.push(pos.iter().filter(|x| **x > 0.0).count() as f64 / particles as f64);
    }
    out.extend(target_density(&p, grid).map_err(js_err)?.values);
    out.extend(right);
    Ok(out)
}
