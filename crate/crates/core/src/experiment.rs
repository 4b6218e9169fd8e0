//! Declarative experiments.
//!
//! A config is a TOML document with the sections `[experiment]`,
//! `[problem]`, `[init]`, `[run]`, `[grid]`, `[analysis]`, `[outputs]` and
//! any number of `[[check]]` tables. Unknown keys are rejected. See
//! `configs/` for one recipe per acceptance experiment.
//!
//! Running an experiment writes the declared artifacts, a `metrics` file
//! (`name = value` lines in name order) and `manifest.toml` into an output
//! directory. All data artifacts are byte-identical across reruns with the
//! same seed, whatever the worker count.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::density::{
    fmt_real, histogram, kl_divergence, l2_pi_inv_norm, moments, target_density, tv_distance, Grid1D,
    GridDensity,
};
use crate::error::Error;
use crate::fpe::{decay_report, gaussian_on_grid, point_masses, FpeState, FpeVariant};
use crate::optimize::{
    run_flow, verify_rates, Bfgs, ExplicitEuler, ImplicitEuler, Mirror, MirrorMap, Preconditioned,
    PreconditionerField, Stepper, Trajectory, DEFAULT_PROXIMAL_TOL,
};
use crate::potentials::{parse_potential, Potential};
use crate::rng::{Purpose, RngStream};
use crate::sample::{
    integrated_autocorrelation_time, mala_acceptance, ula_step, Bandwidth, Ensemble, Method, Mobility,
    Sampler,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Gd,
    GdImplicit,
    Newton,
    Bfgs,
    Mirror,
    Ula,
    Mala,
    Ensemble,
    Bdl,
    Fpe,
    FpeWeighted,
    FpeBdl,
}

impl MethodName {
    pub const ALL: [&'static str; 12] = [
        "gd",
        "gd_implicit",
        "newton",
        "bfgs",
        "mirror",
        "ula",
        "mala",
        "ensemble",
        "bdl",
        "fpe",
        "fpe_weighted",
        "fpe_bdl",
    ];

    pub fn is_stochastic(self) -> bool {
        matches!(self, Self::Ula | Self::Mala | Self::Ensemble | Self::Bdl)
    }

    pub fn is_grid(self) -> bool {
        matches!(self, Self::Fpe | Self::FpeWeighted | Self::FpeBdl)
    }

    pub fn is_optimizer(self) -> bool {
        !self.is_stochastic() && !self.is_grid()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MobilityName {
    Covariance,
    InverseCovariance,
}

impl From<MobilityName> for Mobility {
    fn from(m: MobilityName) -> Self {
        match m {
            MobilityName::Covariance => Mobility::Covariance,
            MobilityName::InverseCovariance => Mobility::InverseCovariance,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MirrorName {
    Quadratic,
    NegativeEntropy,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// `n` cells tiling `[lo, hi]`.
    #[default]
    Cells,
    /// `n` cell centers from `lo` to `hi` inclusive.
    Nodes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    /// Standard Fokker-Planck solution from the same initial condition.
    Fpe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub method: MethodName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "one")]
    pub workers: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub potential: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSection {
    /// Optimizers: one trajectory per point. Particles: points are assigned
    /// round-robin. Grids: equal point masses.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<Vec<f64>>>,
    /// Gaussian initial law with diagonal covariance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance: Option<Vec<f64>>,
    /// Grids only: start at the discretized target.
    #[serde(default, skip_serializing_if = "is_false")]
    pub target: bool,
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Step size; for grid methods an upper bound on the time step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    /// Final time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    /// Final step count, as an alternative to `horizon`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub particles: Option<usize>,
    /// Record every `thin`-th step for time averages.
    #[serde(default = "one_u64")]
    pub thin: u64,
    /// Times at which histograms, densities and samples are written.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshots: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ridge: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mobility: Option<MobilityName>,
    /// Fixed KDE bandwidth for `bdl`; Silverman's rule when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
    /// Inner tolerance of `gd_implicit`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mirror: Option<MirrorName>,
}

fn one_u64() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default = "default_lo")]
    pub lo: f64,
    #[serde(default = "default_hi")]
    pub hi: f64,
    pub n: usize,
    #[serde(default)]
    pub layout: Layout,
}

/// Default truncated domain `[-6, 6]`.
fn default_lo() -> f64 {
    -6.0
}

fn default_hi() -> f64 {
    6.0
}

impl GridSection {
    pub fn build(&self) -> crate::Result<Grid1D> {
        match self.layout {
            Layout::Cells => Grid1D::from_cells(self.lo, self.hi, self.n),
            Layout::Nodes => Grid1D::from_nodes(self.lo, self.hi, self.n),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    /// Time discarded before time averages and autocorrelation estimates.
    #[serde(default)]
    pub burn_in: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_variance: Option<Vec<f64>>,
    /// Estimate per-axis integrated autocorrelation times.
    #[serde(default, skip_serializing_if = "is_false")]
    pub iat: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Reference>,
    /// Merge this many grid cells for histograms and comparisons.
    #[serde(default = "one")]
    pub coarsen: usize,
    /// `mala` only: probe the detailed-balance identity on this many pairs.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub detailed_balance_pairs: usize,
    /// Threshold for `right_mass`.
    #[serde(default)]
    pub split: f64,
}

fn is_zero(n: &usize) -> bool {
    *n == 0
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            burn_in: 0.0,
            expected_variance: None,
            iat: false,
            reference: None,
            coarsen: 1,
            detailed_balance_pairs: 0,
            split: 0.0,
        }
    }
}

/// Artifact paths relative to the output directory. A `{}` in a path is
/// replaced by the trajectory or snapshot index; without one, several files
/// get `_k` before the extension.
///
/// - `trajectory`: optimizer trajectories (`step,time,theta_i,energy,grad_norm`).
/// - `histogram`: particle histograms per snapshot; for grid methods, the target.
/// - `density`: grid densities per snapshot; for particle runs, the reference
///   solution per snapshot, or the target when there is no reference.
/// - `rates`: rate-bound table (optimizers), decay report (grid methods) or
///   chain statistics (particles).
/// - `samples`: particle positions at each snapshot (`step,time,particle,theta_i`).
/// - `metrics`: every scalar metric, `name = value`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputsSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histogram: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rates: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<String>,
}

/// An assertion on one metric. Bounds `min`/`max` are inclusive,
/// `above`/`below` strict; `target` with `tol` requires `|value - target| ≤ tol`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Check {
    pub metric: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub above: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub below: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
}

impl Check {
    pub fn passes(&self, v: f64) -> bool {
        !v.is_nan()
            && self.min.is_none_or(|m| v >= m)
            && self.max.is_none_or(|m| v <= m)
            && self.above.is_none_or(|m| v > m)
            && self.below.is_none_or(|m| v < m)
            && self.target.is_none_or(|t| (v - t).abs() <= self.tol.unwrap_or(0.0))
    }

    pub fn describe(&self) -> String {
        let mut parts = Vec::new();
        if let Some(m) = self.min {
            parts.push(format!(">= {m}"));
        }
        if let Some(m) = self.max {
            parts.push(format!("<= {m}"));
        }
        if let Some(m) = self.above {
            parts.push(format!("> {m}"));
        }
        if let Some(m) = self.below {
            parts.push(format!("< {m}"));
        }
        if let Some(t) = self.target {
            parts.push(format!("= {t} ± {}", self.tol.unwrap_or(0.0)));
        }
        format!("{} {}", self.metric, parts.join(", "))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub problem: ProblemSection,
    #[serde(default)]
    pub init: InitSection,
    pub run: RunSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSection>,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub outputs: OutputsSection,
    #[serde(default, rename = "check", skip_serializing_if = "Vec::is_empty")]
    pub checks: Vec<Check>,
}

/// One problem found while reading a config.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigIssue {
    /// 1-based line, when it can be located.
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

/// Every problem found in a config, not just the first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<ConfigIssue>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, e) in self.0.iter().enumerate() {
            if k > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Str,
    Int,
    Float,
    Bool,
    Floats,
    Points,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Str => "a string",
            Kind::Int => "a nonnegative integer",
            Kind::Float => "a number",
            Kind::Bool => "a boolean",
            Kind::Floats => "an array of numbers",
            Kind::Points => "an array of arrays of numbers",
        }
    }
}

const SCHEMA: &[(&str, &[(&str, Kind)])] = &[
    (
        "experiment",
        &[("name", Kind::Str), ("method", Kind::Str), ("seed", Kind::Int), ("workers", Kind::Int)],
    ),
    ("problem", &[("potential", Kind::Str)]),
    (
        "init",
        &[("points", Kind::Points), ("mean", Kind::Floats), ("variance", Kind::Floats), ("target", Kind::Bool)],
    ),
    (
        "run",
        &[
            ("tau", Kind::Float),
            ("horizon", Kind::Float),
            ("steps", Kind::Int),
            ("particles", Kind::Int),
            ("thin", Kind::Int),
            ("snapshots", Kind::Floats),
            ("ridge", Kind::Float),
            ("mobility", Kind::Str),
            ("bandwidth", Kind::Float),
            ("tol", Kind::Float),
            ("mirror", Kind::Str),
        ],
    ),
    ("grid", &[("lo", Kind::Float), ("hi", Kind::Float), ("n", Kind::Int), ("layout", Kind::Str)]),
    (
        "analysis",
        &[
            ("burn_in", Kind::Float),
            ("expected_variance", Kind::Floats),
            ("iat", Kind::Bool),
            ("reference", Kind::Str),
            ("coarsen", Kind::Int),
            ("detailed_balance_pairs", Kind::Int),
            ("split", Kind::Float),
        ],
    ),
    (
        "outputs",
        &[
            ("trajectory", Kind::Str),
            ("histogram", Kind::Str),
            ("density", Kind::Str),
            ("metrics", Kind::Str),
            ("rates", Kind::Str),
            ("samples", Kind::Str),
        ],
    ),
    (
        "check",
        &[
            ("metric", Kind::Str),
            ("min", Kind::Float),
            ("max", Kind::Float),
            ("above", Kind::Float),
            ("below", Kind::Float),
            ("target", Kind::Float),
            ("tol", Kind::Float),
        ],
    ),
];

const STRING_CHOICES: &[(&str, &str, &[&str])] = &[
    ("experiment", "method", &MethodName::ALL),
    ("run", "mobility", &["covariance", "inverse_covariance"]),
    ("run", "mirror", &["quadratic", "negative_entropy"]),
    ("grid", "layout", &["cells", "nodes"]),
    ("analysis", "reference", &["fpe"]),
];

/// Finds the line of `key` inside the `occurrence`-th `[section]` (or
/// `[[section]]`) table, or of the header itself when `key` is `None`.
fn locate(text: &str, section: &str, occurrence: usize, key: Option<&str>) -> Option<usize> {
    let mut current: Option<(String, usize)> = None;
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            let name = line.trim_start_matches('[').split(']').next().unwrap_or("").trim().to_string();
            let count = seen.entry(name.clone()).or_insert(0);
            current = Some((name.clone(), *count));
            *count += 1;
            if key.is_none() && name == section && current.as_ref().map(|c| c.1) == Some(occurrence) {
                return Some(k + 1);
            }
            continue;
        }
        if let (Some(key), Some((name, occ))) = (key, &current) {
            if name == section && *occ == occurrence {
                if let Some(rest) = line.strip_prefix(key) {
                    let rest = rest.trim_start();
                    if rest.starts_with('=') {
                        return Some(k + 1);
                    }
                }
            }
        }
    }
    None
}

fn check_kind(v: &mut Value, kind: Kind) -> bool {
    match (kind, &*v) {
        (Kind::Str, Value::String(_)) | (Kind::Bool, Value::Boolean(_)) | (Kind::Float, Value::Float(_)) => true,
        (Kind::Int, Value::Integer(i)) => *i >= 0,
        (Kind::Float, Value::Integer(i)) => {
            *v = Value::Float(*i as f64);
            true
        }
        (Kind::Floats, Value::Array(_)) => {
            let Value::Array(a) = v else { unreachable!() };
            a.iter_mut().all(|x| check_kind(x, Kind::Float))
        }
        (Kind::Points, Value::Array(_)) => {
            let Value::Array(a) = v else { unreachable!() };
            a.iter_mut().all(|x| check_kind(x, Kind::Floats))
        }
        _ => false,
    }
}

/// Parses and validates a config, collecting every problem found.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigErrors> {
    let mut root: Table = text.parse().map_err(|e: toml::de::Error| {
        let line = e.span().map(|s| text[..s.start.min(text.len())].lines().count().max(1));
        ConfigErrors(vec![ConfigIssue {
            line,
            message: e.message().trim().to_string(),
        }])
    })?;
    let mut issues = Vec::new();
    let mut issue = |line: Option<usize>, message: String| issues.push(ConfigIssue { line, message });

    for (name, _) in root.iter() {
        if !SCHEMA.iter().any(|(s, _)| s == name) {
            issue(locate(text, name, 0, None), format!("unknown section [{name}]"));
        }
    }
    for (section, keys) in SCHEMA {
        let tables: Vec<&mut Table> = match root.get_mut(*section) {
            None => continue,
            Some(Value::Table(t)) if *section != "check" => vec![t],
            Some(Value::Array(arr)) if *section == "check" => {
                let mut out = Vec::new();
                for v in arr.iter_mut() {
                    match v {
                        Value::Table(t) => out.push(t),
                        _ => issue(None, "[[check]] entries must be tables".into()),
                    }
                }
                out
            }
            Some(_) => {
                issue(locate(text, section, 0, None), format!("[{section}] must be a table"));
                continue;
            }
        };
        for (occ, table) in tables.into_iter().enumerate() {
            for (key, value) in table.iter_mut() {
                let line = locate(text, section, occ, Some(key));
                match keys.iter().find(|(k, _)| k == key) {
                    None => issue(line, format!("unknown key `{key}` in [{section}]")),
                    Some((_, kind)) => {
                        if !check_kind(value, *kind) {
                            issue(line, format!("`{section}.{key}` must be {}", kind.name()));
                        } else if let Some((_, _, choices)) =
                            STRING_CHOICES.iter().find(|(s, k, _)| s == section && k == key)
                        {
                            let s = value.as_str().unwrap_or_default();
                            if !choices.contains(&s) {
                                issue(
                                    line,
                                    format!("`{section}.{key}` = \"{s}\" is not one of: {}", choices.join(", ")),
                                );
                            }
                        }
                    }
                }
            }
        }
    }
    for (section, required) in [
        ("experiment", &["name", "method"][..]),
        ("problem", &["potential"][..]),
        ("run", &[][..]),
    ] {
        match root.get(section) {
            None => issue(None, format!("missing section [{section}]")),
            Some(Value::Table(t)) => {
                for key in required {
                    if !t.contains_key(*key) {
                        issue(
                            locate(text, section, 0, None),
                            format!("missing required field `{section}.{key}`"),
                        );
                    }
                }
            }
            Some(_) => {}
        }
    }
    if let Some(Value::Table(g)) = root.get("grid") {
        for key in ["n"] {
            if !g.contains_key(key) {
                issue(locate(text, "grid", 0, None), format!("missing required field `grid.{key}`"));
            }
        }
    }
    if let Some(Value::Array(checks)) = root.get("check") {
        for (occ, c) in checks.iter().enumerate() {
            if let Value::Table(t) = c {
                if !t.contains_key("metric") {
                    issue(locate(text, "check", occ, None), "missing required field `check.metric`".into());
                }
            }
        }
    }
    if !issues.is_empty() {
        return Err(ConfigErrors(issues));
    }
    let cfg: ExperimentConfig = Value::Table(root).try_into().map_err(|e: toml::de::Error| {
        ConfigErrors(vec![ConfigIssue {
            line: None,
            message: e.message().trim().to_string(),
        }])
    })?;
    let semantic = semantic_issues(&cfg, text);
    if semantic.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigErrors(semantic))
    }
}

fn semantic_issues(cfg: &ExperimentConfig, text: &str) -> Vec<ConfigIssue> {
    let mut out = Vec::new();
    let mut at = |section: &str, key: &str, message: String| {
        out.push(ConfigIssue {
            line: locate(text, section, 0, Some(key)).or_else(|| locate(text, section, 0, None)),
            message,
        })
    };
    let m = cfg.experiment.method;
    let run = &cfg.run;
    let potential = match parse_potential(&cfg.problem.potential) {
        Ok(p) => Some(p),
        Err(e) => {
            at("problem", "potential", e.to_string());
            None
        }
    };
    if m.is_stochastic() {
        if cfg.experiment.seed.is_none() {
            at("experiment", "seed", format!("method `{}` requires `experiment.seed`", method_str(m)));
        }
        match run.particles {
            None => at("run", "particles", format!("method `{}` requires `run.particles`", method_str(m))),
            Some(0) => at("run", "particles", "`run.particles` must be positive".into()),
            Some(1) if m == MethodName::Bdl => {
                at("run", "particles", "method `bdl` needs at least 2 particles".into())
            }
            _ => {}
        }
    }
    if !m.is_grid() {
        match run.tau {
            None => at("run", "tau", format!("method `{}` requires `run.tau`", method_str(m))),
            Some(t) if !(t > 0.0) => at("run", "tau", "`run.tau` must be positive".into()),
            _ => {}
        }
    } else if let Some(t) = run.tau {
        if !(t > 0.0) {
            at("run", "tau", "`run.tau` must be positive".into());
        }
    }
    if run.horizon.is_none() && run.steps.is_none() && run.snapshots.is_none() {
        at("run", "horizon", "one of `run.horizon`, `run.steps` or `run.snapshots` is required".into());
    }
    if run.horizon.is_some() && run.steps.is_some() {
        at("run", "steps", "give either `run.horizon` or `run.steps`, not both".into());
    }
    if let Some(h) = run.horizon {
        if !(h >= 0.0) {
            at("run", "horizon", "`run.horizon` must be nonnegative".into());
        }
    }
    if run.thin == 0 {
        at("run", "thin", "`run.thin` must be positive".into());
    }
    if let Some(s) = &run.snapshots {
        if s.iter().any(|t| !(*t >= 0.0)) || s.windows(2).any(|w| w[1] < w[0]) {
            at("run", "snapshots", "`run.snapshots` must be nonnegative and nondecreasing".into());
        }
    }
    if let Some(tau) = run.tau.filter(|t| *t > 0.0 && !m.is_grid()) {
        for (key, t) in run
            .horizon
            .iter()
            .map(|h| ("horizon", *h))
            .chain(run.snapshots.iter().flatten().map(|s| ("snapshots", *s)))
        {
            if !on_step(t, tau) {
                at("run", key, format!("time {t} is not a multiple of tau = {tau}"));
            }
        }
    }
    if let Some(b) = run.bandwidth {
        if !(b > 0.0) {
            at("run", "bandwidth", "`run.bandwidth` must be positive".into());
        }
    }
    if let Some(r) = run.ridge {
        if !(r >= 0.0) {
            at("run", "ridge", "`run.ridge` must be nonnegative".into());
        }
    }
    if cfg.experiment.workers == 0 {
        at("experiment", "workers", "`experiment.workers` must be positive".into());
    }

    let init = &cfg.init;
    let sources = init.points.is_some() as u8 + init.mean.is_some() as u8 + init.target as u8;
    if sources == 0 {
        at("init", "points", "[init] needs `points`, `mean` with `variance`, or `target`".into());
    }
    if sources > 1 {
        at("init", "points", "[init] takes only one of `points`, `mean`, `target`".into());
    }
    if init.mean.is_some() != init.variance.is_some() {
        at("init", "mean", "`init.mean` and `init.variance` go together".into());
    }
    if init.target && !m.is_grid() {
        at("init", "target", "`init.target` applies to grid methods only".into());
    }
    if init.mean.is_some() && m.is_optimizer() {
        at("init", "mean", "optimizers start from `init.points`".into());
    }
    if let Some(v) = &init.variance {
        if v.iter().any(|x| !(*x > 0.0)) {
            at("init", "variance", "`init.variance` must be positive".into());
        }
    }
    if let Some(p) = &potential {
        let d = p.dim();
        let bad_points = init.points.iter().flatten().any(|x| x.len() != d);
        if bad_points || init.points.as_ref().is_some_and(|p| p.is_empty()) {
            at("init", "points", format!("every point must have dimension {d}"));
        }
        for (key, v) in [("mean", &init.mean), ("variance", &init.variance)] {
            if v.as_ref().is_some_and(|v| v.len() != d) {
                at("init", key, format!("`init.{key}` must have length {d}"));
            }
        }
        if let Some(v) = &cfg.analysis.expected_variance {
            if v.len() != d {
                at("analysis", "expected_variance", format!("must have length {d}"));
            }
        }
        if (m.is_grid() || cfg.outputs.histogram.is_some() || cfg.analysis.reference.is_some()) && d != 1 {
            at("problem", "potential", "grid densities need a one-dimensional potential".into());
        }
    }
    if m.is_grid() || cfg.outputs.histogram.is_some() || cfg.analysis.reference.is_some() {
        match &cfg.grid {
            None => at("grid", "lo", "a [grid] section is required".into()),
            Some(g) => {
                if let Err(e) = g.build() {
                    at("grid", "n", e.to_string());
                } else if cfg.analysis.coarsen == 0 || g.n % cfg.analysis.coarsen != 0 {
                    at("analysis", "coarsen", format!("`analysis.coarsen` must divide grid.n = {}", g.n));
                }
            }
        }
    }
    if cfg.analysis.reference.is_some() && !(m.is_grid() || m == MethodName::Ula || m == MethodName::Mala || m == MethodName::Bdl) {
        at("analysis", "reference", "a reference solution needs a one-dimensional sampler or grid method".into());
    }
    if cfg.analysis.reference.is_some() && (m.is_stochastic() && cfg.run.snapshots.is_none()) {
        at("run", "snapshots", "comparison with a reference needs `run.snapshots`".into());
    }
    if cfg.analysis.detailed_balance_pairs > 0 && m != MethodName::Mala {
        at("analysis", "detailed_balance_pairs", "only meaningful for `mala`".into());
    }
    if !(cfg.analysis.burn_in >= 0.0) {
        at("analysis", "burn_in", "`analysis.burn_in` must be nonnegative".into());
    }
    for (occ, c) in cfg.checks.iter().enumerate() {
        if c.min.is_none() && c.max.is_none() && c.above.is_none() && c.below.is_none() && c.target.is_none() {
            out.push(ConfigIssue {
                line: locate(text, "check", occ, None),
                message: format!("check on `{}` has no bound", c.metric),
            });
        }
        if c.tol.is_some() != c.target.is_some() {
            out.push(ConfigIssue {
                line: locate(text, "check", occ, Some("tol")).or(locate(text, "check", occ, None)),
                message: format!("check on `{}`: `target` and `tol` go together", c.metric),
            });
        }
    }
    out
}

fn method_str(m: MethodName) -> &'static str {
    MethodName::ALL[m as usize]
}

fn on_step(t: f64, tau: f64) -> bool {
    let k = t / tau;
    (k - k.round()).abs() <= 1e-6 * k.abs().max(1.0)
}

fn steps_for(t: f64, tau: f64) -> u64 {
    (t / tau).round() as u64
}

impl ExperimentConfig {
    /// Canonical TOML text; parsing it gives back an equal config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn potential(&self) -> crate::Result<Potential> {
        parse_potential(&self.problem.potential)
    }
}

/// Command-line overrides applied on top of a config.
#[derive(Clone, Copy, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
}

/// Everything a run produced.
#[derive(Clone, Debug, Default)]
pub struct RunOutcome {
    pub metrics: BTreeMap<String, f64>,
    /// Data artifacts, in the order written. Excludes the manifest.
    pub artifacts: Vec<PathBuf>,
    /// Checks that failed, with the observed value (`None` if the metric
    /// was not produced).
    pub failed_checks: Vec<(Check, Option<f64>)>,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.failed_checks.is_empty()
    }
}

/// A module error with the experiment it occurred in.
#[derive(Debug)]
pub struct RunError {
    pub experiment: String,
    pub source: Error,
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "experiment '{}': {}", self.experiment, self.source)
    }
}

impl std::error::Error for RunError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    out_dir: &'a Path,
    metrics: BTreeMap<String, f64>,
    artifacts: Vec<PathBuf>,
}

impl Ctx<'_> {
    fn metric(&mut self, name: impl Into<String>, v: f64) {
        self.metrics.insert(name.into(), v);
    }

    /// Resolves an output template for item `k` of `count`.
    fn path(&self, template: &str, k: usize, count: usize) -> PathBuf {
        let name = if template.contains("{}") {
            template.replace("{}", &k.to_string())
        } else if count > 1 {
            let p = Path::new(template);
            match (p.file_stem(), p.extension()) {
                (Some(stem), Some(ext)) => p
                    .with_file_name(format!("{}_{k}.{}", stem.to_string_lossy(), ext.to_string_lossy()))
                    .to_string_lossy()
                    .into_owned(),
                _ => format!("{template}_{k}"),
            }
        } else {
            template.to_string()
        };
        self.out_dir.join(name)
    }

    fn write(&mut self, path: PathBuf, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> crate::Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut w = BufWriter::new(fs::File::create(&path)?);
        f(&mut w)?;
        w.flush()?;
        self.artifacts.push(path);
        Ok(())
    }
}

/// Runs a validated config, writing artifacts under `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path, overrides: Overrides) -> Result<RunOutcome, RunError> {
    let mut cfg = cfg.clone();
    if let Some(s) = overrides.seed {
        cfg.experiment.seed = Some(s);
    }
    if let Some(w) = overrides.workers {
        cfg.experiment.workers = w;
    }
    let wrap = |source: Error| RunError {
        experiment: cfg.experiment.name.clone(),
        source,
    };
    let started = Instant::now();
    fs::create_dir_all(out_dir).map_err(|e| wrap(e.into()))?;
    let mut ctx = Ctx {
        cfg: &cfg,
        out_dir,
        metrics: BTreeMap::new(),
        artifacts: Vec::new(),
    };
    let p = cfg.potential().map_err(wrap)?;
    let m = cfg.experiment.method;
    let result = if m.is_optimizer() {
        run_optimizer(&mut ctx, &p)
    } else if m.is_stochastic() {
        run_particles(&mut ctx, &p)
    } else {
        run_grid(&mut ctx, &p)
    };
    result.map_err(wrap)?;

    if let Some(t) = &cfg.outputs.metrics {
        let path = ctx.path(t, 0, 1);
        let text = metrics_text(&ctx.metrics);
        ctx.write(path, |w| w.write_all(text.as_bytes())).map_err(wrap)?;
    }
    let failed_checks: Vec<(Check, Option<f64>)> = cfg
        .checks
        .iter()
        .filter_map(|c| {
            let v = ctx.metrics.get(&c.metric).copied();
            (!v.is_some_and(|v| c.passes(v))).then(|| (c.clone(), v))
        })
        .collect();
    write_manifest(&ctx, started.elapsed().as_secs_f64(), &failed_checks).map_err(wrap)?;
    Ok(RunOutcome {
        metrics: ctx.metrics,
        artifacts: ctx.artifacts,
        failed_checks,
    })
}

/// `name = value` lines in name order.
pub fn metrics_text(metrics: &BTreeMap<String, f64>) -> String {
    metrics.iter().map(|(k, v)| format!("{k} = {}\n", fmt_real(*v))).collect()
}

/// Reads a file written by [`metrics_text`].
pub fn parse_metrics(text: &str) -> BTreeMap<String, f64> {
    text.lines()
        .filter_map(|l| l.split_once(" = "))
        .filter_map(|(k, v)| Some((k.trim().to_string(), v.trim().parse().ok()?)))
        .collect()
}

fn write_manifest(ctx: &Ctx, wall: f64, failed: &[(Check, Option<f64>)]) -> crate::Result<()> {
    let mut s = String::new();
    s.push_str("# Written by gradflow. Rerunning `config` reproduces every listed artifact.\n");
    s.push_str(&format!("gradflow_version = \"{}\"\n", env!("CARGO_PKG_VERSION")));
    if let Some(seed) = ctx.cfg.experiment.seed {
        s.push_str(&format!("seed = {seed}\n"));
    }
    s.push_str(&format!("workers = {}\n", ctx.cfg.experiment.workers));
    s.push_str(&format!("wall_time_seconds = {wall:.3}\n"));
    s.push_str(&format!("checks_failed = {}\n", failed.len()));
    let names: Vec<String> = ctx
        .artifacts
        .iter()
        .map(|a| format!("{:?}", a.strip_prefix(ctx.out_dir).unwrap_or(a).to_string_lossy()))
        .collect();
    s.push_str(&format!("artifacts = [{}]\n", names.join(", ")));
    let mut config = Table::new();
    config.insert("text".into(), Value::String(ctx.cfg.to_toml()));
    let mut wrapper = Table::new();
    wrapper.insert("config".into(), Value::Table(config));
    s.push('\n');
    s.push_str(&toml::to_string(&wrapper).expect("table serializes"));
    fs::write(ctx.out_dir.join("manifest.toml"), s)?;
    Ok(())
}

/// Reads the echoed config back out of a manifest.
pub fn config_from_manifest(text: &str) -> Result<ExperimentConfig, ConfigErrors> {
    let table: Table = text.parse().map_err(|e: toml::de::Error| {
        ConfigErrors(vec![ConfigIssue {
            line: None,
            message: e.message().to_string(),
        }])
    })?;
    let cfg = table
        .get("config")
        .and_then(|c| c.get("text"))
        .and_then(Value::as_str)
        .ok_or_else(|| {
            ConfigErrors(vec![ConfigIssue {
                line: None,
                message: "manifest has no [config] text".into(),
            }])
        })?;
    parse_config(cfg)
}

fn total_time(run: &RunSection, tau: f64) -> f64 {
    let last_snap = run.snapshots.as_ref().and_then(|s| s.last().copied()).unwrap_or(0.0);
    let h = run.horizon.or(run.steps.map(|s| s as f64 * tau)).unwrap_or(0.0);
    h.max(last_snap)
}

fn run_optimizer(ctx: &mut Ctx, p: &Potential) -> crate::Result<()> {
    let cfg = ctx.cfg;
    let run = &cfg.run;
    let tau = run.tau.expect("validated");
    let n_steps = steps_for(total_time(run, tau), tau) as usize;
    let inits = cfg.init.points.clone().unwrap_or_default();
    let mut min_margin = f64::INFINITY;
    let mut any_checked = false;
    let mut violations = 0usize;
    let mut rates_rows = Vec::new();
    let mut closed_form_err: Option<f64> = None;
    for (i, theta0) in inits.iter().enumerate() {
        let mut stepper: Box<dyn Stepper> = match cfg.experiment.method {
            MethodName::Gd => Box::new(ExplicitEuler { tau }),
            MethodName::GdImplicit => Box::new(ImplicitEuler {
                tau,
                tol: run.tol.unwrap_or(DEFAULT_PROXIMAL_TOL),
            }),
            MethodName::Newton => Box::new(Preconditioned {
                tau,
                field: PreconditionerField::Hessian,
            }),
            MethodName::Bfgs => Box::new(Bfgs::new(tau)),
            MethodName::Mirror => Box::new(Mirror {
                tau,
                map: match run.mirror {
                    Some(MirrorName::NegativeEntropy) => MirrorMap::NegativeEntropy,
                    _ => MirrorMap::Quadratic,
                },
            }),
            _ => unreachable!("not an optimizer"),
        };
        let traj = run_flow(p, stepper.as_mut(), theta0, n_steps)?;
        let last = traj.last_state().expect("nonempty").to_vec();
        if last.len() == 1 {
            ctx.metric(format!("final_{i}"), last[0]);
        } else {
            for (c, x) in last.iter().enumerate() {
                ctx.metric(format!("final_{i}_{c}"), *x);
            }
        }
        ctx.metric(format!("final_energy_{i}"), *traj.energies.last().expect("nonempty"));
        ctx.metric(format!("final_grad_norm_{i}"), *traj.grad_norms.last().expect("nonempty"));
        ctx.metric(format!("stopped_early_{i}"), traj.stopped_early as u8 as f64);
        if cfg.experiment.method == MethodName::Gd && cfg.problem.potential.starts_with("quadratic") {
            let e = quadratic_gd_error(p, theta0, tau, &traj);
            closed_form_err = Some(closed_form_err.unwrap_or(0.0).max(e));
        }
        if p.v_star.is_some() {
            let report = verify_rates(&traj, p)?;
            violations += report.dissipation_violations;
            if let Some(f) = report.fitted_factor {
                ctx.metric(format!("fitted_factor_{i}"), f);
            }
            if report.rate_bound_checked {
                any_checked = true;
                if let Some(mm) = report.min_margin() {
                    min_margin = min_margin.min(mm);
                }
                let factor = 1.0 - p.alpha.unwrap_or(0.0) / p.lipschitz.unwrap_or(1.0);
                let v_star = p.v_star.unwrap_or(0.0);
                let gap0 = traj.energies[0] - v_star;
                for (n, (e, mg)) in traj.energies.iter().zip(&report.margins).enumerate() {
                    rates_rows.push((i, n, e - v_star, factor.powi(n as i32) * gap0, *mg));
                }
            }
            ctx.metric("dissipation_violations", violations as f64);
        }
        if let Some(t) = &cfg.outputs.trajectory {
            let path = ctx.path(t, i, inits.len());
            ctx.write(path, |w| traj.write_csv(w))?;
        }
    }
    if any_checked {
        ctx.metric("rate_bound_margin_min", min_margin);
    }
    if let Some(e) = closed_form_err {
        ctx.metric("closed_form_max_error", e);
    }
    if let Some(t) = &cfg.outputs.rates {
        let path = ctx.path(t, 0, 1);
        ctx.write(path, |w| {
            writeln!(w, "init,step,gap,bound,margin")?;
            for (i, n, g, b, m) in &rates_rows {
                writeln!(w, "{i},{n},{},{},{}", fmt_real(*g), fmt_real(*b), fmt_real(*m))?;
            }
            Ok(())
        })?;
    }
    Ok(())
}

/// Max deviation of a gradient-descent trajectory on a quadratic from
/// `θₙ = (I - τA)ⁿ θ₀`, with `A` the constant Hessian.
fn quadratic_gd_error(p: &Potential, theta0: &[f64], tau: f64, traj: &Trajectory) -> f64 {
    let d = theta0.len();
    let Some(a) = p.hessian(theta0) else { return f64::NAN };
    let step = DMatrix::identity(d, d) - a * tau;
    let mut x = nalgebra::DVector::from_column_slice(theta0);
    let mut err: f64 = 0.0;
    for s in &traj.states {
        for (u, v) in s.iter().zip(x.iter()) {
            err = err.max((u - v).abs());
        }
        x = &step * x;
    }
    err
}

fn initial_ensemble(cfg: &ExperimentConfig, rng: RngStream, j: usize, d: usize) -> crate::Result<Ensemble> {
    let mut pos = Vec::with_capacity(j * d);
    if let Some(points) = &cfg.init.points {
        for k in 0..j {
            pos.extend_from_slice(&points[k % points.len()]);
        }
    } else {
        let mean = cfg.init.mean.as_ref().expect("validated");
        let var = cfg.init.variance.as_ref().expect("validated");
        for k in 0..j {
            let mut s = rng.substream_for(Purpose::Init, k as u64, 0);
            for c in 0..d {
                pos.push(mean[c] + var[c].sqrt() * s.gaussian());
            }
        }
    }
    Ensemble::new(d, pos, rng)
}

fn initial_grid_density(cfg: &ExperimentConfig, p: &Potential, grid: Grid1D) -> crate::Result<GridDensity> {
    let init = &cfg.init;
    if init.target {
        target_density(p, grid)
    } else if let Some(points) = &init.points {
        point_masses(grid, &points.iter().map(|x| x[0]).collect::<Vec<_>>())
    } else {
        gaussian_on_grid(
            grid,
            init.mean.as_ref().expect("validated")[0],
            init.variance.as_ref().expect("validated")[0],
        )
    }
}

/// Streaming per-chain sums for time averages.
struct ChainAverages {
    d: usize,
    count: u64,
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl ChainAverages {
    fn new(j: usize, d: usize) -> Self {
        Self {
            d,
            count: 0,
            s1: vec![0.0; j * d],
            s2: vec![0.0; j * d],
        }
    }

    fn add(&mut self, positions: &[f64]) {
        self.count += 1;
        for ((x, a), b) in positions.iter().zip(&mut self.s1).zip(&mut self.s2) {
            *a += x;
            *b += x * x;
        }
    }

    /// Pooled mean, pooled variance and the standard error of the variance
    /// from the spread of per-chain estimates.
    fn summary(&self, c: usize) -> (f64, f64, f64) {
        let j = self.s1.len() / self.d;
        let t = self.count as f64;
        let mu = (0..j).map(|k| self.s1[k * self.d + c]).sum::<f64>() / (j as f64 * t);
        let per_chain: Vec<f64> = (0..j)
            .map(|k| {
                let (a, b) = (self.s1[k * self.d + c] / t, self.s2[k * self.d + c] / t);
                b - 2.0 * mu * a + mu * mu
            })
            .collect();
        let var = per_chain.iter().sum::<f64>() / j as f64;
        let se = if j > 1 {
            (per_chain.iter().map(|v| (v - var).powi(2)).sum::<f64>() / ((j - 1) * j) as f64).sqrt()
        } else {
            f64::NAN
        };
        (mu, var, se)
    }
}

fn run_particles(ctx: &mut Ctx, p: &Potential) -> crate::Result<()> {
    let cfg = ctx.cfg;
    let run = &cfg.run;
    let an = &cfg.analysis;
    let tau = run.tau.expect("validated");
    let j = run.particles.expect("validated");
    let d = p.dim();
    let rng = RngStream::new(cfg.experiment.seed.expect("validated"));
    let method = match cfg.experiment.method {
        MethodName::Ula => Method::Ula,
        MethodName::Mala => Method::Mala,
        MethodName::Ensemble => Method::Ensemble {
            ridge: run.ridge,
            mobility: run.mobility.map(Mobility::from).unwrap_or_default(),
        },
        MethodName::Bdl => Method::Bdl {
            bandwidth: run.bandwidth.map_or(Bandwidth::Auto, Bandwidth::Fixed),
        },
        _ => unreachable!("not a sampler"),
    };
    if an.detailed_balance_pairs > 0 {
        detailed_balance_probe(ctx, p, tau, rng, an.detailed_balance_pairs);
    }
    let init = initial_ensemble(cfg, rng, j, d)?;
    let mut sampler = Sampler::new(method, p.clone(), init, tau)?.with_workers(cfg.experiment.workers)?;

    let n_steps = steps_for(total_time(run, tau), tau);
    let snap_steps: Vec<u64> = run.snapshots.iter().flatten().map(|t| steps_for(*t, tau)).collect();
    let burn = steps_for(an.burn_in, tau).min(n_steps);
    let averaging = an.expected_variance.is_some() || an.burn_in > 0.0 || an.iat;
    let mut avg = ChainAverages::new(j, d);
    let mut series: Vec<Vec<Vec<f64>>> = if an.iat { vec![vec![Vec::new(); j]; d] } else { Vec::new() };
    let mut snapshots: Vec<(u64, f64, Vec<f64>)> = Vec::new();

    let observe = |s: &Sampler, k: u64, avg: &mut ChainAverages, series: &mut Vec<Vec<Vec<f64>>>| {
        if averaging && k >= burn && (k - burn).is_multiple_of(run.thin) {
            let pos = s.ensemble().positions();
            avg.add(pos);
            if an.iat {
                for (c, per_axis) in series.iter_mut().enumerate() {
                    for (chain, xs) in per_axis.iter_mut().enumerate() {
                        xs.push(pos[chain * d + c]);
                    }
                }
            }
        }
    };
    observe(&sampler, 0, &mut avg, &mut series);
    for snap in snap_steps.iter().filter(|s| **s == 0) {
        snapshots.push((*snap, 0.0, sampler.ensemble().positions().to_vec()));
    }
    for k in 1..=n_steps {
        sampler.step()?;
        observe(&sampler, k, &mut avg, &mut series);
        for _ in snap_steps.iter().filter(|s| **s == k) {
            snapshots.push((k, sampler.time(), sampler.ensemble().positions().to_vec()));
        }
    }
    if snapshots.is_empty() {
        snapshots.push((n_steps, sampler.time(), sampler.ensemble().positions().to_vec()));
    }

    let stats = sampler.stats().clone();
    ctx.metric("acceptance_rate", stats.acceptance_rate());
    if cfg.experiment.method == MethodName::Bdl {
        ctx.metric("births", stats.births as f64);
        ctx.metric("deaths", stats.deaths as f64);
    }
    let final_pos = sampler.ensemble().positions().to_vec();
    if j >= 2 {
        let (mean, cov) = moments(&final_pos, d)?;
        for c in 0..d {
            ctx.metric(format!("final_mean_{c}"), mean[c]);
            ctx.metric(format!("final_var_{c}"), cov[(c, c)]);
        }
    }
    let right = final_pos.chunks(d).filter(|x| x[0] > an.split).count();
    ctx.metric("right_mass", right as f64 / j as f64);

    if averaging && avg.count > 0 {
        for c in 0..d {
            let (mu, var, se) = avg.summary(c);
            ctx.metric(format!("mean_{c}"), mu);
            ctx.metric(format!("var_{c}"), var);
            ctx.metric(format!("var_se_{c}"), se);
            if let Some(ev) = &an.expected_variance {
                ctx.metric(format!("var_z_{c}"), (var - ev[c]) / se);
            }
        }
    }
    if an.iat {
        let mut iats = Vec::with_capacity(d);
        for (c, chains) in series.iter().enumerate() {
            let iat = integrated_autocorrelation_time(chains)? * run.thin as f64;
            ctx.metric(format!("iat_{c}"), iat);
            iats.push(iat);
        }
        let hi = iats.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = iats.iter().cloned().fold(f64::INFINITY, f64::min);
        ctx.metric("iat_ratio", hi / lo);
    }

    // Histograms against the target and, optionally, a grid reference.
    if d == 1 && (cfg.outputs.histogram.is_some() || an.reference.is_some() || cfg.grid.is_some()) {
        if let Some(gs) = &cfg.grid {
            let fine = gs.build()?;
            let pi_fine = target_density(p, fine)?;
            let pi = pi_fine.coarsen_by(an.coarsen)?;
            let reference = match an.reference {
                Some(Reference::Fpe) => {
                    let times: Vec<f64> = snapshots.iter().map(|s| s.1).collect();
                    let rho0 = initial_grid_density(cfg, p, fine)?;
                    let mut st = FpeState::new(p.clone(), rho0)?;
                    let dt = 0.5 * st.max_stable_dt();
                    Some(st.evolve(FpeVariant::Standard, &times, dt)?)
                }
                None => None,
            };
            let mut tvs = Vec::new();
            let mut ref_max: f64 = 0.0;
            for (k, (_, _, pos)) in snapshots.iter().enumerate() {
                let h = histogram(pos, pi.grid)?;
                let tv = tv_distance(&h.density, &pi)?;
                ctx.metric(format!("tv_target_{k}"), tv);
                ctx.metric(format!("out_of_range_{k}"), h.out_of_range as f64);
                tvs.push(tv);
                if let Some(r) = &reference {
                    let rk = r[k].coarsen_by(an.coarsen)?;
                    let tv_ref = tv_distance(&h.density, &rk)?;
                    ctx.metric(format!("tv_reference_{k}"), tv_ref);
                    ref_max = ref_max.max(tv_ref);
                    if let Some(t) = &cfg.outputs.density {
                        let path = ctx.path(t, k, snapshots.len());
                        ctx.write(path, |w| r[k].write_csv(w))?;
                    }
                }
                if let Some(t) = &cfg.outputs.histogram {
                    let path = ctx.path(t, k, snapshots.len());
                    ctx.write(path, |w| h.density.write_csv(w))?;
                }
            }
            if let (None, Some(t)) = (&reference, &cfg.outputs.density) {
                let path = ctx.path(t, 0, 1);
                ctx.write(path, |w| pi.write_csv(w))?;
            }
            if let Some(last) = tvs.last() {
                ctx.metric("tv_target_last", *last);
            }
            let monotone = tvs.windows(2).all(|w| w[1] < w[0]);
            ctx.metric("tv_monotone", monotone as u8 as f64);
            if reference.is_some() {
                ctx.metric("tv_reference_max", ref_max);
            }
        }
    }

    if let Some(t) = &cfg.outputs.samples {
        let path = ctx.path(t, 0, 1);
        ctx.write(path, |w| {
            write!(w, "step,time,particle")?;
            for c in 0..d {
                write!(w, ",theta_{c}")?;
            }
            writeln!(w)?;
            for (step, time, pos) in &snapshots {
                let t = fmt_real(*time);
                for (k, x) in pos.chunks(d).enumerate() {
                    write!(w, "{step},{t},{k}")?;
                    for v in x {
                        write!(w, ",{}", fmt_real(*v))?;
                    }
                    writeln!(w)?;
                }
            }
            Ok(())
        })?;
    }
    if let Some(t) = &cfg.outputs.rates {
        let path = ctx.path(t, 0, 1);
        let text = stats.to_text();
        ctx.write(path, |w| w.write_all(text.as_bytes()))?;
    }
    Ok(())
}

/// Checks `π̃(x)q(x,y)a(x→y) = π̃(y)q(y,x)a(y→x)` on proposal pairs, and that
/// the acceptance is unchanged when `π̃` is scaled by a constant.
fn detailed_balance_probe(ctx: &mut Ctx, p: &Potential, tau: f64, rng: RngStream, pairs: usize) {
    let d = p.dim();
    let log_q = |x: &[f64], y: &[f64]| {
        let g = p.grad(x);
        -x.iter()
            .zip(y)
            .zip(&g)
            .map(|((a, b), gi)| (b - a + tau * gi).powi(2))
            .sum::<f64>()
            / (4.0 * tau)
    };
    let scaled = p.shifted(-(7.5f64).ln());
    let (mut worst, mut worst_scale) = (0.0f64, 0.0f64);
    for k in 0..pairs {
        let mut s = rng.substream_for(Purpose::Init, k as u64, u64::MAX);
        let x: Vec<f64> = (0..d).map(|_| s.gaussian()).collect();
        let xi: Vec<f64> = (0..d).map(|_| s.gaussian()).collect();
        let y = ula_step(p, &x, tau, &xi);
        let a_xy = mala_acceptance(p, &x, &y, tau);
        let a_yx = mala_acceptance(p, &y, &x, tau);
        let lhs = -p.eval(&x) + log_q(&x, &y) + a_xy.ln();
        let rhs = -p.eval(&y) + log_q(&y, &x) + a_yx.ln();
        worst = worst.max((lhs - rhs).exp_m1().abs());
        worst_scale = worst_scale.max((mala_acceptance(&scaled, &x, &y, tau) - a_xy).abs());
    }
    ctx.metric("detailed_balance_max_rel_error", worst);
    ctx.metric("scale_invariance_max_error", worst_scale);
}

fn run_grid(ctx: &mut Ctx, p: &Potential) -> crate::Result<()> {
    let cfg = ctx.cfg;
    let run = &cfg.run;
    let an = &cfg.analysis;
    let grid = cfg.grid.as_ref().expect("validated").build()?;
    let variant = match cfg.experiment.method {
        MethodName::Fpe => FpeVariant::Standard,
        MethodName::FpeWeighted => FpeVariant::Weighted(run.mobility.map(Mobility::from).unwrap_or_default()),
        MethodName::FpeBdl => FpeVariant::BirthDeath,
        _ => unreachable!("not a grid method"),
    };
    let pi = target_density(p, grid)?;
    let rho0 = initial_grid_density(cfg, p, grid)?;
    let mut state = FpeState::new(p.clone(), rho0.clone())?;
    let auto_dt = 0.5 * state.max_stable_dt_at(state.mobility(variant)?);
    let dt = run.tau.map_or(auto_dt, |t| t.min(auto_dt));

    let mut times: Vec<f64> = run.snapshots.clone().unwrap_or_default();
    let end = match (run.horizon, run.steps) {
        (Some(h), _) => Some(h),
        (None, Some(s)) => Some(s as f64 * dt),
        _ => None,
    };
    let mut densities = Vec::new();
    if let Some(s) = run.steps {
        // Fixed step count with a fixed step size.
        let mut at = times.iter().map(|t| (t / dt).round() as u64).peekable();
        while at.peek() == Some(&0) {
            at.next();
            densities.push(state.density.clone());
        }
        for k in 1..=s {
            state.advance(variant, dt)?;
            while at.peek() == Some(&k) {
                at.next();
                densities.push(state.density.clone());
            }
        }
        if densities.len() < times.len() {
            return Err(Error::InvalidParameter("snapshot times exceed the step count".into()));
        }
        times.push(state.time);
        densities.push(state.density.clone());
    } else {
        if let Some(e) = end {
            if times.last().is_none_or(|l| e > *l) {
                times.push(e);
            }
        }
        densities = state.evolve(variant, &times, dt)?;
    }

    ctx.metric("dt", dt);
    ctx.metric("tv_drift", tv_distance(&state.density, &rho0)?);
    ctx.metric("tv_target_final", tv_distance(&state.density, &pi)?);
    let mass_err = state.mass_log.iter().map(|m| (m - 1.0).abs()).fold(0.0, f64::max);
    ctx.metric("mass_error_max", mass_err);
    ctx.metric("boundary_mass", state.boundary_mass());
    ctx.metric("min_density", state.density.values.iter().cloned().fold(f64::INFINITY, f64::min));
    let kls: Vec<f64> = densities.iter().map(|d| kl_divergence(d, &pi)).collect::<crate::Result<_>>()?;
    for (k, kl) in kls.iter().enumerate() {
        ctx.metric(format!("kl_{k}"), *kl);
    }

    if let Some(Reference::Fpe) = an.reference {
        let mut reference = FpeState::new(p.clone(), rho0.clone())?;
        let ref_dens = reference.evolve(FpeVariant::Standard, &times, dt)?;
        let mut excess = f64::NEG_INFINITY;
        for (k, (d, r)) in densities.iter().zip(&ref_dens).enumerate() {
            let kr = kl_divergence(r, &pi)?;
            ctx.metric(format!("kl_reference_{k}"), kr);
            excess = excess.max(kl_divergence(d, &pi)? - kr);
        }
        ctx.metric("kl_excess_max", excess);
    }

    // Weighted norms need a positive target on the whole grid.
    if pi.values.iter().all(|v| *v > 1e-300) {
        let mut traj = vec![(0.0, rho0.clone())];
        traj.extend(times.iter().copied().zip(densities.iter().cloned()).filter(|(t, _)| *t > 0.0));
        let report = decay_report(&traj, &pi, p.alpha)?;
        for (k, row) in report.rows.iter().enumerate().skip(1) {
            ctx.metric(format!("l2_{}", k - 1), row.l2_pi_inv);
        }
        ctx.metric("heavy_tail", report.heavy_tail as u8 as f64);
        if let Some(m) = report.min_l2_margin() {
            ctx.metric("l2_margin_min", m);
        }
        if let Some(m) = report.min_kl_margin() {
            ctx.metric("kl_margin_min", m);
        }
        if let Some(t) = &cfg.outputs.rates {
            let path = ctx.path(t, 0, 1);
            ctx.write(path, |w| report.write_csv(w))?;
        }
    }

    if let Some(t) = &cfg.outputs.density {
        for (k, d) in densities.iter().enumerate() {
            let path = ctx.path(t, k, densities.len());
            ctx.write(path, |w| d.write_csv(w))?;
        }
    }
    if let Some(t) = &cfg.outputs.histogram {
        let path = ctx.path(t, 0, 1);
        ctx.write(path, |w| pi.write_csv(w))?;
    }
    Ok(())
}

trait CoarsenBy {
    fn coarsen_by(&self, factor: usize) -> crate::Result<GridDensity>;
}

impl CoarsenBy for GridDensity {
    fn coarsen_by(&self, factor: usize) -> crate::Result<GridDensity> {
        if factor <= 1 {
            Ok(self.clone())
        } else {
            self.coarsen(factor)
        }
    }
}

/// Reads two files and evaluates `metric` between them. Density files
/// (`x,value`) support `kl`, `tv`, `l2pinv` and `w2`; sample files
/// (`step,time,particle,theta_0,...`, last recorded step) support `w2`.
pub fn compare_files(a: &Path, b: &Path, metric: &str) -> crate::Result<f64> {
    let read = |p: &Path| -> crate::Result<String> { Ok(fs::read_to_string(p)?) };
    let (ta, tb) = (read(a)?, read(b)?);
    let is_samples = |t: &str| t.starts_with("step,time,particle");
    match (is_samples(&ta), is_samples(&tb)) {
        (false, false) => {
            let da = GridDensity::read_csv(ta.as_bytes())?;
            let db = GridDensity::read_csv(tb.as_bytes())?;
            match metric {
                "kl" => kl_divergence(&da, &db),
                "tv" => tv_distance(&da, &db),
                "l2pinv" => l2_pi_inv_norm(&da, &db),
                "w2" => crate::density::wasserstein_grid(&da, &db),
                other => Err(Error::InvalidParameter(format!(
                    "unknown metric '{other}' (expected kl, tv, l2pinv or w2)"
                ))),
            }
        }
        (true, true) => match metric {
            "w2" => crate::density::wasserstein1d(&last_samples(&ta)?, &last_samples(&tb)?),
            "kl" | "tv" | "l2pinv" => Err(Error::Unsupported(format!(
                "metric '{metric}' needs density files; sample files support only w2"
            ))),
            other => Err(Error::InvalidParameter(format!(
                "unknown metric '{other}' (expected kl, tv, l2pinv or w2)"
            ))),
        },
        _ => Err(Error::GridMismatch("cannot compare a density file with a sample file".into())),
    }
}

/// First coordinate of every particle at the last recorded step.
fn last_samples(text: &str) -> crate::Result<Vec<f64>> {
    let mut rows: Vec<(u64, f64)> = Vec::new();
    for (k, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::InvalidParameter(format!("sample file line {}: malformed row", k + 1));
        if f.len() < 4 {
            return Err(bad());
        }
        rows.push((f[0].parse().map_err(|_| bad())?, f[3].parse().map_err(|_| bad())?));
    }
    let last = rows.iter().map(|r| r.0).max().ok_or(Error::Empty("sample file"))?;
    Ok(rows.into_iter().filter(|r| r.0 == last).map(|r| r.1).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[experiment]
name = "basins"
method = "gd"

[problem]
potential = "double_well"

[init]
points = [[0.1], [-2]]

[run]
tau = 0.05
horizon = 1
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.experiment.workers, 1);
        assert_eq!(c.run.thin, 1);
        assert_eq!(c.analysis.coarsen, 1);
        assert_eq!(c.init.points, Some(vec![vec![0.1], vec![-2.0]]));
        assert!(c.checks.is_empty());
    }

    #[test]
    fn round_trip() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut texts = vec![MINIMAL.to_string()];
        for entry in std::fs::read_dir(dir).unwrap() {
            texts.push(std::fs::read_to_string(entry.unwrap().path()).unwrap());
        }
        assert!(texts.len() > 10);
        for t in texts {
            let c = parse_config(&t).unwrap_or_else(|e| panic!("{e}\n{t}"));
            let again = parse_config(&c.to_toml()).unwrap();
            assert_eq!(c, again);
        }
    }

    #[test]
    fn missing_seed_is_named() {
        let text = r#"
[experiment]
name = "x"
method = "ula"
[problem]
potential = "double_well"
[init]
points = [[0.0]]
[run]
tau = 0.01
steps = 10
particles = 10
"#;
        let err = parse_config(text).unwrap_err();
        assert!(err.0.iter().any(|e| e.message.contains("experiment.seed")), "{err}");
    }

    #[test]
    fn collects_all_errors_with_lines() {
        let text = r#"[experiment]
name = "x"
method = "gd"
colour = "blue"
[problem]
potential = "double_well"
[run]
tau = "fast"
steps = 10
bogus = 1
"#;
        let err = parse_config(text).unwrap_err();
        let lines: Vec<Option<usize>> = err.0.iter().map(|e| e.line).collect();
        assert!(lines.contains(&Some(4)), "{err}");
        assert!(lines.contains(&Some(8)), "{err}");
        assert!(lines.contains(&Some(10)), "{err}");
        assert!(err.0.len() >= 3);

        let syntax = parse_config("[experiment\nname = 1").unwrap_err();
        assert_eq!(syntax.0.len(), 1);
        assert!(syntax.0[0].line.is_some());
    }

    #[test]
    fn semantic_errors_are_collected() {
        let text = r#"
[experiment]
name = "x"
method = "fpe"
[problem]
potential = "quadratic:1,1"
[init]
target = true
[run]
horizon = 1
"#;
        let err = parse_config(text).unwrap_err();
        assert!(err.0.iter().any(|e| e.message.contains("[grid]")));
        assert!(err.0.iter().any(|e| e.message.contains("one-dimensional")));
    }

    #[test]
    fn checks() {
        let c = Check {
            metric: "m".into(),
            min: Some(0.0),
            below: Some(1.0),
            ..Default::default()
        };
        assert!(c.passes(0.0) && c.passes(0.5));
        assert!(!c.passes(1.0) && !c.passes(-0.1) && !c.passes(f64::NAN));
        let t = Check {
            metric: "m".into(),
            target: Some(1.0),
            tol: Some(1e-6),
            ..Default::default()
        };
        assert!(t.passes(1.0 + 5e-7) && !t.passes(1.0 + 2e-6));
    }

    #[test]
    fn gd_run_writes_artifacts_and_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = parse_config(MINIMAL).unwrap();
        c.outputs.trajectory = Some("traj_{}.csv".into());
        c.outputs.metrics = Some("metrics.txt".into());
        c.checks.push(Check {
            metric: "final_0".into(),
            above: Some(0.0),
            ..Default::default()
        });
        let out = run_experiment(&c, dir.path(), Overrides::default()).unwrap();
        assert!(out.passed());
        assert!(dir.path().join("traj_0.csv").exists());
        assert!(dir.path().join("traj_1.csv").exists());
        let m = parse_metrics(&std::fs::read_to_string(dir.path().join("metrics.txt")).unwrap());
        assert_eq!(m, out.metrics);
        let manifest = std::fs::read_to_string(dir.path().join("manifest.toml")).unwrap();
        assert_eq!(config_from_manifest(&manifest).unwrap(), c);
    }

    #[test]
    fn output_paths() {
        let cfg = parse_config(MINIMAL).unwrap();
        let ctx = Ctx {
            cfg: &cfg,
            out_dir: Path::new("out"),
            metrics: BTreeMap::new(),
            artifacts: Vec::new(),
        };
        assert_eq!(ctx.path("h_{}.csv", 2, 3), Path::new("out/h_2.csv"));
        assert_eq!(ctx.path("h.csv", 2, 3), Path::new("out/h_2.csv"));
        assert_eq!(ctx.path("h.csv", 0, 1), Path::new("out/h.csv"));
    }
}
