//! Acceptance suite. Every experiment comes from a checked-in config under
//! `configs/`; this file only decides which config checks belong to which
//! criterion. Prints one PASS/FAIL line per criterion and exits nonzero if
//! any fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use gradflow::experiment::{parse_config, run_experiment, ExperimentConfig, Overrides, RunOutcome};

struct Criterion {
    id: u32,
    title: &'static str,
    /// `(config, metrics)`: the config's checks on these metrics, or all of
    /// them when the list is empty.
    parts: &'static [(&'static str, &'static [&'static str])],
    budget: Duration,
}

const SECOND: Duration = Duration::from_secs(1);
const MINUTE: Duration = Duration::from_secs(60);
const FEW_MINUTES: Duration = Duration::from_secs(300);

const CRITERIA: &[Criterion] = &[
    Criterion {
        id: 1,
        title: "gd basins of attraction on the double well",
        parts: &[("basins", &[])],
        budget: SECOND,
    },
    Criterion {
        id: 2,
        title: "linear rate and closed form on the anisotropic quadratic",
        parts: &[("quadratic_rate", &[])],
        budget: SECOND,
    },
    Criterion {
        id: 3,
        title: "ULA histograms approach the double-well target",
        parts: &[("langevin_double_well", &[])],
        budget: FEW_MINUTES,
    },
    Criterion {
        id: 4,
        title: "ULA variance bias and MALA correction on OU",
        parts: &[("ou_ula", &[]), ("ou_mala", &[])],
        budget: MINUTE,
    },
    Criterion {
        id: 5,
        title: "MALA detailed balance and scale invariance",
        parts: &[("mala_detailed_balance", &[])],
        budget: SECOND,
    },
    Criterion {
        id: 6,
        title: "L2(1/pi) decay within the Poincare envelope",
        parts: &[("ou_fpe_decay", &["l2_margin_min"])],
        budget: MINUTE,
    },
    Criterion {
        id: 7,
        title: "KL decay within the e^{-2t} envelope",
        parts: &[("ou_fpe_decay", &["kl_margin_min"])],
        budget: MINUTE,
    },
    Criterion {
        id: 8,
        title: "stationarity of the three Fokker-Planck variants",
        parts: &[
            ("stationary_fpe", &[]),
            ("stationary_fpe_weighted", &[]),
            ("stationary_fpe_bdl", &[]),
        ],
        budget: MINUTE,
    },
    Criterion {
        id: 9,
        title: "ULA histograms agree with the Fokker-Planck solution",
        parts: &[("ula_vs_fpe", &[])],
        budget: FEW_MINUTES,
    },
    Criterion {
        id: 10,
        title: "ensemble preconditioning: posterior moments and isotropic IAT",
        parts: &[
            ("ensemble_posterior", &[]),
            ("anisotropic_ensemble", &[]),
            ("anisotropic_ula", &[]),
        ],
        budget: FEW_MINUTES,
    },
    Criterion {
        id: 11,
        title: "birth-death beats plain Langevin on the bimodal mixture",
        parts: &[("bimodal_fpe_bdl", &[]), ("bimodal_bdl", &[]), ("bimodal_ula", &[])],
        budget: FEW_MINUTES,
    },
];

/// Stochastic runs whose sample CSVs must not depend on the worker count.
const DETERMINISM: &[&str] = &["ensemble_posterior", "bimodal_bdl", "bimodal_ula"];
const DETERMINISM_WORKERS: usize = 4;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> Result<ExperimentConfig, String> {
    let text = std::fs::read_to_string(configs_dir().join(format!("{name}.toml"))).map_err(|e| e.to_string())?;
    parse_config(&text).map_err(|e| e.to_string())
}

type Done = (Result<RunOutcome, String>, Duration);

struct Runner {
    root: tempfile::TempDir,
    done: BTreeMap<String, Done>,
}

impl Runner {
    /// Runs a config once per worker setting; repeated requests reuse the result.
    fn run(&mut self, name: &str, workers: Option<usize>) -> (Result<RunOutcome, String>, Duration, PathBuf) {
        let key = format!("{name}@{}", workers.unwrap_or(0));
        let out = self.root.path().join(&key);
        if let Some((r, t)) = self.done.get(&key) {
            return (r.clone(), *t, out);
        }
        let start = Instant::now();
        let result = load(name)
            .and_then(|cfg| run_experiment(&cfg, &out, Overrides { seed: None, workers }).map_err(|e| e.to_string()));
        let elapsed = start.elapsed();
        self.done.insert(key, (result.clone(), elapsed));
        (result, elapsed, out)
    }
}

fn main() {
    let mut runner = Runner {
        root: tempfile::tempdir().expect("temp dir"),
        done: BTreeMap::new(),
    };
    let mut failures = 0;
    for c in CRITERIA {
        let mut notes = Vec::new();
        let mut ok = true;
        let mut elapsed = Duration::ZERO;
        for (config, metrics) in c.parts {
            let (result, t, _) = runner.run(config, None);
            elapsed += t;
            let outcome = match result.and_then(|o| load(config).map(|cfg| (o, cfg))) {
                Ok(x) => x,
                Err(e) => {
                    ok = false;
                    notes.push(format!("{config}: {e}"));
                    continue;
                }
            };
            let (outcome, cfg) = outcome;
            let checks = cfg
                .checks
                .iter()
                .filter(|k| metrics.is_empty() || metrics.contains(&k.metric.as_str()));
            for check in checks {
                let value = outcome.metrics.get(&check.metric).copied();
                let pass = value.is_some_and(|v| check.passes(v));
                ok &= pass;
                let shown = value.map_or("missing".to_string(), |v| format!("{v:.4e}"));
                notes.push(format!("{config}.{} = {shown}{}", check.metric, if pass { "" } else { " FAILED" }));
            }
        }
        if elapsed > c.budget {
            ok = false;
            notes.push(format!("over the {} s budget", c.budget.as_secs()));
        }
        report(c.id, c.title, ok, elapsed, &notes);
        failures += !ok as usize;
    }

    let mut ok = true;
    let mut notes = Vec::new();
    let mut elapsed = Duration::ZERO;
    for name in DETERMINISM {
        let (a, _, dir_a) = runner.run(name, None);
        let (b, t, dir_b) = runner.run(name, Some(DETERMINISM_WORKERS));
        elapsed += t;
        let same = a.is_ok()
            && b.is_ok()
            && match (std::fs::read(dir_a.join("samples.csv")), std::fs::read(dir_b.join("samples.csv"))) {
                (Ok(x), Ok(y)) => x == y,
                _ => false,
            };
        ok &= same;
        notes.push(format!(
            "{name}: 1 vs {DETERMINISM_WORKERS} workers {}",
            if same { "identical" } else { "DIFFER" }
        ));
    }
    report(12, "sample CSVs independent of worker count", ok, elapsed, &notes);
    failures += !ok as usize;

    let total = CRITERIA.len() + 1;
    println!("acceptance: {} of {total} criteria passed", total - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}

fn report(id: u32, title: &str, ok: bool, elapsed: Duration, notes: &[String]) {
    println!(
        "{} [{id:>2}] {title} ({:.2} s) :: {}",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        notes.join("; ")
    );
}
