//! `gradflow` command-line runner.
//!
//! Exit codes: 0 ok, 2 config error, 3 runtime error, 4 assertion failed.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gradflow::density::fmt_real;
use gradflow::experiment::{
    compare_files, config_from_manifest, parse_config, run_experiment, ConfigErrors, ExperimentConfig, Overrides,
};
use gradflow::potentials::IDENTIFIERS;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_ASSERTION: u8 = 4;

/// Environment variable naming the root directory for run outputs.
const OUT_ENV: &str = "GRADFLOW_OUT";

#[derive(Parser)]
#[command(name = "gradflow", version, about = "Gradient flows for optimization and sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config (or rerun the config echoed in a manifest.toml).
    Run {
        config: PathBuf,
        /// Override `experiment.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Override `experiment.workers`.
        #[arg(long)]
        workers: Option<usize>,
        /// Output directory. Defaults to `$GRADFLOW_OUT/<name>`, else `out/<name>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a distance between two density CSVs or two sample CSVs.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, value_enum)]
        metric: Metric,
    },
    /// List potential identifiers accepted in `problem.potential`.
    ListPotentials,
    /// Check a config without running it.
    Validate { config: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Kl,
    Tv,
    L2pinv,
    W2,
}

impl Metric {
    fn name(self) -> &'static str {
        match self {
            Metric::Kl => "kl",
            Metric::Tv => "tv",
            Metric::L2pinv => "l2pinv",
            Metric::W2 => "w2",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            seed,
            workers,
            out,
        } => run(&config, Overrides { seed, workers }, out),
        Command::Compare { a, b, metric } => match compare_files(&a, &b, metric.name()) {
            Ok(v) => {
                println!("{}", fmt_real(v));
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(EXIT_RUNTIME)
            }
        },
        Command::ListPotentials => {
            for (id, desc) in IDENTIFIERS {
                println!("{id:<28} {desc}");
            }
            ExitCode::SUCCESS
        }
        Command::Validate { config } => match load(&config) {
            Ok(c) => {
                println!("{}: ok ({} method, {} checks)", config.display(), method_name(&c), c.checks.len());
                ExitCode::SUCCESS
            }
            Err(code) => code,
        },
    }
}

fn method_name(c: &ExperimentConfig) -> String {
    gradflow::experiment::MethodName::ALL[c.experiment.method as usize].to_string()
}

fn report_config_errors(path: &Path, e: &ConfigErrors) {
    for issue in &e.0 {
        eprintln!("{}: {issue}", path.display());
    }
}

/// Reads a config file, or the config echoed in a run manifest.
fn load(path: &Path) -> Result<ExperimentConfig, ExitCode> {
    let text = fs::read_to_string(path).map_err(|e| {
        eprintln!("error: cannot read {}: {e}", path.display());
        ExitCode::from(EXIT_CONFIG)
    })?;
    let parsed = if text.lines().any(|l| l.starts_with("gradflow_version =")) {
        config_from_manifest(&text)
    } else {
        parse_config(&text)
    };
    parsed.map_err(|e| {
        report_config_errors(path, &e);
        ExitCode::from(EXIT_CONFIG)
    })
}

fn run(path: &Path, overrides: Overrides, out: Option<PathBuf>) -> ExitCode {
    let cfg = match load(path) {
        Ok(c) => c,
        Err(code) => return code,
    };
    if overrides.workers == Some(0) {
        eprintln!("error: --workers must be positive");
        return ExitCode::from(EXIT_CONFIG);
    }
    let out_dir = out.unwrap_or_else(|| {
        std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("out"))
            .join(&cfg.experiment.name)
    });
    match run_experiment(&cfg, &out_dir, overrides) {
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
        Ok(outcome) => {
            println!("{}: {} artifacts in {}", cfg.experiment.name, outcome.artifacts.len() + 1, out_dir.display());
            for (check, value) in &outcome.failed_checks {
                match value {
                    Some(v) => eprintln!("check failed: {} (got {})", check.describe(), fmt_real(*v)),
                    None => eprintln!("check failed: {} (metric not produced)", check.describe()),
                }
            }
            if outcome.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_ASSERTION)
            }
        }
    }
}
