use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gradflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradflow")).args(args).output().expect("binary runs")
}

fn config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn data_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.toml")
        .collect();
    v.sort();
    v
}

const SMALL_ULA: &str = r#"
[experiment]
name = "small"
method = "ula"
seed = 1

[problem]
potential = "double_well"

[init]
points = [[0.5], [-0.5]]

[run]
tau = 0.01
steps = 50
particles = 64
snapshots = [0.25, 0.5]

[grid]
lo = -3.0
hi = 3.0
n = 30

[outputs]
samples = "samples.csv"
histogram = "hist_{}.csv"
density = "target.csv"
metrics = "metrics.txt"
"#;

#[test]
fn validate_reports_all_errors_with_lines() {
    let ok = gradflow(&["validate", &config("basins.toml")]);
    assert_eq!(ok.status.code(), Some(0), "{}", stderr(&ok));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(
        &bad,
        "[experiment]\nname = \"x\"\nmethod = \"ula\"\nspeed = 3\n[problem]\npotential = \"double_well\"\n[run]\ntau = \"big\"\n",
    )
    .unwrap();
    let o = gradflow(&["validate", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("line 4") && err.contains("speed"), "{err}");
    assert!(err.contains("line 8") && err.contains("run.tau"), "{err}");
}

#[test]
fn missing_seed_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    fs::write(&path, SMALL_ULA.replace("seed = 1\n", "")).unwrap();
    let o = gradflow(&["validate", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("experiment.seed"));
}

#[test]
fn basins_recipe_writes_five_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("basins");
    let o = gradflow(&["run", &config("basins.toml"), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for k in 0..5 {
        let text = fs::read_to_string(out.join(format!("trajectory_{k}.csv"))).unwrap();
        let last = text.lines().last().unwrap();
        let theta: f64 = last.split(',').nth(2).unwrap().parse().unwrap();
        assert!((theta.abs() - 1.0).abs() < 1e-6, "{last}");
    }
    assert!(out.join("manifest.toml").exists());
}

#[test]
fn reruns_and_manifest_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL_ULA).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let m = dir.path().join("m");
    assert!(gradflow(&["run", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]).status.success());
    let o = gradflow(&["run", cfg.to_str().unwrap(), "--out", b.to_str().unwrap(), "--workers", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = a.join("manifest.toml");
    assert!(gradflow(&["run", manifest.to_str().unwrap(), "--out", m.to_str().unwrap()]).status.success());
    let files = data_files(&a);
    assert_eq!(files.len(), 5);
    for f in files {
        let name = f.file_name().unwrap();
        let bytes = fs::read(&f).unwrap();
        assert_eq!(bytes, fs::read(b.join(name)).unwrap(), "{name:?}");
        assert_eq!(bytes, fs::read(m.join(name)).unwrap(), "{name:?}");
    }
}

#[test]
fn seed_override_changes_samples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL_ULA).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(gradflow(&["run", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]).status.success());
    assert!(gradflow(&["run", cfg.to_str().unwrap(), "--out", b.to_str().unwrap(), "--seed", "2"]).status.success());
    assert_ne!(fs::read(a.join("samples.csv")).unwrap(), fs::read(b.join("samples.csv")).unwrap());
    assert!(fs::read_to_string(b.join("manifest.toml")).unwrap().contains("seed = 2"));
}

#[test]
fn output_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_gradflow"))
        .args(["run", &config("quadratic_rate.toml")])
        .env("GRADFLOW_OUT", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("quadratic_rate/rates.csv").exists());
}

#[test]
fn failed_check_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    let text = fs::read_to_string(config("basins.toml")).unwrap() + "\n[[check]]\nmetric = \"final_0\"\nbelow = 0.0\n";
    fs::write(&cfg, text).unwrap();
    let o = gradflow(&["run", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("final_0"));

    let missing = fs::read_to_string(config("basins.toml")).unwrap() + "\n[[check]]\nmetric = \"no_such\"\nmax = 1.0\n";
    fs::write(&cfg, missing).unwrap();
    let o = gradflow(&["run", cfg.to_str().unwrap(), "--out", dir.path().join("p").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("not produced"));
}

#[test]
fn runtime_error_exits_3_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    let o = gradflow(&["run", &config("basins.toml"), "--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("basins"));
}

#[test]
fn compare_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL_ULA).unwrap();
    let out = dir.path().join("o");
    assert!(gradflow(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]).status.success());
    let h = out.join("hist_1.csv");
    let t = out.join("target.csv");
    let (h, t) = (h.to_str().unwrap(), t.to_str().unwrap());

    let same = gradflow(&["compare", h, h, "--metric", "tv"]);
    assert_eq!(stdout(&same).trim().parse::<f64>().unwrap(), 0.0);
    let tv: f64 = stdout(&gradflow(&["compare", h, t, "--metric", "tv"])).trim().parse().unwrap();
    assert!(tv > 0.0 && tv < 1.0);
    assert_eq!(stdout(&gradflow(&["compare", h, t, "--metric", "tv"])).lines().count(), 1);

    // Disjoint supports.
    let left = dir.path().join("left.csv");
    let right = dir.path().join("right.csv");
    fs::write(&left, "x,value\n0.5,1\n1.5,0\n").unwrap();
    fs::write(&right, "x,value\n0.5,0\n1.5,1\n").unwrap();
    let o = gradflow(&["compare", left.to_str().unwrap(), right.to_str().unwrap(), "--metric", "tv"]);
    assert_eq!(stdout(&o).trim().parse::<f64>().unwrap(), 1.0);

    let samples = out.join("samples.csv");
    let s = samples.to_str().unwrap();
    let w = gradflow(&["compare", s, s, "--metric", "w2"]);
    assert_eq!(stdout(&w).trim().parse::<f64>().unwrap(), 0.0);

    let mismatch = dir.path().join("coarse.csv");
    fs::write(&mismatch, "x,value\n0,0.5\n1,0.5\n").unwrap();
    let o = gradflow(&["compare", h, mismatch.to_str().unwrap(), "--metric", "kl"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("grid"), "{}", stderr(&o));

    let o = gradflow(&["compare", h, t, "--metric", "hellinger"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn lists_potentials() {
    let o = gradflow(&["list-potentials"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for id in ["double_well", "quadratic:", "mixture:", "posterior:"] {
        assert!(text.contains(id), "{text}");
    }
}
