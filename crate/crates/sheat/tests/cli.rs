use std::path::Path;
use std::process::{Command, Output};

use sheat::manifest::RunManifest;

const BIN: &str = env!("CARGO_BIN_EXE_sheat");

/// Small but nontrivial ensemble settings shared by the MC tests.
const SMALL: &[&str] = &[
    "grid.n_interior=31",
    "grid.dt=0.001",
    "grid.horizon=0.1",
    "run.n_samples=130",
    "moments.p=[2, 4]",
    "moments.functionals=[\"lp\", \"sup\", \"pointwise\"]",
];

fn sheat(args: &[&str], overrides: &[&str]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env_remove("SHEAT_SEED");
    for o in overrides {
        cmd.arg("--override").arg(o);
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn diagnostic(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("diagnostic line");
    serde_json::from_str(line).expect("stderr ends with JSON")
}

fn manifest(dir: &Path) -> RunManifest {
    RunManifest::read(&dir.join("manifest.json")).unwrap()
}

#[test]
fn unknown_config_key_exits_1_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[model]\nlambda = 1.0\ntemperature = 3\n").unwrap();
    let out = sheat(&["moments", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()], &[]);
    assert_eq!(code(&out), 1);
    let d = diagnostic(&out);
    assert_eq!(d["error"], "config");
    assert_eq!(d["exit_code"], 1);
    assert!(!dir.path().join("manifest.json").exists(), "nothing computed before validation");
}

#[test]
fn usage_errors_exit_1() {
    let out = sheat(&["no-such-command"], &[]);
    assert_eq!(code(&out), 1);
    assert_eq!(diagnostic(&out)["error"], "config");
}

#[test]
fn simulate_without_noise_decays_at_the_first_eigenvalue() {
    let dir = tempfile::tempdir().unwrap();
    let out = sheat(
        &["simulate", "--out", dir.path().to_str().unwrap()],
        &["model.lambda=0", "model.initial={kind=\"sine_mode\", n=1}", "grid.horizon=0.5"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mut r = csv::Reader::from_path(dir.path().join("path.csv")).unwrap();
    let rows: Vec<(f64, f64)> = r
        .deserialize::<(u64, f64, f64, f64, f64)>()
        .map(|row| row.unwrap())
        .map(|(_, t, _, u, _)| (t, u))
        .collect();
    let t_end = rows.iter().map(|r| r.0).fold(0.0, f64::max);
    let max = rows.iter().filter(|r| r.0 == t_end).map(|r| r.1.abs()).fold(0.0, f64::max);
    let exact = (-0.5 * std::f64::consts::PI.powi(2) * t_end).exp();
    assert!((max / exact - 1.0).abs() < 0.01, "max {max} vs {exact}");
}

#[test]
fn excitation_report_carries_the_slope() {
    let dir = tempfile::tempdir().unwrap();
    let out = sheat(
        &["excitation", "--out", dir.path().to_str().unwrap()],
        &["model.lambdas=[8, 16, 32, 64]", "oracle.estimate_error=false", "oracle.time_panels=100", "oracle.space_nodes=31"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("excitation.json")).unwrap()).unwrap();
    let slope = report[0]["slope"].as_f64().unwrap();
    assert!(slope > 3.0 && slope < 5.0, "ê₂ = {slope}");
    assert!(dir.path().join("excitation_plot.csv").exists());
}

#[test]
fn manifest_lists_every_output_with_its_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let out = sheat(&["moments", "--out", dir.path().to_str().unwrap(), "--seed", "11"], SMALL);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let m = manifest(dir.path());
    assert_eq!(m.config.run.master_seed, 11);
    assert!(m.output("moments.csv").is_some());
    for f in &m.outputs {
        let bytes = std::fs::read(dir.path().join(&f.path)).unwrap();
        assert_eq!(sheat::output::sha256_hex(&bytes), f.sha256, "{}", f.path);
    }
    assert!(m.calibrated_constants.kappa1 > 0.0 && m.calibrated_constants.k3 > 0.0);
}

#[test]
fn manifest_rerun_reproduces_csv_bit_for_bit() {
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    let out = sheat(&["moments", "--out", first.path().to_str().unwrap(), "--seed", "5"], SMALL);
    assert_eq!(code(&out), 0);
    let m = first.path().join("manifest.json");
    let out = sheat(&["moments", "--manifest", m.to_str().unwrap(), "--out", second.path().to_str().unwrap()], &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let a = std::fs::read(first.path().join("moments.csv")).unwrap();
    let b = std::fs::read(second.path().join("moments.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn seed_flag_beats_environment_beats_config() {
    let dir = tempfile::tempdir().unwrap();
    let run = |flag: Option<&str>, env: Option<&str>| {
        let mut cmd = Command::new(BIN);
        cmd.args(["simulate", "--out", dir.path().to_str().unwrap(), "--override", "run.master_seed=3"]);
        cmd.args(["--override", "grid.n_interior=15", "--override", "grid.horizon=0.01", "--override", "grid.dt=0.001"]);
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        match env {
            Some(e) => cmd.env("SHEAT_SEED", e),
            None => cmd.env_remove("SHEAT_SEED"),
        };
        assert!(cmd.output().unwrap().status.success());
        manifest(dir.path()).config.run.master_seed
    };
    assert_eq!(run(None, None), 3);
    assert_eq!(run(None, Some("4")), 4);
    assert_eq!(run(Some("5"), Some("4")), 5);
}

#[test]
fn sweep_output_is_independent_of_workers() {
    let one = tempfile::tempdir().unwrap();
    let eight = tempfile::tempdir().unwrap();
    let mut o: Vec<&str> = SMALL.to_vec();
    o.push("model.lambdas=[0.5, 2]");
    for (dir, w) in [(&one, "1"), (&eight, "8")] {
        let out = sheat(&["moments", "--out", dir.path().to_str().unwrap(), "--workers", w], &o);
        assert_eq!(code(&out), 0);
    }
    let a = std::fs::read(one.path().join("moments.csv")).unwrap();
    let b = std::fs::read(eight.path().join("moments.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn sweep_resumes_from_checksummed_cells() {
    let dir = tempfile::tempdir().unwrap();
    let mut o: Vec<&str> = SMALL.to_vec();
    o.push("model.lambdas=[0.5, 1, 2]");
    let args = ["moments", "--out", dir.path().to_str().unwrap()];
    assert_eq!(code(&sheat(&args, &o)), 0);
    assert_eq!(manifest(dir.path()).reused_cells, 0);
    let reference = std::fs::read(dir.path().join("moments.csv")).unwrap();

    assert_eq!(code(&sheat(&args, &o)), 0);
    assert_eq!(manifest(dir.path()).reused_cells, 3);

    // A cell whose bytes no longer match its checksum is recomputed.
    let cell = dir.path().join("cells/lambda-001.toml");
    let mut text = std::fs::read_to_string(&cell).unwrap();
    text.push_str("\n# edited\n");
    std::fs::write(&cell, text).unwrap();
    assert_eq!(code(&sheat(&args, &o)), 0);
    assert_eq!(manifest(dir.path()).reused_cells, 2);
    assert_eq!(std::fs::read(dir.path().join("moments.csv")).unwrap(), reference);

    // Changing the physics invalidates every cell.
    o.push("model.nu=0.25");
    assert_eq!(code(&sheat(&args, &o)), 0);
    assert_eq!(manifest(dir.path()).reused_cells, 0);
}

#[test]
fn failed_cells_are_listed_and_the_rest_persisted() {
    let dir = tempfile::tempdir().unwrap();
    let out = sheat(
        &["moments", "--out", dir.path().to_str().unwrap()],
        &[
            "model.sigma={kind=\"linear_plus_sine\", c=1.0, d=0.5}",
            "model.lambdas=[0.5, 1e150]",
            "grid.n_interior=15",
            "grid.dt=0.001",
            "grid.horizon=0.05",
            "run.n_samples=8",
        ],
    );
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(diagnostic(&out)["error"], "numerical");
    let m = manifest(dir.path());
    assert_eq!(m.failed_cells.len(), 1);
    assert_eq!(m.failed_cells[0].lambda, 1e150);
    assert!(m.output("cells/lambda-000.toml").is_some());
    let rows = csv::Reader::from_path(dir.path().join("moments.csv")).unwrap().records().count();
    assert!(rows > 0);
}

#[test]
fn verification_failure_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    // One refinement level gives no evidence that the implied constant settles.
    let out = sheat(
        &["verify-bounds", "--out", dir.path().to_str().unwrap()],
        &["bounds.levels=1", "bounds.x_points=2", "bounds.t_max_threshold=50"],
    );
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(diagnostic(&out)["error"], "assertion");
    let m = manifest(dir.path());
    assert!(!m.failed_assertions.is_empty());
    assert!(m.output("bounds.json").is_some(), "outputs are kept on assertion failure");
}
